#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mrfn/checkpoint.hpp"

namespace mrfn {

/// lr(t) = lr_final + (lr_init - lr_final) (1 + cos(pi t / T)) / 2, t clamped to [0,T].
double cosine_lr(std::int64_t step, std::int64_t total, double lr_init, double lr_final);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamOptions&) const = default;
};

/// Adam with bias correction. Moments share each parameter's dtype.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamOptions options = {});

  /// One update with learning rate `lr`; parameters without a gradient are skipped.
  void step(double lr);
  void zero_grad();
  std::int64_t steps() const { return steps_; }

  /// Moments and step count under "optim/m/<name>", "optim/v/<name>", "optim/step".
  void export_state(TensorTable& table) const;
  void import_state(const TensorTable& table);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  AdamOptions opt_;
  std::int64_t steps_ = 0;
};

}  // namespace mrfn
