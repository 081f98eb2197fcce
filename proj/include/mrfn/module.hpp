#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mrfn/ops.hpp"
#include "mrfn/tensor.hpp"

namespace mrfn {

using ParamVisitor = std::function<void(const std::string& name, Tensor& param)>;

/// Base for anything that owns learnable tensors. Subclasses enumerate their
/// parameters (and children) through visit(), in a fixed order that defines
/// checkpoint layout and initialization order.
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) = default;
  Module& operator=(Module&&) = default;
  virtual ~Module() = default;

  virtual void visit(const std::string& prefix, const ParamVisitor& fn) = 0;
  /// Uniform weights and biases in +-1/sqrt(fan_in).
  virtual void init(std::mt19937_64& rng) = 0;

  std::vector<std::pair<std::string, Tensor>> named_parameters();
  std::vector<Tensor> parameters();
  std::int64_t parameter_count();
  void zero_grad();
  void set_trainable(bool trainable);
};

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

class Conv2d : public Module {
 public:
  Conv2d() = default;
  Conv2d(const ConvSpec& spec, DType dtype);

  Tensor forward(const Tensor& x) const { return conv2d(x, spec_, weight, bias); }
  const ConvSpec& spec() const { return spec_; }

  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Tensor weight;
  Tensor bias;

 private:
  ConvSpec spec_;
};

class ConvTranspose2d : public Module {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(const ConvSpec& spec, DType dtype);

  Tensor forward(const Tensor& x) const { return conv_transpose2d(x, spec_, weight, bias); }
  const ConvSpec& spec() const { return spec_; }

  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Tensor weight;
  Tensor bias;

 private:
  ConvSpec spec_;
};

}  // namespace mrfn
