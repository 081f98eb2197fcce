#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrfn/config.hpp"
#include "mrfn/data.hpp"

namespace mrfn {

/// Raised when any loss term stops being finite; names the step (counted from 1) and term.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(int step, const std::string& term, double value);
  int step() const { return step_; }
  const std::string& term() const { return term_; }

 private:
  int step_;
  std::string term_;
};

struct StepLog {
  int step = 0;  // steps completed, counted from 1
  double lr = 0.0;
  double loss = 0.0;
  double l1 = 0.0;
  double cr = 0.0;
};

struct TrainHooks {
  /// Written every checkpoint_every steps and at the end; empty disables saving.
  std::filesystem::path checkpoint;
  /// Continue from `checkpoint` (parameters, optimizer moments, step).
  bool resume = false;
  /// Stop after this many total steps (schedule still spans `iterations`); -1 runs to the end.
  int stop_at = -1;
  std::function<void(const StepLog&)> on_log;
};

struct TrainSummary {
  int start_step = 0;
  int end_step = 0;
  std::vector<StepLog> log;
  double seconds = 0.0;
};

/// Adam + cosine schedule. Step t draws its batch from a generator seeded by
/// (seed, t) alone, so resuming reproduces an uninterrupted run exactly.
TrainSummary train_model(Model& model, const std::vector<ImagePair>& pairs, const TrainConfig& cfg,
                         const CRConfig& loss, const PerceptualExtractor* extractor,
                         const TrainHooks& hooks = {});

struct ImageScore {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalSummary {
  std::vector<ImageScore> images;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

/// Full-image (uncropped) PSNR/SSIM of model(hazy) against clean.
EvalSummary evaluate(const Model& model, const std::vector<ImagePair>& pairs, bool clamp = true);

}  // namespace mrfn
