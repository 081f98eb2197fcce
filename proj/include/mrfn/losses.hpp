#pragma once

#include <filesystem>
#include <string_view>
#include <vector>

#include "mrfn/haze.hpp"
#include "mrfn/module.hpp"

namespace mrfn {

/// Layer layout of the perceptual proxy: stages of 3x3 convs (ReLU after
/// each) separated by 2x2 max-pools, then GAP and a linear hazy/clean logit.
/// Layers are numbered 1.. in execution order across stages.
struct ExtractorConfig {
  std::vector<int> stage_depths{2, 2, 3, 3, 3};
  std::vector<int> stage_widths{16, 32, 64, 64, 64};
  /// Every layer passes its input through unchanged (no conv, ReLU or pooling).
  bool identity = false;
  DType dtype = DType::F32;

  int layer_count() const;
  void validate() const;
};

struct ExtractorOutput {
  std::vector<Tensor> taps;  // taps[i-1] is the output of layer i, for i <= executed
  int executed = 0;
};

class PerceptualExtractor : public Module {
 public:
  explicit PerceptualExtractor(const ExtractorConfig& cfg = {});

  /// Runs layers 1..last_layer and stops.
  ExtractorOutput features(const Tensor& x, int last_layer) const;
  /// Hazy-vs-clean logit, shape [N,1,1,1]; positive means hazy.
  Tensor logits(const Tensor& x) const;

  int layer_count() const { return cfg_.layer_count(); }
  const ExtractorConfig& config() const { return cfg_; }
  /// freeze() was called and no parameter has since been made trainable again.
  bool frozen() const;
  void freeze();

  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  std::vector<Conv2d> convs;
  Conv2d head;

 private:
  ExtractorConfig cfg_;
  std::vector<bool> pool_after_;
  bool frozen_ = false;
};

struct ProxyTrainOptions {
  int epochs = 40;
  int batch = 4;
  int crop = 64;
  double lr = 3e-3;
  std::uint64_t seed = 0;
};

struct ProxyTrainResult {
  double train_loss = 0.0;
  double heldout_accuracy = 0.0;
  int heldout_count = 0;
};

/// Trains the hazy (label 1) vs clean (label 0) classifier on a deterministic
/// 50/50 split of the manifest entries and reports accuracy on the other half.
/// Throws std::invalid_argument when the manifest cannot supply both classes.
ProxyTrainResult train_proxy_classifier(PerceptualExtractor& extractor,
                                        const std::vector<ManifestEntry>& entries,
                                        const ProxyTrainOptions& options);

enum class CRVariant { None, Original, DFCR, SIFCR };

std::string_view cr_variant_name(CRVariant v);
CRVariant parse_cr_variant(std::string_view name);

struct CRConfig {
  CRVariant variant = CRVariant::DFCR;
  std::vector<int> taps{1, 3, 5};
  std::vector<double> weights{1.0, 1.0, 1.0};
  double epsilon = 1e-7;
  double beta = 0.1;

  /// Tap and weight table of a named variant; None has no taps and beta 0.
  static CRConfig make(CRVariant variant, double beta = 0.1);
  bool enabled() const { return variant != CRVariant::None && beta != 0.0 && !taps.empty(); }
  int deepest_tap() const;
  void validate() const;
  bool operator==(const CRConfig&) const = default;
};

struct CRResult {
  Tensor loss;       // scalar, differentiable w.r.t. O only
  int executed = 0;  // extractor layers run per image
};

/// sum_i w_i * L1(phi_i(J), phi_i(O)) / (L1(phi_i(I), phi_i(O)) + eps).
/// The extractor must be frozen.
CRResult cr_loss(const Tensor& O, const Tensor& J, const Tensor& I,
                 const PerceptualExtractor& extractor, const CRConfig& cfg);

struct LossTerms {
  Tensor total;
  double l1 = 0.0;
  double cr = 0.0;
};

/// l1_mean(O,J) + beta * cr_loss; the CR term is skipped entirely when
/// disabled, in which case `extractor` may be null.
LossTerms total_loss(const Tensor& O, const Tensor& J, const Tensor& I,
                     const PerceptualExtractor* extractor, const CRConfig& cfg);

}  // namespace mrfn
