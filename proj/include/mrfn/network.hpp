#pragma once

#include <array>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mrfn/blocks.hpp"
#include "mrfn/nonlocal.hpp"

namespace mrfn {

enum class AttentionKind { None, NLB, CNLB };
enum class Recursion { Shared, Independent };

std::string_view attention_kind_name(AttentionKind kind);
AttentionKind parse_attention_kind(std::string_view name);
std::string_view recursion_name(Recursion r);
Recursion parse_recursion(std::string_view name);

/// Full description of the three-level encoder/decoder. Level i runs at
/// channels C * 2^min(i, 4-i) for i = 0..4 (C, 2C, 4C, 2C, C).
struct NetworkConfig {
  int channels = 32;
  std::array<int, 5> depths{1, 2, 4, 2, 1};
  BlockKind encoder_kind = BlockKind::RB;  // levels 1 and 2
  BlockKind bottleneck_kind = BlockKind::MSFAB;
  BlockKind decoder_kind = BlockKind::RB;  // levels 4 and 5
  int ca_reduction = 8;
  AttentionKind attention = AttentionKind::CNLB;
  SamplerSpec sampler;                      // used by CNLB only
  int embed_channels = 0;                   // 0 selects 2C
  Recursion recursion = Recursion::Shared;
  bool global_residual = false;
  DType dtype = DType::F32;

  /// "B", "L", "tiny" or "base" (FAB bottleneck, no attention).
  static NetworkConfig preset(std::string_view name);

  int level_channels(int level) const;
  BlockKind level_kind(int level) const;
  int embed() const { return embed_channels > 0 ? embed_channels : 2 * channels; }
  /// Number of level-3 outputs fused by the cross non-local block.
  int fusion_sources() const { return depths[2]; }

  /// Throws ShapeError / std::invalid_argument on an unusable combination.
  void validate() const;

  bool operator==(const NetworkConfig&) const = default;
};

/// One level's stack. Under shared recursion a single block is applied
/// `depth` times; otherwise `depth` independent blocks run in sequence.
class Stage : public Module {
 public:
  Stage() = default;
  Stage(const BlockConfig& block, int depth, Recursion recursion, DType dtype);

  /// Returns the final output and, if `outputs` is given, every intermediate one.
  Tensor forward(const Tensor& x, std::vector<Tensor>* outputs = nullptr) const;
  int depth() const { return depth_; }
  std::size_t block_count() const { return blocks_.size(); }
  const Block& block(std::size_t i) const { return *blocks_.at(i); }
  Block& block(std::size_t i) { return *blocks_.at(i); }

  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

 private:
  std::vector<std::unique_ptr<Block>> blocks_;
  int depth_ = 0;
};

struct ForwardTrace {
  Tensor bottleneck;  // final level-3 output before attention
  AttentionTrace attention;
};

class Model : public Module {
 public:
  explicit Model(const NetworkConfig& cfg);

  /// Training-mode forward: pad to a multiple of 16, run, crop back. No clamp.
  Tensor forward(const Tensor& x, ForwardTrace* trace = nullptr) const;
  /// Evaluation: no tape, output clamped to [0,1].
  Tensor infer(const Tensor& x) const;

  const NetworkConfig& config() const { return cfg_; }

  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d head;
  Stage level1;
  Conv2d down1;
  Stage level2;
  Conv2d down2;
  Stage level3;
  FusePreceding fuse;
  NonLocalAttention attention;
  ConvTranspose2d up1;
  Stage level4;
  ConvTranspose2d up2;
  Stage level5;
  Conv2d tail;

 private:
  NetworkConfig cfg_;
};

/// Builds and initializes a model; identical seeds give identical parameters.
std::unique_ptr<Model> build_model(const NetworkConfig& cfg, std::uint64_t seed);

/// Geometry shared by the model and the cost accounting.
ConvSpec down_sample_spec(int in_ch, int out_ch);
ConvSpec up_sample_spec(int in_ch, int out_ch);
constexpr int kSpatialMultiple = 16;

}  // namespace mrfn
