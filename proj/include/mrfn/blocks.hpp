#pragma once

#include <memory>
#include <string>
#include <string_view>

#include "mrfn/module.hpp"

namespace mrfn {

/// Local feature blocks. MSFE_SA is the "FE -> MSFE" ablation row: multi-stream
/// extraction with the pointwise spatial attention of FAB.
enum class BlockKind { RB, FAB, ParallelFE, MSFE_SA, MSFAB };

std::string_view block_kind_name(BlockKind kind);
BlockKind parse_block_kind(std::string_view name);

struct BlockConfig {
  BlockKind kind = BlockKind::MSFAB;
  int channels = 32;
  int ca_reduction = 8;
  int sa_reduction = 2;

  /// Channels must divide by both reductions; sa_reduction is fixed at 2.
  void validate() const;
};

class Block : public Module {
 public:
  virtual Tensor forward(const Tensor& x) const = 0;
};

/// x + conv3x3(relu(conv3x3(x))).
class ResidualBlock : public Block {
 public:
  ResidualBlock(int channels, DType dtype);
  Tensor forward(const Tensor& x) const override;
  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d conv1;
  Conv2d conv2;
};

/// Squeeze-excite style channel weights: sigmoid(1x1(relu(1x1(GAP(y))))).
class ChannelAttention : public Module {
 public:
  ChannelAttention(int channels, int reduction, DType dtype);
  /// Per-channel weights in (0,1), shape [N,C,1,1].
  Tensor weights(const Tensor& y) const;
  Tensor forward(const Tensor& y) const;
  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d squeeze;
  Conv2d excite;
};

/// Single-channel spatial weight map broadcast over C. The pointwise form uses
/// two 1x1 convs; the dilated form two 3x3 convs with dilation 2, so each
/// weight sees a 9x9 neighbourhood.
class SpatialAttention : public Module {
 public:
  SpatialAttention(int channels, int reduction, bool dilated, DType dtype);
  /// Weight map in (0,1), shape [N,1,H,W].
  Tensor weight_map(const Tensor& y) const;
  Tensor forward(const Tensor& y) const;
  bool dilated() const { return dilated_; }
  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d reduce;
  Conv2d project;

 private:
  bool dilated_;
};

enum class ExtractorKind { Single, MultiStream, Parallel };

/// Feature extraction part of the attention blocks.
///  Single:      Y = conv3x3(x + relu(conv3x3(x)))
///  MultiStream: Y = conv3x3(x + relu(conv1x1([c1x1(x), c3x3(x), dc3x3_d2(x)])))
///  Parallel:    as MultiStream with three plain 3x3 streams.
class FeatureExtractor : public Module {
 public:
  FeatureExtractor(ExtractorKind kind, int channels, DType dtype);
  Tensor forward(const Tensor& x) const;
  /// Output of one parallel stream (0..2) before fusion; Single has stream 0 only.
  Tensor stream(int index, const Tensor& x) const;
  ExtractorKind kind() const { return kind_; }
  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d streams[3];
  Conv2d fuse;
  Conv2d out;

 private:
  ExtractorKind kind_;
  int stream_count_;
};

/// Z = x + SA(CA(FE(x))).
class AttentionBlock : public Block {
 public:
  explicit AttentionBlock(const BlockConfig& cfg, DType dtype);
  Tensor forward(const Tensor& x) const override;
  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  FeatureExtractor fe;
  ChannelAttention ca;
  SpatialAttention sa;
};

std::unique_ptr<Block> make_block(const BlockConfig& cfg, DType dtype);

/// Closed-form parameter count of one block (bias on every conv).
std::int64_t block_param_count(const BlockConfig& cfg);

}  // namespace mrfn
