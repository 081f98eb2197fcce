#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "mrfn/module.hpp"

namespace mrfn {

enum class SamplerKind { None, SPP, SPDS };

std::string_view sampler_kind_name(SamplerKind kind);
SamplerKind parse_sampler_kind(std::string_view name);

/// How keys/values are reduced to S tokens before attention.
///  SPP:  adaptive max-pool to each s x s grid, S = sum s^2.
///  SPDS: max-pool with kernel = stride = f for each factor, S = sum (h/f)(w/f).
struct SamplerSpec {
  SamplerKind kind = SamplerKind::SPDS;
  std::vector<int> spp_sizes{1, 3, 6, 8};
  std::vector<int> spds_factors{2, 4};

  /// Throws ShapeError when the sampler cannot run on an h x w map.
  void validate(std::int64_t h, std::int64_t w) const;
  std::int64_t token_count(std::int64_t h, std::int64_t w) const;

  bool operator==(const SamplerSpec&) const = default;
};

/// Sizes of the attention problem at the bottleneck: `embed` channels,
/// `queries` = h*w, `keys` = S after sampling.
struct AttentionDims {
  std::int64_t embed = 0;
  std::int64_t queries = 0;
  std::int64_t keys = 0;

  /// Multiply-accumulates of Q x K plus softmax(S) x V.
  std::int64_t matmul_macs() const { return 2 * queries * keys * embed; }
  double key_ratio() const { return static_cast<double>(keys) / static_cast<double>(queries); }
};

AttentionDims attention_dims(std::int64_t embed, std::int64_t h, std::int64_t w,
                             const SamplerSpec& sampler);

/// [N,C,h,w] -> [N,h*w,C], tokens in row-major spatial order.
Tensor to_tokens(const Tensor& x);
/// Inverse of to_tokens.
Tensor from_tokens(const Tensor& tokens, std::int64_t h, std::int64_t w);

Tensor spds_sample(const Tensor& e, std::span<const int> factors);
Tensor spp_sample(const Tensor& e, std::span<const int> sizes);
/// Dispatches on the sampler kind; None is the plain token flattening.
Tensor sample_tokens(const Tensor& e, const SamplerSpec& sampler);

/// Concatenates the level-3 feature list along channels and reduces it back
/// to the channel count of one element with a 1x1 conv.
class FusePreceding : public Module {
 public:
  FusePreceding() = default;
  FusePreceding(int channels, int sources, DType dtype);
  Tensor forward(std::span<const Tensor> features) const;
  int sources() const { return sources_; }
  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d reduce;

 private:
  int sources_ = 0;
};

/// Optional capture of attention internals for inspection in tests and tools.
struct AttentionTrace {
  Tensor similarity;  // [N, queries, keys] before softmax
  Tensor weights;     // softmax(similarity)
};

/// Non-local attention with a residual output:
///   F = conv1x1(reshape(softmax(Q K) V)) + x_query
/// Q comes from x_query; K and V come from `source`, optionally sampled.
/// With source == x_query and no sampling this is the standard non-local block.
/// No 1/sqrt(C) temperature is applied.
class NonLocalAttention : public Module {
 public:
  NonLocalAttention() = default;
  NonLocalAttention(int channels, int embed, DType dtype);

  Tensor forward(const Tensor& x) const;  // self attention, no sampling
  Tensor forward(const Tensor& x_query, const Tensor& source, const SamplerSpec& sampler,
                 AttentionTrace* trace = nullptr) const;

  void visit(const std::string& prefix, const ParamVisitor& fn) override;
  void init(std::mt19937_64& rng) override;

  Conv2d query;
  Conv2d key;
  Conv2d value;
  Conv2d out;
};

}  // namespace mrfn
