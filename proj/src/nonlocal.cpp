#include "mrfn/nonlocal.hpp"

namespace mrfn {

std::string_view sampler_kind_name(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::None: return "none";
    case SamplerKind::SPP: return "spp";
    case SamplerKind::SPDS: return "spds";
  }
  return "?";
}

SamplerKind parse_sampler_kind(std::string_view name) {
  if (name == "none") return SamplerKind::None;
  if (name == "spp") return SamplerKind::SPP;
  if (name == "spds") return SamplerKind::SPDS;
  throw std::invalid_argument("unknown sampler '" + std::string(name) +
                              "' (expected none, spp or spds)");
}

void SamplerSpec::validate(std::int64_t h, std::int64_t w) const {
  switch (kind) {
    case SamplerKind::None: return;
    case SamplerKind::SPP:
      if (spp_sizes.empty()) throw ShapeError("spp sampler needs at least one output size");
      for (int s : spp_sizes) {
        if (s <= 0) throw ShapeError("spp output size must be positive");
        if (s > h || s > w) {
          throw ShapeError("spp output size " + std::to_string(s) + " exceeds map " +
                           std::to_string(h) + "x" + std::to_string(w));
        }
      }
      return;
    case SamplerKind::SPDS:
      if (spds_factors.empty()) throw ShapeError("spds sampler needs at least one factor");
      for (std::size_t i = 0; i < spds_factors.size(); ++i) {
        const int f = spds_factors[i];
        if (f <= 0) throw ShapeError("spds factor must be positive");
        if (i > 0 && f <= spds_factors[i - 1]) {
          throw ShapeError("spds factors must be strictly increasing");
        }
        if (h % f != 0 || w % f != 0) {
          throw ShapeError("spds factor " + std::to_string(f) + " does not divide map " +
                           std::to_string(h) + "x" + std::to_string(w));
        }
      }
      return;
  }
}

std::int64_t SamplerSpec::token_count(std::int64_t h, std::int64_t w) const {
  validate(h, w);
  std::int64_t s = 0;
  switch (kind) {
    case SamplerKind::None: return h * w;
    case SamplerKind::SPP:
      for (int k : spp_sizes) s += static_cast<std::int64_t>(k) * k;
      return s;
    case SamplerKind::SPDS:
      for (int f : spds_factors) s += (h / f) * (w / f);
      return s;
  }
  return s;
}

AttentionDims attention_dims(std::int64_t embed, std::int64_t h, std::int64_t w,
                             const SamplerSpec& sampler) {
  return {embed, h * w, sampler.token_count(h, w)};
}

Tensor to_tokens(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("to_tokens: expected NCHW, got " + shape_str(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return permute(reshape(x, {n, c, hw}), {0, 2, 1});
}

Tensor from_tokens(const Tensor& tokens, std::int64_t h, std::int64_t w) {
  if (tokens.rank() != 3 || tokens.dim(1) != h * w) {
    throw ShapeError("from_tokens: " + shape_str(tokens.shape()) + " is not [N," +
                     std::to_string(h * w) + ",C]");
  }
  const auto n = tokens.dim(0), c = tokens.dim(2);
  return reshape(permute(tokens, {0, 2, 1}), {n, c, h, w});
}

Tensor spds_sample(const Tensor& e, std::span<const int> factors) {
  SamplerSpec spec;
  spec.kind = SamplerKind::SPDS;
  spec.spds_factors.assign(factors.begin(), factors.end());
  spec.validate(e.dim(2), e.dim(3));
  std::vector<Tensor> parts;
  for (int f : factors) parts.push_back(to_tokens(f == 1 ? e : maxpool2d(e, f, f)));
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

Tensor spp_sample(const Tensor& e, std::span<const int> sizes) {
  SamplerSpec spec;
  spec.kind = SamplerKind::SPP;
  spec.spp_sizes.assign(sizes.begin(), sizes.end());
  spec.validate(e.dim(2), e.dim(3));
  std::vector<Tensor> parts;
  for (int s : sizes) parts.push_back(to_tokens(adaptive_maxpool2d(e, s, s)));
  return parts.size() == 1 ? parts.front() : concat(parts, 1);
}

Tensor sample_tokens(const Tensor& e, const SamplerSpec& sampler) {
  switch (sampler.kind) {
    case SamplerKind::None: return to_tokens(e);
    case SamplerKind::SPP: return spp_sample(e, sampler.spp_sizes);
    case SamplerKind::SPDS: return spds_sample(e, sampler.spds_factors);
  }
  throw std::logic_error("unreachable sampler kind");
}

// ---------------------------------------------------------------------------

FusePreceding::FusePreceding(int channels, int sources, DType dtype)
    : reduce(ConvSpec::same(channels * sources, channels, 1), dtype), sources_(sources) {
  if (sources <= 0) throw ShapeError("fuse_preceding needs at least one source");
}

Tensor FusePreceding::forward(std::span<const Tensor> features) const {
  if (static_cast<int>(features.size()) != sources_) {
    throw ShapeError("fuse_preceding: expected " + std::to_string(sources_) + " features, got " +
                     std::to_string(features.size()));
  }
  for (const auto& f : features) {
    if (f.shape() != features.front().shape()) {
      throw ShapeError("fuse_preceding: feature " + shape_str(f.shape()) + " differs from " +
                       shape_str(features.front().shape()));
    }
  }
  if (features.size() == 1) return reduce.forward(features.front());
  return reduce.forward(concat(features, 1));
}

void FusePreceding::visit(const std::string& prefix, const ParamVisitor& fn) {
  reduce.visit(join_name(prefix, "reduce"), fn);
}

void FusePreceding::init(std::mt19937_64& rng) { reduce.init(rng); }

// ---------------------------------------------------------------------------

NonLocalAttention::NonLocalAttention(int channels, int embed, DType dtype)
    : query(ConvSpec::same(channels, embed, 1), dtype),
      key(ConvSpec::same(channels, embed, 1), dtype),
      value(ConvSpec::same(channels, embed, 1), dtype),
      out(ConvSpec::same(embed, channels, 1), dtype) {}

Tensor NonLocalAttention::forward(const Tensor& x) const {
  return forward(x, x, SamplerSpec{SamplerKind::None, {}, {}});
}

Tensor NonLocalAttention::forward(const Tensor& x_query, const Tensor& source,
                                  const SamplerSpec& sampler, AttentionTrace* trace) const {
  if (x_query.shape() != source.shape()) {
    throw ShapeError("non-local: query input " + shape_str(x_query.shape()) +
                     " and key/value source " + shape_str(source.shape()) + " differ");
  }
  const auto h = x_query.dim(2), w = x_query.dim(3);
  sampler.validate(h, w);
  const Tensor q = to_tokens(query.forward(x_query));                      // [N, n, E]
  const Tensor k = permute(sample_tokens(key.forward(source), sampler), {0, 2, 1});  // [N, E, S]
  const Tensor v = sample_tokens(value.forward(source), sampler);          // [N, S, E]
  const Tensor sim = matmul(q, k);
  const Tensor attn = softmax(sim, -1);
  if (trace != nullptr) {
    trace->similarity = sim;
    trace->weights = attn;
  }
  return add(out.forward(from_tokens(matmul(attn, v), h, w)), x_query);
}

void NonLocalAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  query.visit(join_name(prefix, "query"), fn);
  key.visit(join_name(prefix, "key"), fn);
  value.visit(join_name(prefix, "value"), fn);
  out.visit(join_name(prefix, "out"), fn);
}

void NonLocalAttention::init(std::mt19937_64& rng) {
  query.init(rng);
  key.init(rng);
  value.init(rng);
  out.init(rng);
}

}  // namespace mrfn
