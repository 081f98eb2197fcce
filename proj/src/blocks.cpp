#include "mrfn/blocks.hpp"

#include <array>

namespace mrfn {

std::string_view block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::RB: return "RB";
    case BlockKind::FAB: return "FAB";
    case BlockKind::ParallelFE: return "ParallelFE";
    case BlockKind::MSFE_SA: return "MSFE_SA";
    case BlockKind::MSFAB: return "MSFAB";
  }
  return "?";
}

BlockKind parse_block_kind(std::string_view name) {
  constexpr std::array kinds{BlockKind::RB, BlockKind::FAB, BlockKind::ParallelFE,
                             BlockKind::MSFE_SA, BlockKind::MSFAB};
  for (auto k : kinds) {
    if (block_kind_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown block kind '" + std::string(name) +
                              "' (expected RB, FAB, ParallelFE, MSFE_SA or MSFAB)");
}

void BlockConfig::validate() const {
  if (channels <= 0) throw ShapeError("block channels must be positive");
  if (kind == BlockKind::RB) return;
  if (sa_reduction != 2) {
    throw ShapeError("spatial attention reduction must be 2, got " + std::to_string(sa_reduction));
  }
  if (ca_reduction <= 0 || channels % ca_reduction != 0) {
    throw ShapeError("channels " + std::to_string(channels) +
                     " not divisible by channel-attention reduction " +
                     std::to_string(ca_reduction));
  }
  if (channels % sa_reduction != 0) {
    throw ShapeError("channels " + std::to_string(channels) +
                     " not divisible by spatial-attention reduction " +
                     std::to_string(sa_reduction));
  }
}

// ---------------------------------------------------------------------------

ResidualBlock::ResidualBlock(int channels, DType dtype)
    : conv1(ConvSpec::same(channels, channels, 3), dtype),
      conv2(ConvSpec::same(channels, channels, 3), dtype) {}

Tensor ResidualBlock::forward(const Tensor& x) const {
  return add(x, conv2.forward(relu(conv1.forward(x))));
}

void ResidualBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  conv1.visit(join_name(prefix, "conv1"), fn);
  conv2.visit(join_name(prefix, "conv2"), fn);
}

void ResidualBlock::init(std::mt19937_64& rng) {
  conv1.init(rng);
  conv2.init(rng);
}

// ---------------------------------------------------------------------------

ChannelAttention::ChannelAttention(int channels, int reduction, DType dtype)
    : squeeze(ConvSpec::same(channels, channels / reduction, 1), dtype),
      excite(ConvSpec::same(channels / reduction, channels, 1), dtype) {}

Tensor ChannelAttention::weights(const Tensor& y) const {
  return sigmoid(excite.forward(relu(squeeze.forward(global_avg_pool(y)))));
}

Tensor ChannelAttention::forward(const Tensor& y) const { return mul(y, weights(y)); }

void ChannelAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  squeeze.visit(join_name(prefix, "squeeze"), fn);
  excite.visit(join_name(prefix, "excite"), fn);
}

void ChannelAttention::init(std::mt19937_64& rng) {
  squeeze.init(rng);
  excite.init(rng);
}

// ---------------------------------------------------------------------------

SpatialAttention::SpatialAttention(int channels, int reduction, bool dilated, DType dtype)
    : reduce(dilated ? ConvSpec::same(channels, channels / reduction, 3, 2)
                     : ConvSpec::same(channels, channels / reduction, 1),
             dtype),
      project(dilated ? ConvSpec::same(channels / reduction, 1, 3, 2)
                      : ConvSpec::same(channels / reduction, 1, 1),
              dtype),
      dilated_(dilated) {}

Tensor SpatialAttention::weight_map(const Tensor& y) const {
  return sigmoid(project.forward(relu(reduce.forward(y))));
}

Tensor SpatialAttention::forward(const Tensor& y) const { return mul(y, weight_map(y)); }

void SpatialAttention::visit(const std::string& prefix, const ParamVisitor& fn) {
  reduce.visit(join_name(prefix, "reduce"), fn);
  project.visit(join_name(prefix, "project"), fn);
}

void SpatialAttention::init(std::mt19937_64& rng) {
  reduce.init(rng);
  project.init(rng);
}

// ---------------------------------------------------------------------------

FeatureExtractor::FeatureExtractor(ExtractorKind kind, int channels, DType dtype)
    : out(ConvSpec::same(channels, channels, 3), dtype), kind_(kind) {
  switch (kind) {
    case ExtractorKind::Single:
      stream_count_ = 1;
      streams[0] = Conv2d(ConvSpec::same(channels, channels, 3), dtype);
      break;
    case ExtractorKind::MultiStream:
      stream_count_ = 3;
      streams[0] = Conv2d(ConvSpec::same(channels, channels, 1), dtype);
      streams[1] = Conv2d(ConvSpec::same(channels, channels, 3), dtype);
      streams[2] = Conv2d(ConvSpec::same(channels, channels, 3, 2), dtype);
      break;
    case ExtractorKind::Parallel:
      stream_count_ = 3;
      for (auto& s : streams) s = Conv2d(ConvSpec::same(channels, channels, 3), dtype);
      break;
  }
  if (stream_count_ > 1) fuse = Conv2d(ConvSpec::same(3 * channels, channels, 1), dtype);
}

Tensor FeatureExtractor::stream(int index, const Tensor& x) const {
  if (index < 0 || index >= stream_count_) throw std::out_of_range("feature stream index");
  return streams[index].forward(x);
}

Tensor FeatureExtractor::forward(const Tensor& x) const {
  Tensor local;
  if (stream_count_ == 1) {
    local = relu(streams[0].forward(x));
  } else {
    const Tensor parts[3] = {streams[0].forward(x), streams[1].forward(x), streams[2].forward(x)};
    local = relu(fuse.forward(concat(parts, 1)));
  }
  return out.forward(add(x, local));
}

void FeatureExtractor::visit(const std::string& prefix, const ParamVisitor& fn) {
  static constexpr const char* kSingle[] = {"conv"};
  static constexpr const char* kMulti[] = {"stream1x1", "stream3x3", "stream5x5"};
  static constexpr const char* kParallel[] = {"stream_a", "stream_b", "stream_c"};
  const char* const* names = kind_ == ExtractorKind::Single        ? kSingle
                             : kind_ == ExtractorKind::MultiStream ? kMulti
                                                                   : kParallel;
  for (int i = 0; i < stream_count_; ++i) streams[i].visit(join_name(prefix, names[i]), fn);
  if (stream_count_ > 1) fuse.visit(join_name(prefix, "fuse"), fn);
  out.visit(join_name(prefix, "out"), fn);
}

void FeatureExtractor::init(std::mt19937_64& rng) {
  for (int i = 0; i < stream_count_; ++i) streams[i].init(rng);
  if (stream_count_ > 1) fuse.init(rng);
  out.init(rng);
}

// ---------------------------------------------------------------------------

namespace {

ExtractorKind extractor_for(BlockKind kind) {
  switch (kind) {
    case BlockKind::FAB: return ExtractorKind::Single;
    case BlockKind::ParallelFE: return ExtractorKind::Parallel;
    case BlockKind::MSFE_SA:
    case BlockKind::MSFAB: return ExtractorKind::MultiStream;
    case BlockKind::RB: break;
  }
  throw std::invalid_argument("RB has no attention extractor");
}

}  // namespace

AttentionBlock::AttentionBlock(const BlockConfig& cfg, DType dtype)
    : fe((cfg.validate(), extractor_for(cfg.kind)), cfg.channels, dtype),
      ca(cfg.channels, cfg.ca_reduction, dtype),
      sa(cfg.channels, cfg.sa_reduction, cfg.kind == BlockKind::MSFAB, dtype) {}

Tensor AttentionBlock::forward(const Tensor& x) const {
  return add(x, sa.forward(ca.forward(fe.forward(x))));
}

void AttentionBlock::visit(const std::string& prefix, const ParamVisitor& fn) {
  fe.visit(join_name(prefix, "fe"), fn);
  ca.visit(join_name(prefix, "ca"), fn);
  sa.visit(join_name(prefix, "sa"), fn);
}

void AttentionBlock::init(std::mt19937_64& rng) {
  fe.init(rng);
  ca.init(rng);
  sa.init(rng);
}

std::unique_ptr<Block> make_block(const BlockConfig& cfg, DType dtype) {
  cfg.validate();
  if (cfg.kind == BlockKind::RB) return std::make_unique<ResidualBlock>(cfg.channels, dtype);
  return std::make_unique<AttentionBlock>(cfg, dtype);
}

std::int64_t block_param_count(const BlockConfig& cfg) {
  cfg.validate();
  const std::int64_t c = cfg.channels;
  auto conv = [](std::int64_t in, std::int64_t out, std::int64_t k) { return in * out * k * k + out; };
  if (cfg.kind == BlockKind::RB) return 2 * conv(c, c, 3);
  std::int64_t fe = conv(c, c, 3);  // final 3x3
  switch (cfg.kind) {
    case BlockKind::FAB: fe += conv(c, c, 3); break;
    case BlockKind::ParallelFE: fe += 3 * conv(c, c, 3) + conv(3 * c, c, 1); break;
    default: fe += conv(c, c, 1) + 2 * conv(c, c, 3) + conv(3 * c, c, 1); break;
  }
  const std::int64_t r = c / cfg.ca_reduction;
  const std::int64_t ca = conv(c, r, 1) + conv(r, c, 1);
  const std::int64_t m = c / cfg.sa_reduction;
  const std::int64_t k = cfg.kind == BlockKind::MSFAB ? 3 : 1;
  const std::int64_t sa = conv(c, m, k) + conv(m, 1, k);
  return fe + ca + sa;
}

}  // namespace mrfn
