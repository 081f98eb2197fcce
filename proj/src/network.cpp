#include "mrfn/network.hpp"

#include <stdexcept>

namespace mrfn {

std::string_view attention_kind_name(AttentionKind kind) {
  switch (kind) {
    case AttentionKind::None: return "none";
    case AttentionKind::NLB: return "nlb";
    case AttentionKind::CNLB: return "cnlb";
  }
  return "?";
}

AttentionKind parse_attention_kind(std::string_view name) {
  if (name == "none") return AttentionKind::None;
  if (name == "nlb") return AttentionKind::NLB;
  if (name == "cnlb") return AttentionKind::CNLB;
  throw std::invalid_argument("unknown attention '" + std::string(name) +
                              "' (expected none, nlb or cnlb)");
}

std::string_view recursion_name(Recursion r) {
  return r == Recursion::Shared ? "shared" : "independent";
}

Recursion parse_recursion(std::string_view name) {
  if (name == "shared") return Recursion::Shared;
  if (name == "independent") return Recursion::Independent;
  throw std::invalid_argument("unknown recursion '" + std::string(name) +
                              "' (expected shared or independent)");
}

NetworkConfig NetworkConfig::preset(std::string_view name) {
  NetworkConfig cfg;
  if (name == "B") return cfg;
  if (name == "L") {
    cfg.depths = {2, 4, 8, 4, 2};
    return cfg;
  }
  if (name == "tiny") {
    cfg.channels = 8;
    cfg.depths = {1, 1, 2, 1, 1};
    return cfg;
  }
  if (name == "base") {
    cfg.bottleneck_kind = BlockKind::FAB;
    cfg.attention = AttentionKind::None;
    return cfg;
  }
  throw std::invalid_argument("unknown preset '" + std::string(name) +
                              "' (expected B, L, tiny or base)");
}

int NetworkConfig::level_channels(int level) const {
  static constexpr int kScale[5] = {1, 2, 4, 2, 1};
  if (level < 0 || level > 4) throw std::out_of_range("network level " + std::to_string(level));
  return channels * kScale[level];
}

BlockKind NetworkConfig::level_kind(int level) const {
  if (level < 0 || level > 4) throw std::out_of_range("network level " + std::to_string(level));
  if (level < 2) return encoder_kind;
  if (level == 2) return bottleneck_kind;
  return decoder_kind;
}

void NetworkConfig::validate() const {
  if (channels <= 0) throw ShapeError("base channels must be positive");
  for (int i = 0; i < 5; ++i) {
    if (depths[i] <= 0) {
      throw ShapeError("stage depth " + std::to_string(i + 1) + " must be positive, got " +
                       std::to_string(depths[i]));
    }
    BlockConfig{level_kind(i), level_channels(i), ca_reduction, 2}.validate();
  }
  if (embed_channels < 0) throw ShapeError("embed channels must be non-negative");
}

// ---------------------------------------------------------------------------

Stage::Stage(const BlockConfig& block, int depth, Recursion recursion, DType dtype)
    : depth_(depth) {
  if (depth <= 0) throw ShapeError("stage depth must be positive");
  const int count = recursion == Recursion::Shared ? 1 : depth;
  for (int i = 0; i < count; ++i) blocks_.push_back(make_block(block, dtype));
}

Tensor Stage::forward(const Tensor& x, std::vector<Tensor>* outputs) const {
  Tensor y = x;
  for (int i = 0; i < depth_; ++i) {
    const Block& b = blocks_.size() == 1 ? *blocks_.front() : *blocks_[i];
    y = b.forward(y);
    if (outputs != nullptr) outputs->push_back(y);
  }
  return y;
}

void Stage::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i]->visit(join_name(prefix, "block" + std::to_string(i)), fn);
  }
}

void Stage::init(std::mt19937_64& rng) {
  for (auto& b : blocks_) b->init(rng);
}

// ---------------------------------------------------------------------------

ConvSpec down_sample_spec(int in_ch, int out_ch) {
  return ConvSpec::strided(in_ch, out_ch, 4, 2, 1);
}

ConvSpec up_sample_spec(int in_ch, int out_ch) {
  return ConvSpec::strided(in_ch, out_ch, 4, 2, 1);
}

namespace {

NetworkConfig checked(const NetworkConfig& cfg) {
  cfg.validate();
  return cfg;
}

Stage make_stage(const NetworkConfig& cfg, int level) {
  const BlockConfig block{cfg.level_kind(level), cfg.level_channels(level), cfg.ca_reduction, 2};
  return Stage(block, cfg.depths[level], cfg.recursion, cfg.dtype);
}

}  // namespace

Model::Model(const NetworkConfig& cfg) : cfg_(checked(cfg)) {
  const DType dt = cfg_.dtype;
  const int c1 = cfg_.level_channels(0), c2 = cfg_.level_channels(1), c3 = cfg_.level_channels(2);
  head = Conv2d(ConvSpec::same(3, c1, 3), dt);
  level1 = make_stage(cfg_, 0);
  down1 = Conv2d(down_sample_spec(c1, c2), dt);
  level2 = make_stage(cfg_, 1);
  down2 = Conv2d(down_sample_spec(c2, c3), dt);
  level3 = make_stage(cfg_, 2);
  if (cfg_.attention == AttentionKind::CNLB) fuse = FusePreceding(c3, cfg_.fusion_sources(), dt);
  if (cfg_.attention != AttentionKind::None) attention = NonLocalAttention(c3, cfg_.embed(), dt);
  up1 = ConvTranspose2d(up_sample_spec(c3, c2), dt);
  level4 = make_stage(cfg_, 3);
  up2 = ConvTranspose2d(up_sample_spec(c2, c1), dt);
  level5 = make_stage(cfg_, 4);
  tail = Conv2d(ConvSpec::same(c1, 3, 3), dt);
}

Tensor Model::forward(const Tensor& x, ForwardTrace* trace) const {
  if (x.rank() != 4 || x.dim(1) != 3) {
    throw ShapeError("model input must be [N,3,H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(0) == 0) throw ShapeError("model input batch is empty");
  const auto h = x.dim(2), w = x.dim(3);
  if (h < kSpatialMultiple || w < kSpatialMultiple) {
    throw ShapeError("model input must be at least 16x16, got " + shape_str(x.shape()));
  }
  if (x.dtype() != cfg_.dtype) throw ShapeError("model input dtype differs from model dtype");
  const int pad_h = static_cast<int>((kSpatialMultiple - h % kSpatialMultiple) % kSpatialMultiple);
  const int pad_w = static_cast<int>((kSpatialMultiple - w % kSpatialMultiple) % kSpatialMultiple);
  const Tensor xp = (pad_h || pad_w) ? pad_reflect(x, pad_h, pad_w) : x;

  const Tensor e1 = level1.forward(head.forward(xp));
  const Tensor e2 = level2.forward(down1.forward(e1));
  std::vector<Tensor> level3_outputs;
  Tensor b = level3.forward(down2.forward(e2),
                            cfg_.attention == AttentionKind::CNLB ? &level3_outputs : nullptr);
  if (trace != nullptr) trace->bottleneck = b;
  AttentionTrace* at = trace != nullptr ? &trace->attention : nullptr;
  switch (cfg_.attention) {
    case AttentionKind::None: break;
    case AttentionKind::NLB:
      b = attention.forward(b, b, SamplerSpec{SamplerKind::None, {}, {}}, at);
      break;
    case AttentionKind::CNLB:
      b = attention.forward(b, fuse.forward(level3_outputs), cfg_.sampler, at);
      break;
  }
  const Tensor d4 = level4.forward(add(up1.forward(b), e2));
  const Tensor d5 = level5.forward(add(up2.forward(d4), e1));
  Tensor out = tail.forward(d5);
  if (cfg_.global_residual) out = add(out, xp);
  return (pad_h || pad_w) ? crop(out, h, w) : out;
}

Tensor Model::infer(const Tensor& x) const {
  NoGradGuard guard;
  return clamp(forward(x), 0.0, 1.0);
}

void Model::visit(const std::string& prefix, const ParamVisitor& fn) {
  head.visit(join_name(prefix, "head"), fn);
  level1.visit(join_name(prefix, "level1"), fn);
  down1.visit(join_name(prefix, "down1"), fn);
  level2.visit(join_name(prefix, "level2"), fn);
  down2.visit(join_name(prefix, "down2"), fn);
  level3.visit(join_name(prefix, "level3"), fn);
  if (cfg_.attention == AttentionKind::CNLB) fuse.visit(join_name(prefix, "fuse"), fn);
  if (cfg_.attention != AttentionKind::None) attention.visit(join_name(prefix, "attention"), fn);
  up1.visit(join_name(prefix, "up1"), fn);
  level4.visit(join_name(prefix, "level4"), fn);
  up2.visit(join_name(prefix, "up2"), fn);
  level5.visit(join_name(prefix, "level5"), fn);
  tail.visit(join_name(prefix, "tail"), fn);
}

void Model::init(std::mt19937_64& rng) {
  head.init(rng);
  level1.init(rng);
  down1.init(rng);
  level2.init(rng);
  down2.init(rng);
  level3.init(rng);
  if (cfg_.attention == AttentionKind::CNLB) fuse.init(rng);
  if (cfg_.attention != AttentionKind::None) attention.init(rng);
  up1.init(rng);
  level4.init(rng);
  up2.init(rng);
  level5.init(rng);
  tail.init(rng);
}

std::unique_ptr<Model> build_model(const NetworkConfig& cfg, std::uint64_t seed) {
  auto model = std::make_unique<Model>(cfg);
  std::mt19937_64 rng(seed);
  model->init(rng);
  return model;
}

}  // namespace mrfn
