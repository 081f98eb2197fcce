#include "mrfn/accounting.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mrfn {

std::string_view flop_convention_name(FlopConvention c) {
  return c == FlopConvention::Macs ? "macs" : "2xmacs";
}

FlopConvention parse_flop_convention(std::string_view name) {
  if (name == "macs") return FlopConvention::Macs;
  if (name == "2xmacs") return FlopConvention::TwoMacs;
  throw std::invalid_argument("unknown FLOP convention '" + std::string(name) +
                              "' (expected macs or 2xmacs)");
}

namespace {

std::int64_t padded(std::int64_t v) {
  if (v < kSpatialMultiple) {
    throw std::invalid_argument("spatial size must be at least 16, got " + std::to_string(v));
  }
  return (v + kSpatialMultiple - 1) / kSpatialMultiple * kSpatialMultiple;
}

LayerCost conv_cost(const std::string& name, const ConvSpec& s, std::int64_t out_hw) {
  return {name, "conv", s.param_count(), s.weight_count() * out_hw, 1};
}

/// Layers of one application of a block at `hw` spatial positions.
std::vector<LayerCost> block_layers(const BlockConfig& b, std::int64_t hw, const std::string& p) {
  const int c = b.channels;
  std::vector<LayerCost> out;
  if (b.kind == BlockKind::RB) {
    out.push_back(conv_cost(p + ".conv1", ConvSpec::same(c, c, 3), hw));
    out.push_back(conv_cost(p + ".conv2", ConvSpec::same(c, c, 3), hw));
    return out;
  }
  switch (b.kind) {
    case BlockKind::FAB:
      out.push_back(conv_cost(p + ".fe.conv", ConvSpec::same(c, c, 3), hw));
      break;
    case BlockKind::ParallelFE:
      out.push_back(conv_cost(p + ".fe.stream_a", ConvSpec::same(c, c, 3), hw));
      out.push_back(conv_cost(p + ".fe.stream_b", ConvSpec::same(c, c, 3), hw));
      out.push_back(conv_cost(p + ".fe.stream_c", ConvSpec::same(c, c, 3), hw));
      out.push_back(conv_cost(p + ".fe.fuse", ConvSpec::same(3 * c, c, 1), hw));
      break;
    default:
      out.push_back(conv_cost(p + ".fe.stream1x1", ConvSpec::same(c, c, 1), hw));
      out.push_back(conv_cost(p + ".fe.stream3x3", ConvSpec::same(c, c, 3), hw));
      out.push_back(conv_cost(p + ".fe.stream5x5", ConvSpec::same(c, c, 3, 2), hw));
      out.push_back(conv_cost(p + ".fe.fuse", ConvSpec::same(3 * c, c, 1), hw));
      break;
  }
  out.push_back(conv_cost(p + ".fe.out", ConvSpec::same(c, c, 3), hw));
  const int r = c / b.ca_reduction;
  out.push_back(conv_cost(p + ".ca.squeeze", ConvSpec::same(c, r, 1), 1));
  out.push_back(conv_cost(p + ".ca.excite", ConvSpec::same(r, c, 1), 1));
  const bool dil = b.kind == BlockKind::MSFAB;
  const int m = c / b.sa_reduction;
  out.push_back(conv_cost(p + ".sa.reduce", dil ? ConvSpec::same(c, m, 3, 2) : ConvSpec::same(c, m, 1), hw));
  out.push_back(conv_cost(p + ".sa.project", dil ? ConvSpec::same(m, 1, 3, 2) : ConvSpec::same(m, 1, 1), hw));
  return out;
}

void append_stage(std::vector<LayerCost>& rows, const NetworkConfig& cfg, int level, std::int64_t hw) {
  const BlockConfig b{cfg.level_kind(level), cfg.level_channels(level), cfg.ca_reduction, 2};
  const int depth = cfg.depths[level];
  const std::string prefix = "level" + std::to_string(level + 1);
  if (cfg.recursion == Recursion::Shared) {
    for (auto layer : block_layers(b, hw, prefix + ".block0")) {
      layer.macs *= depth;
      layer.applications = depth;
      rows.push_back(layer);
    }
  } else {
    for (int i = 0; i < depth; ++i) {
      for (const auto& layer : block_layers(b, hw, prefix + ".block" + std::to_string(i))) {
        rows.push_back(layer);
      }
    }
  }
}

}  // namespace

std::vector<LayerCost> layer_plan(const NetworkConfig& cfg, std::int64_t h, std::int64_t w) {
  cfg.validate();
  const std::int64_t H = padded(h), W = padded(w);
  const std::int64_t hw1 = H * W, hw2 = hw1 / 4, hw3 = hw1 / 16;
  const int c1 = cfg.level_channels(0), c2 = cfg.level_channels(1), c3 = cfg.level_channels(2);
  std::vector<LayerCost> rows;
  rows.push_back(conv_cost("head", ConvSpec::same(3, c1, 3), hw1));
  append_stage(rows, cfg, 0, hw1);
  rows.push_back(conv_cost("down1", down_sample_spec(c1, c2), hw2));
  append_stage(rows, cfg, 1, hw2);
  rows.push_back(conv_cost("down2", down_sample_spec(c2, c3), hw3));
  append_stage(rows, cfg, 2, hw3);
  if (cfg.attention == AttentionKind::CNLB) {
    rows.push_back(conv_cost("fuse.reduce", ConvSpec::same(c3 * cfg.fusion_sources(), c3, 1), hw3));
  }
  if (cfg.attention != AttentionKind::None) {
    const int e = cfg.embed();
    rows.push_back(conv_cost("attention.query", ConvSpec::same(c3, e, 1), hw3));
    rows.push_back(conv_cost("attention.key", ConvSpec::same(c3, e, 1), hw3));
    rows.push_back(conv_cost("attention.value", ConvSpec::same(c3, e, 1), hw3));
    const SamplerSpec sampler = cfg.attention == AttentionKind::CNLB
                                    ? cfg.sampler
                                    : SamplerSpec{SamplerKind::None, {}, {}};
    const AttentionDims d = attention_dims(e, H / 4, W / 4, sampler);
    rows.push_back({"attention.qk", "matmul", 0, d.queries * d.keys * d.embed, 1});
    rows.push_back({"attention.av", "matmul", 0, d.queries * d.keys * d.embed, 1});
    rows.push_back(conv_cost("attention.out", ConvSpec::same(e, c3, 1), hw3));
  }
  const ConvSpec u1 = up_sample_spec(c3, c2), u2 = up_sample_spec(c2, c1);
  rows.push_back({"up1", "convT", u1.param_count(), u1.weight_count() * hw3, 1});
  append_stage(rows, cfg, 3, hw2);
  rows.push_back({"up2", "convT", u2.param_count(), u2.weight_count() * hw2, 1});
  append_stage(rows, cfg, 4, hw1);
  rows.push_back(conv_cost("tail", ConvSpec::same(c1, 3, 3), hw1));
  return rows;
}

std::int64_t count_params(const NetworkConfig& cfg) {
  std::int64_t n = 0;
  for (const auto& r : layer_plan(cfg, kSpatialMultiple, kSpatialMultiple)) n += r.params;
  return n;
}

std::int64_t count_flops(const NetworkConfig& cfg, std::int64_t h, std::int64_t w,
                         FlopConvention convention) {
  std::int64_t macs = 0;
  for (const auto& r : layer_plan(cfg, h, w)) macs += r.macs;
  return convention == FlopConvention::Macs ? macs : 2 * macs;
}

std::int64_t attention_macs(const NetworkConfig& cfg, std::int64_t h, std::int64_t w) {
  std::int64_t macs = 0;
  for (const auto& r : layer_plan(cfg, h, w)) {
    if (r.kind == "matmul") macs += r.macs;
  }
  return macs;
}

// ---------------------------------------------------------------------------

namespace {

class Schedule {
 public:
  int add(const std::string& name, std::int64_t elems, std::vector<int> inputs = {}) {
    ops_.push_back({name, elems, std::move(inputs)});
    return static_cast<int>(ops_.size()) - 1;
  }

  ActivationEstimate estimate() const {
    const int n = static_cast<int>(ops_.size());
    std::vector<int> last_use(n);
    for (int i = 0; i < n; ++i) last_use[i] = i;
    for (int i = 0; i < n; ++i) {
      for (int in : ops_[i].inputs) last_use[in] = std::max(last_use[in], i);
    }
    last_use[n - 1] = n - 1;
    ActivationEstimate est;
    for (int i = 0; i < n; ++i) {
      std::int64_t live = 0;
      for (int t = 0; t <= i; ++t) {
        if (last_use[t] >= i) live += ops_[t].elems;
      }
      if (live > est.peak_elements) {
        est.peak_elements = live;
        est.peak_at = ops_[i].name;
      }
      if (ops_[i].elems > est.largest_tensor) {
        est.largest_tensor = ops_[i].elems;
        est.largest_tensor_name = ops_[i].name;
      }
    }
    return est;
  }

 private:
  struct Op {
    std::string name;
    std::int64_t elems;
    std::vector<int> inputs;
  };
  std::vector<Op> ops_;
};

int schedule_block(Schedule& g, const BlockConfig& b, int x, std::int64_t hw, const std::string& p) {
  const std::int64_t c = b.channels;
  const std::int64_t full = c * hw;
  if (b.kind == BlockKind::RB) {
    const int a = g.add(p + ".conv1", full, {x});
    const int r = g.add(p + ".relu", full, {a});
    const int v = g.add(p + ".conv2", full, {r});
    return g.add(p + ".add", full, {x, v});
  }
  int local;
  if (b.kind == BlockKind::FAB) {
    const int s = g.add(p + ".fe.conv", full, {x});
    local = g.add(p + ".fe.relu", full, {s});
  } else {
    const int s1 = g.add(p + ".fe.stream0", full, {x});
    const int s2 = g.add(p + ".fe.stream1", full, {x});
    const int s3 = g.add(p + ".fe.stream2", full, {x});
    const int cat = g.add(p + ".fe.concat", 3 * full, {s1, s2, s3});
    const int f = g.add(p + ".fe.fuse", full, {cat});
    local = g.add(p + ".fe.relu", full, {f});
  }
  const int u = g.add(p + ".fe.add", full, {x, local});
  const int y = g.add(p + ".fe.out", full, {u});
  const std::int64_t r = c / b.ca_reduction;
  const int gap = g.add(p + ".ca.gap", c, {y});
  const int sq = g.add(p + ".ca.squeeze", r, {gap});
  const int rq = g.add(p + ".ca.relu", r, {sq});
  const int ex = g.add(p + ".ca.excite", c, {rq});
  const int cw = g.add(p + ".ca.sigmoid", c, {ex});
  const int z = g.add(p + ".ca.mul", full, {y, cw});
  const std::int64_t m = c / b.sa_reduction;
  const int red = g.add(p + ".sa.reduce", m * hw, {z});
  const int rr = g.add(p + ".sa.relu", m * hw, {red});
  const int pr = g.add(p + ".sa.project", hw, {rr});
  const int sm = g.add(p + ".sa.sigmoid", hw, {pr});
  const int z2 = g.add(p + ".sa.mul", full, {z, sm});
  return g.add(p + ".add", full, {x, z2});
}

int schedule_stage(Schedule& g, const NetworkConfig& cfg, int level, int x, std::int64_t hw,
                   std::vector<int>* outputs = nullptr) {
  const BlockConfig b{cfg.level_kind(level), cfg.level_channels(level), cfg.ca_reduction, 2};
  for (int i = 0; i < cfg.depths[level]; ++i) {
    x = schedule_block(g, b, x, hw, "level" + std::to_string(level + 1) + ".app" + std::to_string(i));
    if (outputs != nullptr) outputs->push_back(x);
  }
  return x;
}

int schedule_tokens(Schedule& g, const SamplerSpec& s, int e, std::int64_t embed, std::int64_t h,
                    std::int64_t w, const std::string& p) {
  if (s.kind == SamplerKind::None) return g.add(p + ".tokens", embed * h * w, {e});
  std::vector<int> parts;
  if (s.kind == SamplerKind::SPDS) {
    for (int f : s.spds_factors) {
      const std::int64_t n = embed * (h / f) * (w / f);
      const int pool = f == 1 ? e : g.add(p + ".pool" + std::to_string(f), n, {e});
      parts.push_back(g.add(p + ".tokens" + std::to_string(f), n, {pool}));
    }
  } else {
    for (int sz : s.spp_sizes) {
      const std::int64_t n = embed * sz * sz;
      const int pool = g.add(p + ".pool" + std::to_string(sz), n, {e});
      parts.push_back(g.add(p + ".tokens" + std::to_string(sz), n, {pool}));
    }
  }
  if (parts.size() == 1) return parts.front();
  return g.add(p + ".concat", embed * s.token_count(h, w), parts);
}

}  // namespace

ActivationEstimate peak_activation_estimate(const NetworkConfig& cfg, std::int64_t h, std::int64_t w) {
  cfg.validate();
  const std::int64_t H = padded(h), W = padded(w);
  const std::int64_t hw1 = H * W, hw2 = hw1 / 4, hw3 = hw1 / 16;
  const int c1 = cfg.level_channels(0), c2 = cfg.level_channels(1), c3 = cfg.level_channels(2);
  Schedule g;
  const int x = g.add("input", 3 * hw1);
  const int e1 = schedule_stage(g, cfg, 0, g.add("head", c1 * hw1, {x}), hw1);
  const int e2 = schedule_stage(g, cfg, 1, g.add("down1", c2 * hw2, {e1}), hw2);
  std::vector<int> l3;
  int b = schedule_stage(g, cfg, 2, g.add("down2", c3 * hw3, {e2}), hw3, &l3);
  std::int64_t attn_map = 0;
  if (cfg.attention != AttentionKind::None) {
    const std::int64_t e = cfg.embed(), hh = H / 4, ww = W / 4;
    SamplerSpec sampler{SamplerKind::None, {}, {}};
    int src = b;
    if (cfg.attention == AttentionKind::CNLB) {
      sampler = cfg.sampler;
      const int cat = g.add("fuse.concat", c3 * hw3 * static_cast<std::int64_t>(l3.size()), l3);
      src = g.add("fuse.reduce", c3 * hw3, {cat});
    }
    const AttentionDims d = attention_dims(e, hh, ww, sampler);
    const int q = g.add("attention.query", e * hw3, {b});
    const int qt = g.add("attention.query.tokens", e * hw3, {q});
    const int k = g.add("attention.key", e * hw3, {src});
    const int kt = schedule_tokens(g, sampler, k, e, hh, ww, "attention.key");
    const int kp = g.add("attention.key.permute", e * d.keys, {kt});
    const int v = g.add("attention.value", e * hw3, {src});
    const int vt = schedule_tokens(g, sampler, v, e, hh, ww, "attention.value");
    attn_map = d.queries * d.keys;
    const int sim = g.add("attention.similarity", attn_map, {qt, kp});
    const int sm = g.add("attention.softmax", attn_map, {sim});
    const int av = g.add("attention.weighted", e * hw3, {sm, vt});
    const int back = g.add("attention.from_tokens", e * hw3, {av});
    const int o = g.add("attention.out", c3 * hw3, {back});
    b = g.add("attention.add", c3 * hw3, {o, b});
  }
  const int u1 = g.add("up1", c2 * hw2, {b});
  const int s1 = g.add("skip2", c2 * hw2, {u1, e2});
  const int d4 = schedule_stage(g, cfg, 3, s1, hw2);
  const int u2 = g.add("up2", c1 * hw1, {d4});
  const int s2 = g.add("skip1", c1 * hw1, {u2, e1});
  const int d5 = schedule_stage(g, cfg, 4, s2, hw1);
  int out = g.add("tail", 3 * hw1, {d5});
  if (cfg.global_residual) out = g.add("global_residual", 3 * hw1, {out, x});
  ActivationEstimate est = g.estimate();
  est.attention_map_elements = attn_map;
  return est;
}

// ---------------------------------------------------------------------------

CostReport make_cost_report(const NetworkConfig& cfg, std::int64_t h, std::int64_t w,
                            FlopConvention convention, const std::string& name) {
  CostReport r;
  r.config_name = name;
  r.height = h;
  r.width = w;
  r.convention = convention;
  r.rows = layer_plan(cfg, h, w);
  for (const auto& row : r.rows) {
    r.param_count += row.params;
    r.flops += convention == FlopConvention::Macs ? row.macs : 2 * row.macs;
  }
  r.activations = peak_activation_estimate(cfg, h, w);
  return r;
}

std::string CostReport::to_table() const {
  std::ostringstream os;
  const std::int64_t mult = convention == FlopConvention::Macs ? 1 : 2;
  char line[256];
  std::snprintf(line, sizeof line, "%-34s %-7s %5s %12s %16s\n", "layer", "kind", "apps", "params",
                "flops");
  os << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-34s %-7s %5d %12lld %16lld\n", r.name.c_str(), r.kind.c_str(),
                  r.applications, static_cast<long long>(r.params),
                  static_cast<long long>(r.macs * mult));
    os << line;
  }
  std::snprintf(line, sizeof line, "%-34s %-7s %5s %12lld %16lld\n", "total", "", "",
                static_cast<long long>(param_count), static_cast<long long>(flops));
  os << line;
  std::snprintf(line, sizeof line,
                "input %lldx%lld  flops %.3fG (%s)  params %.3fM  peak activations %lld elements at %s\n",
                static_cast<long long>(height), static_cast<long long>(width), flops / 1e9,
                std::string(flop_convention_name(convention)).c_str(), param_count / 1e6,
                static_cast<long long>(activations.peak_elements), activations.peak_at.c_str());
  os << line;
  return os.str();
}

std::string CostReport::to_jsonl() const {
  using nlohmann::json;
  const std::int64_t mult = convention == FlopConvention::Macs ? 1 : 2;
  std::string out;
  for (const auto& r : rows) {
    json j{{"record", "layer"},     {"config", config_name}, {"layer", r.name},
           {"kind", r.kind},        {"applications", r.applications},
           {"params", r.params},    {"flops", r.macs * mult}};
    out += j.dump() + "\n";
  }
  json t{{"record", "total"},
         {"config", config_name},
         {"height", height},
         {"width", width},
         {"convention", std::string(flop_convention_name(convention))},
         {"params", param_count},
         {"flops", flops},
         {"peak_activation_elements", activations.peak_elements},
         {"peak_at", activations.peak_at},
         {"attention_map_elements", activations.attention_map_elements}};
  out += t.dump() + "\n";
  return out;
}

}  // namespace mrfn
