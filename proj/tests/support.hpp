#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mrfn/network.hpp"
#include "mrfn/nonlocal.hpp"
#include "mrfn/ops.hpp"

namespace support {

using namespace mrfn;

inline Tensor randn64(const Shape& s, std::mt19937_64& rng, double sd = 1.0) {
  return Tensor::randn(s, rng, sd, DType::F64);
}

inline Tensor leaf64(const Shape& s, std::mt19937_64& rng, double sd = 1.0) {
  Tensor t = randn64(s, rng, sd);
  t.set_requires_grad(true);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  const auto x = a.to_vector(), y = b.to_vector();
  if (x.size() != y.size()) return std::numeric_limits<double>::infinity();
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x[i] - y[i]));
  return m;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.to_vector() == b.to_vector();
}

struct GradCheck {
  double max_rel = 0.0;  // worst norm-wise relative error over the checked tensors
  int coords = 0;
};

/// Compares reverse-mode gradients of L = sum(f() * R), R a fixed random
/// projection, with central differences on the float64 entries of `wrt`.
/// `per_tensor` > 0 checks that many random coordinates of each tensor.
inline GradCheck gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                           std::mt19937_64& rng, int per_tensor = -1, double eps = 1e-6) {
  for (auto& t : wrt) t.zero_grad();
  const Tensor out = f();
  const Tensor r = Tensor::randn(out.shape(), rng, 1.0, out.dtype());
  backward(sum(mul(out, r)));

  auto objective = [&] {
    NoGradGuard guard;
    const auto y = f().to_vector();
    const auto w = r.to_vector();
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
  };

  GradCheck result;
  for (auto& t : wrt) {
    const std::vector<double> analytic =
        t.has_grad() ? t.grad().to_vector() : std::vector<double>(t.numel(), 0.0);
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (per_tensor > 0 && static_cast<std::size_t>(per_tensor) < idx.size()) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(per_tensor);
    }
    auto data = t.data<double>();
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : idx) {
      const double v = data[i];
      data[i] = v + eps;
      const double up = objective();
      data[i] = v - eps;
      const double down = objective();
      data[i] = v;
      const double numeric = (up - down) / (2 * eps);
      diff2 += (numeric - analytic[i]) * (numeric - analytic[i]);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
      ++result.coords;
    }
    // Identically-zero gradients (e.g. a key bias under softmax) are compared absolutely.
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    const double err = denom < 1e-7 ? std::sqrt(diff2) : std::sqrt(diff2) / denom;
    result.max_rel = std::max(result.max_rel, err);
  }
  return result;
}

struct NamedCheck {
  std::string name;
  GradCheck result;
};

inline std::vector<Tensor> with_input(Module& m, const Tensor& x) {
  auto v = m.parameters();
  v.push_back(x);
  return v;
}

/// Gradient checks of every differentiable op on small float64 inputs.
inline std::vector<NamedCheck> op_gradchecks(std::mt19937_64& rng) {
  std::vector<NamedCheck> out;
  auto check = [&](const char* name, const std::function<Tensor()>& f, std::vector<Tensor> wrt) {
    out.push_back({name, gradcheck(f, std::move(wrt), rng)});
  };
  Tensor a = leaf64({2, 3, 4, 5}, rng), b = leaf64({2, 3, 4, 5}, rng);
  Tensor ch = leaf64({2, 3, 1, 1}, rng), sp = leaf64({2, 1, 4, 5}, rng);
  Tensor pos = Tensor::uniform({2, 3, 4, 5}, rng, 0.5, 2.0, DType::F64);
  pos.set_requires_grad(true);
  check("add", [&] { return add(a, b); }, {a, b});
  check("add broadcast", [&] { return add(a, ch); }, {a, ch});
  check("sub", [&] { return sub(a, b); }, {a, b});
  check("mul", [&] { return mul(a, b); }, {a, b});
  check("mul channel broadcast", [&] { return mul(a, ch); }, {a, ch});
  check("mul spatial broadcast", [&] { return mul(a, sp); }, {a, sp});
  check("div", [&] { return div(a, pos); }, {a, pos});
  check("relu", [&] { return relu(a); }, {a});
  check("sigmoid", [&] { return sigmoid(a); }, {a});
  check("scale", [&] { return scale(a, -0.7); }, {a});
  check("add_scalar", [&] { return add_scalar(a, 0.3); }, {a});
  check("clamp", [&] { return clamp(a, -0.5, 0.5); }, {a});
  check("sum", [&] { return sum(a); }, {a});
  check("mean", [&] { return mean(a); }, {a});
  check("l1_mean", [&] { return l1_mean(a, b); }, {a, b});
  Tensor labels = Tensor::uniform({2, 3, 4, 5}, rng, 0.0, 1.0, DType::F64);
  check("bce_with_logits", [&] { return bce_with_logits(a, labels); }, {a});
  check("softmax last", [&] { return softmax(a, -1); }, {a});
  check("softmax axis1", [&] { return softmax(a, 1); }, {a});
  check("reshape", [&] { return reshape(a, {6, 20}); }, {a});
  check("permute", [&] { return permute(a, {0, 2, 3, 1}); }, {a});
  const Tensor parts[2] = {a, b};
  check("concat", [&] { return concat(parts, 1); }, {a, b});
  check("stack_batch", [&] { return stack_batch(parts); }, {a, b});
  check("batch_item", [&] { return batch_item(a, 1); }, {a});
  check("pad_reflect", [&] { return pad_reflect(a, 3, 2); }, {a});
  check("crop", [&] { return crop(a, 3, 2); }, {a});
  Tensor even = leaf64({2, 3, 4, 6}, rng);
  check("maxpool2d", [&] { return maxpool2d(even, 2, 2); }, {even});
  check("adaptive_maxpool2d", [&] { return adaptive_maxpool2d(a, 3, 2); }, {a});
  check("global_avg_pool", [&] { return global_avg_pool(a); }, {a});

  Tensor m1 = leaf64({2, 4, 3}, rng), m2 = leaf64({2, 3, 5}, rng);
  check("matmul", [&] { return matmul(m1, m2); }, {m1, m2});

  for (const ConvSpec& s : {ConvSpec::same(3, 4, 3), ConvSpec::same(3, 2, 3, 2), ConvSpec::same(3, 5, 1),
                            ConvSpec::strided(3, 4, 4, 2, 1)}) {
    Tensor x = leaf64({2, 3, 8, 6}, rng);
    Tensor w = leaf64(s.weight_shape(), rng), bias = leaf64({s.out_ch}, rng);
    check("conv2d", [&] { return conv2d(x, s, w, bias); }, {x, w, bias});
  }
  const ConvSpec t = ConvSpec::strided(4, 3, 4, 2, 1);
  Tensor xt = leaf64({2, 4, 3, 5}, rng), wt = leaf64(t.transposed_weight_shape(), rng), bt = leaf64({3}, rng);
  check("conv_transpose2d", [&] { return conv_transpose2d(xt, t, wt, bt); }, {xt, wt, bt});
  return out;
}

/// Gradient checks of every block kind, channel attention, a shared-weight
/// stage and attention with fusion under each sampler (12 coordinates per tensor).
inline std::vector<NamedCheck> block_gradchecks(std::mt19937_64& rng) {
  std::vector<NamedCheck> out;
  for (BlockKind k : {BlockKind::RB, BlockKind::FAB, BlockKind::ParallelFE, BlockKind::MSFE_SA, BlockKind::MSFAB}) {
    auto b = make_block({k, 8, 4, 2}, DType::F64);
    b->init(rng);
    Tensor x = leaf64({2, 8, 6, 6}, rng);
    out.push_back({std::string(block_kind_name(k)), gradcheck([&] { return b->forward(x); }, with_input(*b, x), rng, 12)});
  }
  {
    ChannelAttention ca(8, 4, DType::F64);
    ca.init(rng);
    Tensor x = leaf64({2, 8, 5, 5}, rng);
    out.push_back({"channel attention", gradcheck([&] { return ca.forward(x); }, with_input(ca, x), rng, 12)});
  }
  {
    Stage st({BlockKind::MSFAB, 8, 4, 2}, 3, Recursion::Shared, DType::F64);
    st.init(rng);
    Tensor x = leaf64({1, 8, 6, 6}, rng);
    out.push_back({"shared stage", gradcheck([&] { return st.forward(x); }, with_input(st, x), rng, 12)});
  }
  for (SamplerKind sk : {SamplerKind::None, SamplerKind::SPP, SamplerKind::SPDS}) {
    NonLocalAttention att(8, 16, DType::F64);
    att.init(rng);
    FusePreceding fuse(8, 2, DType::F64);
    fuse.init(rng);
    Tensor x = leaf64({1, 8, 8, 8}, rng), s1 = leaf64({1, 8, 8, 8}, rng);
    SamplerSpec spec{sk, {1, 2, 4}, {2, 4}};
    auto f = [&] {
      const Tensor srcs[2] = {s1, x};
      return att.forward(x, fuse.forward(srcs), spec);
    };
    auto wrt = with_input(att, x);
    for (auto& p : fuse.parameters()) wrt.push_back(p);
    wrt.push_back(s1);
    out.push_back({"attention " + std::string(sampler_kind_name(sk)), gradcheck(f, wrt, rng, 12)});
  }
  return out;
}

/// Whole tiny network in float64 with the given attention, 4 coordinates per tensor.
inline GradCheck model_gradcheck(AttentionKind attention, std::mt19937_64& rng) {
  NetworkConfig cfg = NetworkConfig::preset("tiny");
  cfg.dtype = DType::F64;
  cfg.attention = attention;
  auto m = build_model(cfg, 5);
  Tensor x = Tensor::uniform({1, 3, 16, 16}, rng, 0.0, 1.0, DType::F64);
  x.set_requires_grad(true);
  return gradcheck([&] { return m->forward(x); }, with_input(*m, x), rng, 4);
}

// ---------------------------------------------------------------------------
// Explicit-loop attention oracle. Works on plain nested arrays so it shares no
// code with the tensor library: 1x1 convs, max-pool samplers, dot products,
// softmax and the residual output are all written out.

struct Map {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(int ci, int y, int x) { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
  double at(int ci, int y, int x) const { return v[(static_cast<std::size_t>(ci) * h + y) * w + x]; }
};

inline Map map_of(const Tensor& t) {
  Map m{static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3)), t.to_vector()};
  m.v.resize(static_cast<std::size_t>(m.c) * m.h * m.w);
  return m;
}

inline Map pointwise(const Map& x, const Conv2d& conv) {
  const auto wt = conv.weight.to_vector();
  const auto b = conv.bias.to_vector();
  const int oc = static_cast<int>(conv.weight.dim(0));
  Map y{oc, x.h, x.w, std::vector<double>(static_cast<std::size_t>(oc) * x.h * x.w)};
  for (int o = 0; o < oc; ++o) {
    for (int yy = 0; yy < x.h; ++yy) {
      for (int xx = 0; xx < x.w; ++xx) {
        double s = b[o];
        for (int i = 0; i < x.c; ++i) s += wt[static_cast<std::size_t>(o) * x.c + i] * x.at(i, yy, xx);
        y.at(o, yy, xx) = s;
      }
    }
  }
  return y;
}

using Tokens = std::vector<std::vector<double>>;  // token -> channel vector

inline std::vector<double> window_max(const Map& m, int y0, int y1, int x0, int x1) {
  std::vector<double> t(m.c, -std::numeric_limits<double>::infinity());
  for (int c = 0; c < m.c; ++c) {
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) t[c] = std::max(t[c], m.at(c, y, x));
    }
  }
  return t;
}

/// Key/value tokens. Softmax attention is invariant to the order of the
/// (key, value) pairs, so the oracle is free to use its own ordering.
inline Tokens sample(const Map& m, const SamplerSpec& s) {
  Tokens out;
  switch (s.kind) {
    case SamplerKind::None:
      for (int y = 0; y < m.h; ++y) {
        for (int x = 0; x < m.w; ++x) out.push_back(window_max(m, y, y + 1, x, x + 1));
      }
      break;
    case SamplerKind::SPDS:
      for (int f : s.spds_factors) {
        for (int y = 0; y < m.h / f; ++y) {
          for (int x = 0; x < m.w / f; ++x) out.push_back(window_max(m, y * f, y * f + f, x * f, x * f + f));
        }
      }
      break;
    case SamplerKind::SPP:
      for (int g : s.spp_sizes) {
        for (int i = 0; i < g; ++i) {
          const int y0 = static_cast<int>(std::floor(static_cast<double>(i) * m.h / g));
          const int y1 = static_cast<int>(std::ceil(static_cast<double>(i + 1) * m.h / g));
          for (int j = 0; j < g; ++j) {
            const int x0 = static_cast<int>(std::floor(static_cast<double>(j) * m.w / g));
            const int x1 = static_cast<int>(std::ceil(static_cast<double>(j + 1) * m.w / g));
            out.push_back(window_max(m, y0, y1, x0, x1));
          }
        }
      }
      break;
  }
  return out;
}

/// out(softmax(q . k) v) + x for a batch-1 input.
inline Map attention_oracle(const NonLocalAttention& a, const Map& x, const Map& src,
                            const SamplerSpec& s) {
  const Map q = pointwise(x, a.query);
  const Tokens keys = sample(pointwise(src, a.key), s);
  const Tokens values = sample(pointwise(src, a.value), s);
  const int e = q.c;
  Map mixed{e, x.h, x.w, std::vector<double>(static_cast<std::size_t>(e) * x.h * x.w)};
  for (int y = 0; y < x.h; ++y) {
    for (int xx = 0; xx < x.w; ++xx) {
      std::vector<double> logits(keys.size());
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < keys.size(); ++k) {
        double d = 0.0;
        for (int c = 0; c < e; ++c) d += q.at(c, y, xx) * keys[k][c];
        logits[k] = d;
        top = std::max(top, d);
      }
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - top));
      for (int c = 0; c < e; ++c) {
        double s2 = 0.0;
        for (std::size_t k = 0; k < keys.size(); ++k) s2 += logits[k] / z * values[k][c];
        mixed.at(c, y, xx) = s2;
      }
    }
  }
  Map y = pointwise(mixed, a.out);
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
  return y;
}

inline double max_abs_diff(const Map& a, const Tensor& b) {
  const auto y = b.to_vector();
  double m = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) m = std::max(m, std::abs(a.v[i] - y[i]));
  return m;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mrfn_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace support
