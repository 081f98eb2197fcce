#include <algorithm>
#include <cmath>
#include <numeric>

#include "kernels.hpp"
#include "mrfn/ops.hpp"
#include "mrfn/parallel.hpp"

namespace mrfn {

namespace {

int g_threads = 1;

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> a_strides;
  std::vector<std::int64_t> b_strides;
};

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != b.rank()) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                     shape_str(b.shape()));
  }
  detail::require_same_dtype(a, b, op);
  Broadcast p;
  const auto sa = detail::contiguous_strides(a.shape());
  const auto sb = detail::contiguous_strides(b.shape());
  for (int i = 0; i < a.rank(); ++i) {
    const auto da = a.dim(i), db = b.dim(i);
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                       " with " + shape_str(b.shape()));
    }
    p.out.push_back(std::max(da, db));
    p.a_strides.push_back(da == 1 ? 0 : sa[static_cast<std::size_t>(i)]);
    p.b_strides.push_back(db == 1 ? 0 : sb[static_cast<std::size_t>(i)]);
  }
  return p;
}

/// Calls f(i, offset_a, offset_b) for every output element i in row-major order.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const int r = static_cast<int>(p.out.size());
  const std::int64_t total = shape_numel(p.out);
  if (r == 0 || total == 0) return;
  const std::int64_t inner = p.out.back();
  const std::int64_t ia = p.a_strides.back(), ib = p.b_strides.back();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t oa = 0, ob = 0, i = 0;
  while (i < total) {
    for (std::int64_t j = 0; j < inner; ++j) f(i++, oa + j * ia, ob + j * ib);
    for (int d = r - 2; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      oa += p.a_strides[ud];
      ob += p.b_strides[ud];
      if (idx[ud] < p.out[ud]) break;
      oa -= p.a_strides[ud] * p.out[ud];
      ob -= p.b_strides[ud] * p.out[ud];
      idx[ud] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Broadcast p = plan_broadcast(a, b, name);
  Tensor y = Tensor::zeros(p.out, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* ad = a.data<T>().data();
    const T* bd = b.data<T>().data();
    T* yd = y.data<T>().data();
    switch (op) {
      case BinOp::Add:
        for_each_broadcast(p, [&](auto i, auto ia, auto ib) { yd[i] = ad[ia] + bd[ib]; });
        break;
      case BinOp::Sub:
        for_each_broadcast(p, [&](auto i, auto ia, auto ib) { yd[i] = ad[ia] - bd[ib]; });
        break;
      case BinOp::Mul:
        for_each_broadcast(p, [&](auto i, auto ia, auto ib) { yd[i] = ad[ia] * bd[ib]; });
        break;
      case BinOp::Div:
        for_each_broadcast(p, [&](auto i, auto ia, auto ib) { yd[i] = ad[ia] / bd[ib]; });
        break;
    }
  });
  record(y, name, {a, b}, [a, b, p, op](const Tensor& g) -> std::vector<Tensor> {
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    Tensor ga = need_a ? Tensor::zeros(a.shape(), a.dtype()) : Tensor();
    Tensor gb = need_b ? Tensor::zeros(b.shape(), b.dtype()) : Tensor();
    dispatch(a.dtype(), [&]<typename T>() {
      const T* ad = a.data<T>().data();
      const T* bd = b.data<T>().data();
      const T* gd = g.data<T>().data();
      T* gad = need_a ? ga.data<T>().data() : nullptr;
      T* gbd = need_b ? gb.data<T>().data() : nullptr;
      for_each_broadcast(p, [&](auto i, auto ia, auto ib) {
        const T gi = gd[i];
        switch (op) {
          case BinOp::Add:
            if (gad) gad[ia] += gi;
            if (gbd) gbd[ib] += gi;
            break;
          case BinOp::Sub:
            if (gad) gad[ia] += gi;
            if (gbd) gbd[ib] -= gi;
            break;
          case BinOp::Mul:
            if (gad) gad[ia] += gi * bd[ib];
            if (gbd) gbd[ib] += gi * ad[ia];
            break;
          case BinOp::Div:
            if (gad) gad[ia] += gi / bd[ib];
            if (gbd) gbd[ib] -= gi * ad[ia] / (bd[ib] * bd[ib]);
            break;
        }
      });
    });
    return {ga, gb};
  });
  return y;
}

/// y = f(x) elementwise with dy/dx = df(x, y).
template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const auto xd = x.data<T>();
    auto yd = y.data<T>();
    for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = static_cast<T>(f(xd[i]));
  });
  Tensor y_saved = y;
  record(y, name, {x}, [x, y_saved, df](const Tensor& g) -> std::vector<Tensor> {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      const auto xd = x.data<T>();
      const auto yd = y_saved.data<T>();
      const auto gd = g.data<T>();
      auto gxd = gx.data<T>();
      for (std::size_t i = 0; i < xd.size(); ++i) {
        gxd[i] = gd[i] * static_cast<T>(df(xd[i], yd[i]));
      }
    });
    return {gx};
  });
  return y;
}

}  // namespace

void set_num_threads(int n) { g_threads = std::max(1, n); }
int num_threads() { return g_threads; }

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor relu(const Tensor& x) {
  return unary(
      x, "relu", [](auto v) { return v > 0 ? v : decltype(v)(0); },
      [](auto v, auto) { return v > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, "sigmoid",
      [](auto v) {
        using T = decltype(v);
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](auto, auto y) { return y * (decltype(y)(1) - y); });
}

Tensor scale(const Tensor& x, double factor) {
  return unary(
      x, "scale", [factor](auto v) { return v * static_cast<decltype(v)>(factor); },
      [factor](auto, auto) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary(
      x, "add_scalar", [value](auto v) { return v + static_cast<decltype(v)>(value); },
      [](auto, auto) { return 1.0; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, "clamp",
      [lo, hi](auto v) {
        using T = decltype(v);
        return std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
      },
      [lo, hi](auto v, auto) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_same_dtype(a, b, "matmul");
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3))) {
    throw ShapeError("matmul: expected two rank-2 or two rank-3 operands, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::int64_t bs = batched ? a.dim(0) : 1;
  const std::int64_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k || (batched && b.dim(0) != bs)) {
    throw ShapeError("matmul: inner dims differ for " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor y = batched ? Tensor::zeros({bs, m, n}, a.dtype()) : Tensor::zeros({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* ad = a.data<T>().data();
    const T* bd = b.data<T>().data();
    T* yd = y.data<T>().data();
    for (std::int64_t i = 0; i < bs; ++i) {
      detail::gemm<T>(false, false, m, n, k, ad + i * m * k, bd + i * k * n, yd + i * m * n,
                      false);
    }
  });
  record(y, "matmul", {a, b}, [a, b, bs, m, n, k](const Tensor& g) -> std::vector<Tensor> {
    Tensor ga = a.requires_grad() ? Tensor::zeros(a.shape(), a.dtype()) : Tensor();
    Tensor gb = b.requires_grad() ? Tensor::zeros(b.shape(), b.dtype()) : Tensor();
    dispatch(a.dtype(), [&]<typename T>() {
      const T* ad = a.data<T>().data();
      const T* bd = b.data<T>().data();
      const T* gd = g.data<T>().data();
      for (std::int64_t i = 0; i < bs; ++i) {
        if (ga.defined()) {
          detail::gemm<T>(false, true, m, k, n, gd + i * m * n, bd + i * k * n,
                          ga.data<T>().data() + i * m * k, false);
        }
        if (gb.defined()) {
          detail::gemm<T>(true, false, k, n, m, ad + i * m * k, gd + i * m * n,
                          gb.data<T>().data() + i * k * n, false);
        }
      }
    });
    return {ga, gb};
  });
  return y;
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t len = x.dim(axis);
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    T* yd = y.data<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T mx = xd[base];
        for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, xd[base + j * inner]);
        T total = 0;
        for (std::int64_t j = 0; j < len; ++j) {
          const T e = std::exp(xd[base + j * inner] - mx);
          yd[base + j * inner] = e;
          total += e;
        }
        for (std::int64_t j = 0; j < len; ++j) yd[base + j * inner] /= total;
      }
    }
  });
  Tensor y_saved = y;
  record(y, "softmax", {x}, [x, y_saved, outer, inner, len](const Tensor& g) -> std::vector<Tensor> {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      const T* yd = y_saved.data<T>().data();
      const T* gd = g.data<T>().data();
      T* gxd = gx.data<T>().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * len * inner + in;
          T dot = 0;
          for (std::int64_t j = 0; j < len; ++j) dot += gd[base + j * inner] * yd[base + j * inner];
          for (std::int64_t j = 0; j < len; ++j) {
            const auto at = base + j * inner;
            gxd[at] = yd[at] * (gd[at] - dot);
          }
        }
      }
    });
    return {gx};
  });
  return y;
}

Tensor concat(std::span<const Tensor> xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: empty input list");
  const Tensor& first = xs.front();
  if (axis < 0) axis += first.rank();
  if (axis < 0 || axis >= first.rank()) throw ShapeError("concat: axis out of range");
  Shape out = first.shape();
  out[static_cast<std::size_t>(axis)] = 0;
  for (const auto& t : xs) {
    detail::require_same_dtype(first, t, "concat");
    if (t.rank() != first.rank()) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < t.rank(); ++i) {
      if (i != axis && t.dim(i) != first.dim(i)) {
        throw ShapeError("concat: " + shape_str(t.shape()) + " incompatible with " +
                         shape_str(first.shape()) + " along axis " + std::to_string(axis));
      }
    }
    out[static_cast<std::size_t>(axis)] += t.dim(axis);
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
  const std::int64_t out_row = out[static_cast<std::size_t>(axis)] * inner;
  Tensor y = Tensor::zeros(out, first.dtype());
  std::vector<std::int64_t> offsets;
  dispatch(first.dtype(), [&]<typename T>() {
    T* yd = y.data<T>().data();
    std::int64_t off = 0;
    for (const auto& t : xs) {
      offsets.push_back(off);
      const T* td = t.data<T>().data();
      const std::int64_t row = t.dim(axis) * inner;
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy(td + o * row, td + (o + 1) * row, yd + o * out_row + off);
      }
      off += row;
    }
  });
  std::vector<Tensor> inputs(xs.begin(), xs.end());
  record(y, "concat", inputs,
         [inputs, offsets, outer, inner, out_row, axis](const Tensor& g) -> std::vector<Tensor> {
           std::vector<Tensor> grads(inputs.size());
           dispatch(g.dtype(), [&]<typename T>() {
             const T* gd = g.data<T>().data();
             for (std::size_t k = 0; k < inputs.size(); ++k) {
               if (!inputs[k].requires_grad()) continue;
               Tensor gk = Tensor::zeros(inputs[k].shape(), g.dtype());
               T* gkd = gk.data<T>().data();
               const std::int64_t row = inputs[k].dim(axis) * inner;
               for (std::int64_t o = 0; o < outer; ++o) {
                 const T* src = gd + o * out_row + offsets[k];
                 std::copy(src, src + row, gkd + o * row);
               }
               grads[k] = gk;
             }
           });
           return grads;
         });
  return y;
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor y = Tensor::from_storage(shape, x.impl()->data);
  record(y, "reshape", {x}, [x](const Tensor& g) -> std::vector<Tensor> {
    return {Tensor::from_storage(x.shape(), g.impl()->data)};
  });
  return y;
}

namespace {

/// Gather x into `out_shape` where output axis i reads input axis dims[i].
Tensor permute_raw(const Tensor& x, const std::vector<int>& dims) {
  const int r = x.rank();
  Shape out(static_cast<std::size_t>(r));
  const auto in_strides = detail::contiguous_strides(x.shape());
  std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out[static_cast<std::size_t>(i)] = x.dim(dims[static_cast<std::size_t>(i)]);
    strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(dims[static_cast<std::size_t>(i)])];
  }
  Tensor y = Tensor::zeros(out, x.dtype());
  // Reuse the broadcast walker: "a" walks the permuted input, "b" is unused.
  Broadcast p{out, strides, std::vector<std::int64_t>(static_cast<std::size_t>(r), 0)};
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    T* yd = y.data<T>().data();
    for_each_broadcast(p, [&](auto i, auto ia, auto) { yd[i] = xd[ia]; });
  });
  return y;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  if (static_cast<int>(dims.size()) != x.rank()) throw ShapeError("permute: rank mismatch");
  std::vector<int> inverse(dims.size(), -1);
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const int d = dims[i];
    if (d < 0 || d >= x.rank() || inverse[static_cast<std::size_t>(d)] != -1) {
      throw ShapeError("permute: invalid permutation for " + shape_str(x.shape()));
    }
    inverse[static_cast<std::size_t>(d)] = static_cast<int>(i);
  }
  Tensor y = permute_raw(x, dims);
  record(y, "permute", {x}, [inverse](const Tensor& g) -> std::vector<Tensor> {
    return {permute_raw(g, inverse)};
  });
  return y;
}

Tensor sum(const Tensor& x) {
  Tensor y = Tensor::zeros({1}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    y.data<T>()[0] = acc;
  });
  record(y, "sum", {x}, [x](const Tensor& g) -> std::vector<Tensor> {
    return {Tensor::full(x.shape(), g.item(), x.dtype())};
  });
  return y;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor l1_mean(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("l1_mean: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  detail::require_same_dtype(a, b, "l1_mean");
  const double n = static_cast<double>(a.numel());
  Tensor y = Tensor::zeros({1}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const auto ad = a.data<T>();
    const auto bd = b.data<T>();
    T acc = 0;
    for (std::size_t i = 0; i < ad.size(); ++i) acc += std::abs(ad[i] - bd[i]);
    y.data<T>()[0] = acc / static_cast<T>(n);
  });
  record(y, "l1_mean", {a, b}, [a, b, n](const Tensor& g) -> std::vector<Tensor> {
    Tensor ga = a.requires_grad() ? Tensor::zeros(a.shape(), a.dtype()) : Tensor();
    Tensor gb = b.requires_grad() ? Tensor::zeros(b.shape(), b.dtype()) : Tensor();
    dispatch(a.dtype(), [&]<typename T>() {
      const auto ad = a.data<T>();
      const auto bd = b.data<T>();
      const T s = static_cast<T>(g.item() / n);
      for (std::size_t i = 0; i < ad.size(); ++i) {
        const T diff = ad[i] - bd[i];
        const T sign = diff > 0 ? T(1) : (diff < 0 ? T(-1) : T(0));
        if (ga.defined()) ga.data<T>()[i] = s * sign;
        if (gb.defined()) gb.data<T>()[i] = -s * sign;
      }
    });
    return {ga, gb};
  });
  return y;
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                     shape_str(targets.shape()));
  }
  detail::require_same_dtype(logits, targets, "bce_with_logits");
  const double n = static_cast<double>(logits.numel());
  Tensor y = Tensor::zeros({1}, logits.dtype());
  dispatch(logits.dtype(), [&]<typename T>() {
    const auto z = logits.data<T>();
    const auto t = targets.data<T>();
    T acc = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      acc += std::max(z[i], T(0)) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    y.data<T>()[0] = acc / static_cast<T>(n);
  });
  record(y, "bce_with_logits", {logits},
         [logits, targets, n](const Tensor& g) -> std::vector<Tensor> {
           Tensor gz = Tensor::zeros(logits.shape(), logits.dtype());
           dispatch(logits.dtype(), [&]<typename T>() {
             const auto z = logits.data<T>();
             const auto t = targets.data<T>();
             auto out = gz.data<T>();
             const T s = static_cast<T>(g.item() / n);
             for (std::size_t i = 0; i < z.size(); ++i) {
               const T sig = z[i] >= 0 ? T(1) / (T(1) + std::exp(-z[i]))
                                       : std::exp(z[i]) / (T(1) + std::exp(z[i]));
               out[i] = s * (sig - t[i]);
             }
           });
           return {gz};
         });
  return y;
}

Tensor pad_reflect(const Tensor& x, int bottom, int right) {
  detail::require_rank(x, 4, "pad_reflect");
  const std::int64_t h = x.dim(2), w = x.dim(3);
  if (bottom < 0 || right < 0 || bottom >= h || right >= w) {
    throw ShapeError("pad_reflect: padding (" + std::to_string(bottom) + "," +
                     std::to_string(right) + ") invalid for " + shape_str(x.shape()));
  }
  if (bottom == 0 && right == 0) return x;
  const std::int64_t oh = h + bottom, ow = w + right, nc = x.dim(0) * x.dim(1);
  auto src_row = [h](std::int64_t i) { return i < h ? i : 2 * h - 2 - i; };
  auto src_col = [w](std::int64_t j) { return j < w ? j : 2 * w - 2 - j; };
  Tensor y = Tensor::zeros({x.dim(0), x.dim(1), oh, ow}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    T* yd = y.data<T>().data();
    for (std::int64_t p = 0; p < nc; ++p) {
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          yd[(p * oh + i) * ow + j] = xd[(p * h + src_row(i)) * w + src_col(j)];
        }
      }
    }
  });
  record(y, "pad_reflect", {x}, [x, oh, ow, nc, src_row, src_col](const Tensor& g) {
    const std::int64_t h = x.dim(2), w = x.dim(3);
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      const T* gd = g.data<T>().data();
      T* gxd = gx.data<T>().data();
      for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t i = 0; i < oh; ++i) {
          for (std::int64_t j = 0; j < ow; ++j) {
            gxd[(p * h + src_row(i)) * w + src_col(j)] += gd[(p * oh + i) * ow + j];
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return y;
}

Tensor crop(const Tensor& x, std::int64_t h, std::int64_t w) {
  detail::require_rank(x, 4, "crop");
  if (h <= 0 || w <= 0 || h > x.dim(2) || w > x.dim(3)) {
    throw ShapeError("crop: window " + std::to_string(h) + "x" + std::to_string(w) +
                     " invalid for " + shape_str(x.shape()));
  }
  if (h == x.dim(2) && w == x.dim(3)) return x;
  const std::int64_t ih = x.dim(2), iw = x.dim(3), nc = x.dim(0) * x.dim(1);
  Tensor y = Tensor::zeros({x.dim(0), x.dim(1), h, w}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    T* yd = y.data<T>().data();
    for (std::int64_t p = 0; p < nc; ++p) {
      for (std::int64_t i = 0; i < h; ++i) {
        std::copy_n(xd + (p * ih + i) * iw, w, yd + (p * h + i) * w);
      }
    }
  });
  record(y, "crop", {x}, [x, h, w, ih, iw, nc](const Tensor& g) -> std::vector<Tensor> {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      const T* gd = g.data<T>().data();
      T* gxd = gx.data<T>().data();
      for (std::int64_t p = 0; p < nc; ++p) {
        for (std::int64_t i = 0; i < h; ++i) {
          std::copy_n(gd + (p * h + i) * w, w, gxd + (p * ih + i) * iw);
        }
      }
    });
    return {gx};
  });
  return y;
}

Tensor batch_item(const Tensor& x, std::int64_t n) {
  if (x.rank() < 1 || n < 0 || n >= x.dim(0)) throw ShapeError("batch_item: index out of range");
  Shape s = x.shape();
  s[0] = 1;
  const std::int64_t per = x.numel() / x.dim(0);
  Tensor y = dispatch(x.dtype(), [&]<typename T>() {
    const auto d = x.data<T>();
    std::vector<T> out(d.begin() + n * per, d.begin() + (n + 1) * per);
    return Tensor::from_storage(s, std::move(out));
  });
  record(y, "batch_item", {x}, [x, n, per](const Tensor& g) -> std::vector<Tensor> {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      const auto gd = g.data<T>();
      std::copy(gd.begin(), gd.end(), gx.data<T>().begin() + n * per);
    });
    return {gx};
  });
  return y;
}

Tensor stack_batch(std::span<const Tensor> xs) {
  if (xs.empty()) throw ShapeError("stack_batch: empty list");
  Shape s = xs.front().shape();
  const bool has_unit_batch = !s.empty() && s[0] == 1;
  if (has_unit_batch) {
    s[0] = static_cast<std::int64_t>(xs.size());
  } else {
    s.insert(s.begin(), static_cast<std::int64_t>(xs.size()));
  }
  Tensor y = dispatch(xs.front().dtype(), [&]<typename T>() {
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(shape_numel(s)));
    for (const auto& t : xs) {
      if (t.shape() != xs.front().shape()) {
        throw ShapeError("stack_batch: " + shape_str(t.shape()) + " differs from " +
                         shape_str(xs.front().shape()));
      }
      const auto d = t.data<T>();
      out.insert(out.end(), d.begin(), d.end());
    }
    return Tensor::from_storage(s, std::move(out));
  });
  const std::vector<Tensor> inputs(xs.begin(), xs.end());
  record(y, "stack_batch", inputs, [inputs](const Tensor& g) -> std::vector<Tensor> {
    std::vector<Tensor> grads;
    std::int64_t offset = 0;
    for (const auto& t : inputs) {
      Tensor gt = Tensor::zeros(t.shape(), t.dtype());
      dispatch(t.dtype(), [&]<typename T>() {
        const auto gd = g.data<T>();
        std::copy_n(gd.begin() + offset, t.numel(), gt.data<T>().begin());
      });
      offset += t.numel();
      grads.push_back(gt);
    }
    return grads;
  });
  return y;
}

}  // namespace mrfn
