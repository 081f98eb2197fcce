#include <algorithm>
#include <cmath>
#include <limits>

#include "kernels.hpp"
#include "mrfn/ops.hpp"
#include "mrfn/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mrfn {

using detail::gemm;

ConvSpec ConvSpec::same(int in_ch, int out_ch, int kernel, int dilation, bool bias) {
  ConvSpec s;
  s.in_ch = in_ch;
  s.out_ch = out_ch;
  s.kernel = kernel;
  s.stride = 1;
  s.dilation = dilation;
  s.padding = dilation * (kernel - 1) / 2;
  s.has_bias = bias;
  return s;
}

ConvSpec ConvSpec::strided(int in_ch, int out_ch, int kernel, int stride, int padding, bool bias) {
  ConvSpec s;
  s.in_ch = in_ch;
  s.out_ch = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.dilation = 1;
  s.padding = padding;
  s.has_bias = bias;
  return s;
}

void ConvSpec::validate() const {
  if (in_ch <= 0 || out_ch <= 0) {
    throw ShapeError("conv channels must be positive, got in=" + std::to_string(in_ch) +
                     " out=" + std::to_string(out_ch));
  }
  if (kernel != 1 && kernel != 3 && kernel != 4) {
    throw ShapeError("conv kernel must be 1, 3 or 4, got " + std::to_string(kernel));
  }
  if (stride != 1 && stride != 2) {
    throw ShapeError("conv stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (dilation != 1 && dilation != 2) {
    throw ShapeError("conv dilation must be 1 or 2, got " + std::to_string(dilation));
  }
  if (padding < 0) throw ShapeError("conv padding must be non-negative");
}

std::int64_t ConvSpec::out_size(std::int64_t in) const {
  return (in + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

std::int64_t ConvSpec::transposed_out_size(std::int64_t in) const {
  return (in - 1) * stride - 2 * padding + dilation * (kernel - 1) + 1;
}

namespace {

struct Geometry {
  std::int64_t channels, height, width;  // image side
  std::int64_t out_h, out_w;             // column grid
  int kernel, stride, padding, dilation;

  std::int64_t col_rows() const { return channels * kernel * kernel; }
  std::int64_t col_cols() const { return out_h * out_w; }
  bool is_pointwise() const {
    return kernel == 1 && stride == 1 && padding == 0 && out_h == height && out_w == width;
  }
};

template <class T>
void im2col(const T* img, const Geometry& g, T* cols) {
  const std::int64_t plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    const T* src = img + c * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        T* dst = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki * g.dilation;
          T* row = dst + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(row, row + g.out_w, T(0));
            continue;
          }
          const T* srow = src + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj * g.dilation;
            row[ow] = (iw >= 0 && iw < g.width) ? srow[iw] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* cols, const Geometry& g, T* img) {
  const std::int64_t plane = g.out_h * g.out_w;
  for (std::int64_t c = 0; c < g.channels; ++c) {
    T* dst = img + c * g.height * g.width;
    for (int ki = 0; ki < g.kernel; ++ki) {
      for (int kj = 0; kj < g.kernel; ++kj) {
        const T* src = cols + ((c * g.kernel + ki) * g.kernel + kj) * plane;
        for (std::int64_t oh = 0; oh < g.out_h; ++oh) {
          const std::int64_t ih = oh * g.stride - g.padding + ki * g.dilation;
          if (ih < 0 || ih >= g.height) continue;
          const T* row = src + oh * g.out_w;
          T* drow = dst + ih * g.width;
          for (std::int64_t ow = 0; ow < g.out_w; ++ow) {
            const std::int64_t iw = ow * g.stride - g.padding + kj * g.dilation;
            if (iw >= 0 && iw < g.width) drow[iw] += row[ow];
          }
        }
      }
    }
  }
}

void check_conv_operands(const char* op, const Tensor& x, const ConvSpec& spec,
                         const Tensor& weight, const Tensor& bias, const Shape& expected_w,
                         int bias_len) {
  spec.validate();
  detail::require_rank(x, 4, op);
  if (x.dim(1) != spec.in_ch) {
    throw ShapeError(std::string(op) + ": input " + shape_str(x.shape()) + " has " +
                     std::to_string(x.dim(1)) + " channels, spec expects " +
                     std::to_string(spec.in_ch));
  }
  if (!weight.defined() || weight.shape() != expected_w) {
    throw ShapeError(std::string(op) + ": weight shape " +
                     (weight.defined() ? shape_str(weight.shape()) : std::string("<none>")) +
                     " does not match expected " + shape_str(expected_w));
  }
  detail::require_same_dtype(x, weight, op);
  if (spec.has_bias) {
    if (!bias.defined() || bias.shape() != Shape{bias_len}) {
      throw ShapeError(std::string(op) + ": bias must have shape [" + std::to_string(bias_len) +
                       "]");
    }
    detail::require_same_dtype(x, bias, op);
  } else if (bias.defined()) {
    throw ShapeError(std::string(op) + ": bias given but spec.has_bias is false");
  }
}

template <class T>
void add_bias(T* y, const T* b, std::int64_t channels, std::int64_t plane) {
  for (std::int64_t c = 0; c < channels; ++c) {
    T* row = y + c * plane;
    const T v = b[c];
    for (std::int64_t i = 0; i < plane; ++i) row[i] += v;
  }
}

template <class T>
void bias_grad(const T* g, std::int64_t channels, std::int64_t plane, T* out) {
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* row = g + c * plane;
    T acc = 0;
    for (std::int64_t i = 0; i < plane; ++i) acc += row[i];
    out[c] += acc;
  }
}

/// Runs fn(n) for every batch item; partial weight gradients are reduced by the
/// caller in item order, so the thread count never changes the result.
template <class F>
void for_batch(std::int64_t batch, F&& fn) {
#ifdef _OPENMP
  if (num_threads() > 1 && batch > 1) {
#pragma omp parallel for schedule(static) num_threads(num_threads())
    for (std::int64_t n = 0; n < batch; ++n) fn(n);
    return;
  }
#endif
  for (std::int64_t n = 0; n < batch; ++n) fn(n);
}

template <class T>
void reduce_partials(const std::vector<std::vector<T>>& parts, T* out) {
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.size(); ++i) out[i] += p[i];
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor& bias) {
  check_conv_operands("conv2d", x, spec, weight, bias, spec.weight_shape(), spec.out_ch);
  const std::int64_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = spec.out_size(h), ow = spec.out_size(w);
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " +
                     std::to_string(spec.kernel) + " dilation " + std::to_string(spec.dilation));
  }
  const Geometry geo{spec.in_ch, h, w, oh, ow, spec.kernel, spec.stride, spec.padding,
                     spec.dilation};
  const std::int64_t cout = spec.out_ch;
  Tensor y = Tensor::zeros({batch, cout, oh, ow}, x.dtype());

  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    const T* wd = weight.data<T>().data();
    T* yd = y.data<T>().data();
    const std::int64_t in_plane = spec.in_ch * h * w;
    const std::int64_t out_plane = cout * oh * ow;
    for_batch(batch, [&](std::int64_t n) {
      std::vector<T> cols;
      const T* colp = xd + n * in_plane;
      if (!geo.is_pointwise()) {
        cols.resize(static_cast<std::size_t>(geo.col_rows() * geo.col_cols()));
        im2col(xd + n * in_plane, geo, cols.data());
        colp = cols.data();
      }
      gemm<T>(false, false, cout, geo.col_cols(), geo.col_rows(), wd, colp, yd + n * out_plane,
              false);
      if (spec.has_bias) add_bias(yd + n * out_plane, bias.data<T>().data(), cout, oh * ow);
    });
  });

  record(y, "conv2d", {x, weight, bias},
         [x, weight, bias, spec, geo](const Tensor& g) -> std::vector<Tensor> {
           std::vector<Tensor> grads(3);
           const std::int64_t batch = x.dim(0);
           dispatch(x.dtype(), [&]<typename T>() {
             const T* xd = x.data<T>().data();
             const T* wd = weight.data<T>().data();
             const T* gd = g.data<T>().data();
             const std::int64_t in_plane = geo.channels * geo.height * geo.width;
             const std::int64_t out_plane = spec.out_ch * geo.col_cols();
             const bool need_x = x.requires_grad();
             const bool need_w = weight.requires_grad();
             const bool need_b = spec.has_bias && bias.requires_grad();
             Tensor gx = need_x ? Tensor::zeros(x.shape(), x.dtype()) : Tensor();
             std::vector<std::vector<T>> wparts(
                 need_w ? static_cast<std::size_t>(batch) : 0,
                 std::vector<T>(static_cast<std::size_t>(spec.weight_count())));
             std::vector<std::vector<T>> bparts(need_b ? static_cast<std::size_t>(batch) : 0,
                                                std::vector<T>(spec.out_ch));
             T* gxd = need_x ? gx.data<T>().data() : nullptr;
             for_batch(batch, [&](std::int64_t n) {
               const T* gn = gd + n * out_plane;
               std::vector<T> cols;
               const T* colp = xd + n * in_plane;
               if (need_w && !geo.is_pointwise()) {
                 cols.resize(static_cast<std::size_t>(geo.col_rows() * geo.col_cols()));
                 im2col(xd + n * in_plane, geo, cols.data());
                 colp = cols.data();
               }
               if (need_w) {
                 gemm<T>(false, true, spec.out_ch, geo.col_rows(), geo.col_cols(), gn, colp,
                         wparts[static_cast<std::size_t>(n)].data(), false);
               }
               if (need_b) {
                 bias_grad(gn, spec.out_ch, geo.col_cols(),
                           bparts[static_cast<std::size_t>(n)].data());
               }
               if (need_x) {
                 if (geo.is_pointwise()) {
                   gemm<T>(true, false, geo.col_rows(), geo.col_cols(), spec.out_ch, wd, gn,
                           gxd + n * in_plane, false);
                 } else {
                   std::vector<T> dcols(static_cast<std::size_t>(geo.col_rows() * geo.col_cols()));
                   gemm<T>(true, false, geo.col_rows(), geo.col_cols(), spec.out_ch, wd, gn,
                           dcols.data(), false);
                   col2im(dcols.data(), geo, gxd + n * in_plane);
                 }
               }
             });
             grads[0] = gx;
             if (need_w) {
               Tensor gw = Tensor::zeros(weight.shape(), weight.dtype());
               reduce_partials(wparts, gw.data<T>().data());
               grads[1] = gw;
             }
             if (need_b) {
               Tensor gb = Tensor::zeros(bias.shape(), bias.dtype());
               reduce_partials(bparts, gb.data<T>().data());
               grads[2] = gb;
             }
           });
           return grads;
         });
  return y;
}

Tensor conv_transpose2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight,
                        const Tensor& bias) {
  check_conv_operands("conv_transpose2d", x, spec, weight, bias, spec.transposed_weight_shape(),
                      spec.out_ch);
  const std::int64_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = spec.transposed_out_size(h), ow = spec.transposed_out_size(w);
  if (oh <= 0 || ow <= 0) {
    throw ShapeError("conv_transpose2d: input " + shape_str(x.shape()) + " too small");
  }
  // Column grid is the input grid; the "image" is the output.
  const Geometry geo{spec.out_ch, oh, ow, h, w, spec.kernel, spec.stride, spec.padding,
                     spec.dilation};
  if (spec.out_size(oh) != h || spec.out_size(ow) != w) {
    throw ShapeError("conv_transpose2d: geometry is not invertible for input " +
                     shape_str(x.shape()));
  }
  const std::int64_t cin = spec.in_ch;
  Tensor y = Tensor::zeros({batch, spec.out_ch, oh, ow}, x.dtype());

  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    const T* wd = weight.data<T>().data();
    T* yd = y.data<T>().data();
    const std::int64_t in_plane = cin * h * w;
    const std::int64_t out_plane = spec.out_ch * oh * ow;
    for_batch(batch, [&](std::int64_t n) {
      std::vector<T> cols(static_cast<std::size_t>(geo.col_rows() * geo.col_cols()));
      gemm<T>(true, false, geo.col_rows(), geo.col_cols(), cin, wd, xd + n * in_plane,
              cols.data(), false);
      col2im(cols.data(), geo, yd + n * out_plane);
      if (spec.has_bias) add_bias(yd + n * out_plane, bias.data<T>().data(), spec.out_ch, oh * ow);
    });
  });

  record(y, "conv_transpose2d", {x, weight, bias},
         [x, weight, bias, spec, geo](const Tensor& g) -> std::vector<Tensor> {
           std::vector<Tensor> grads(3);
           const std::int64_t batch = x.dim(0);
           dispatch(x.dtype(), [&]<typename T>() {
             const T* xd = x.data<T>().data();
             const T* wd = weight.data<T>().data();
             const T* gd = g.data<T>().data();
             const std::int64_t cin = spec.in_ch;
             const std::int64_t in_plane = cin * geo.col_cols();
             const std::int64_t out_plane = geo.channels * geo.height * geo.width;
             const bool need_x = x.requires_grad();
             const bool need_w = weight.requires_grad();
             const bool need_b = spec.has_bias && bias.requires_grad();
             Tensor gx = need_x ? Tensor::zeros(x.shape(), x.dtype()) : Tensor();
             std::vector<std::vector<T>> wparts(
                 need_w ? static_cast<std::size_t>(batch) : 0,
                 std::vector<T>(static_cast<std::size_t>(spec.weight_count())));
             std::vector<std::vector<T>> bparts(need_b ? static_cast<std::size_t>(batch) : 0,
                                                std::vector<T>(spec.out_ch));
             T* gxd = need_x ? gx.data<T>().data() : nullptr;
             for_batch(batch, [&](std::int64_t n) {
               const T* gn = gd + n * out_plane;
               if (need_b) {
                 bias_grad(gn, spec.out_ch, geo.height * geo.width,
                           bparts[static_cast<std::size_t>(n)].data());
               }
               if (!need_x && !need_w) return;
               std::vector<T> dcols(static_cast<std::size_t>(geo.col_rows() * geo.col_cols()));
               im2col(gn, geo, dcols.data());
               if (need_x) {
                 gemm<T>(false, false, cin, geo.col_cols(), geo.col_rows(), wd, dcols.data(),
                         gxd + n * in_plane, false);
               }
               if (need_w) {
                 gemm<T>(false, true, cin, geo.col_rows(), geo.col_cols(), xd + n * in_plane,
                         dcols.data(), wparts[static_cast<std::size_t>(n)].data(), false);
               }
             });
             grads[0] = gx;
             if (need_w) {
               Tensor gw = Tensor::zeros(weight.shape(), weight.dtype());
               reduce_partials(wparts, gw.data<T>().data());
               grads[1] = gw;
             }
             if (need_b) {
               Tensor gb = Tensor::zeros(bias.shape(), bias.dtype());
               reduce_partials(bparts, gb.data<T>().data());
               grads[2] = gb;
             }
           });
           return grads;
         });
  return y;
}

namespace {

/// Shared backward for the max-pool family: argmax holds the flat input
/// offset chosen for every output element.
Tensor pooled_output(const Tensor& x, Shape out_shape, std::vector<std::int64_t> argmax,
                     const char* op) {
  Tensor y = Tensor::zeros(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const auto xd = x.data<T>();
    auto yd = y.data<T>();
    for (std::size_t i = 0; i < argmax.size(); ++i) yd[i] = xd[static_cast<std::size_t>(argmax[i])];
  });
  record(y, op, {x}, [x, argmax = std::move(argmax)](const Tensor& g) -> std::vector<Tensor> {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      auto gxd = gx.data<T>();
      const auto gd = g.data<T>();
      for (std::size_t i = 0; i < argmax.size(); ++i) {
        gxd[static_cast<std::size_t>(argmax[i])] += gd[i];
      }
    });
    return {gx};
  });
  return y;
}

/// Row-major first-occurrence argmax over [r0,r1) x [c0,c1) of one plane.
template <class T>
std::int64_t window_argmax(const T* plane, std::int64_t width, std::int64_t r0, std::int64_t r1,
                           std::int64_t c0, std::int64_t c1) {
  std::int64_t best = r0 * width + c0;
  T best_v = plane[best];
  for (std::int64_t r = r0; r < r1; ++r) {
    for (std::int64_t c = c0; c < c1; ++c) {
      const T v = plane[r * width + c];
      if (v > best_v) {
        best_v = v;
        best = r * width + c;
      }
    }
  }
  return best;
}

}  // namespace

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
  detail::require_rank(x, 4, "maxpool2d");
  if (kernel <= 0 || stride <= 0 || kernel != stride) {
    throw ShapeError("maxpool2d: kernel must equal stride, got kernel=" + std::to_string(kernel) +
                     " stride=" + std::to_string(stride));
  }
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % stride != 0 || w % stride != 0) {
    throw ShapeError("maxpool2d: spatial dims of " + shape_str(x.shape()) +
                     " are not divisible by stride " + std::to_string(stride));
  }
  const std::int64_t oh = h / stride, ow = w / stride;
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(nc * oh * ow));
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    std::size_t k = 0;
    for (std::int64_t p = 0; p < nc; ++p) {
      const T* plane = xd + p * h * w;
      for (std::int64_t i = 0; i < oh; ++i) {
        for (std::int64_t j = 0; j < ow; ++j) {
          argmax[k++] = p * h * w + window_argmax(plane, w, i * stride, i * stride + kernel,
                                                  j * stride, j * stride + kernel);
        }
      }
    }
  });
  return pooled_output(x, {x.dim(0), x.dim(1), oh, ow}, std::move(argmax), "maxpool2d");
}

Tensor adaptive_maxpool2d(const Tensor& x, int out_h, int out_w) {
  detail::require_rank(x, 4, "adaptive_maxpool2d");
  if (out_h <= 0 || out_w <= 0) {
    throw ShapeError("adaptive_maxpool2d: output size must be positive, got " +
                     std::to_string(out_h) + "x" + std::to_string(out_w));
  }
  const std::int64_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h > h || out_w > w) {
    throw ShapeError("adaptive_maxpool2d: output " + std::to_string(out_h) + "x" +
                     std::to_string(out_w) + " exceeds input " + shape_str(x.shape()));
  }
  auto lo = [](std::int64_t i, std::int64_t in, std::int64_t out) { return (i * in) / out; };
  auto hi = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    return ((i + 1) * in + out - 1) / out;
  };
  std::vector<std::int64_t> argmax(static_cast<std::size_t>(nc * out_h * out_w));
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    std::size_t k = 0;
    for (std::int64_t p = 0; p < nc; ++p) {
      const T* plane = xd + p * h * w;
      for (std::int64_t i = 0; i < out_h; ++i) {
        for (std::int64_t j = 0; j < out_w; ++j) {
          argmax[k++] = p * h * w + window_argmax(plane, w, lo(i, h, out_h), hi(i, h, out_h),
                                                  lo(j, w, out_w), hi(j, w, out_w));
        }
      }
    }
  });
  return pooled_output(x, {x.dim(0), x.dim(1), out_h, out_w}, std::move(argmax),
                       "adaptive_maxpool2d");
}

Tensor global_avg_pool(const Tensor& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::int64_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y = Tensor::zeros({x.dim(0), x.dim(1), 1, 1}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* xd = x.data<T>().data();
    T* yd = y.data<T>().data();
    for (std::int64_t p = 0; p < nc; ++p) {
      T acc = 0;
      for (std::int64_t i = 0; i < plane; ++i) acc += xd[p * plane + i];
      yd[p] = acc / static_cast<T>(plane);
    }
  });
  record(y, "global_avg_pool", {x}, [x, nc, plane](const Tensor& g) -> std::vector<Tensor> {
    Tensor gx = Tensor::zeros(x.shape(), x.dtype());
    dispatch(x.dtype(), [&]<typename T>() {
      T* gxd = gx.data<T>().data();
      const T* gd = g.data<T>().data();
      for (std::int64_t p = 0; p < nc; ++p) {
        const T v = gd[p] / static_cast<T>(plane);
        std::fill(gxd + p * plane, gxd + (p + 1) * plane, v);
      }
    });
    return {gx};
  });
  return y;
}

}  // namespace mrfn
