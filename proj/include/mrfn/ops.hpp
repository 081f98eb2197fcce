#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mrfn/tensor.hpp"

namespace mrfn {

/// Geometry of a 2-D convolution. For transposed convolutions the same record
/// describes the forward conv whose adjoint is taken: in_ch is the transposed
/// op's input channel count, weights are laid out [in_ch, out_ch, k, k].
struct ConvSpec {
  int in_ch = 0;
  int out_ch = 0;
  int kernel = 3;
  int stride = 1;
  int dilation = 1;
  int padding = 1;
  bool has_bias = true;

  /// Zero "same" padding: padding = dilation * (kernel - 1) / 2.
  static ConvSpec same(int in_ch, int out_ch, int kernel, int dilation = 1, bool bias = true);
  static ConvSpec strided(int in_ch, int out_ch, int kernel, int stride, int padding,
                          bool bias = true);

  /// Throws ShapeError unless kernel in {1,3,4}, stride and dilation in {1,2}.
  void validate() const;

  std::int64_t weight_count() const {
    return static_cast<std::int64_t>(in_ch) * out_ch * kernel * kernel;
  }
  std::int64_t param_count() const { return weight_count() + (has_bias ? out_ch : 0); }

  std::int64_t out_size(std::int64_t in) const;
  std::int64_t transposed_out_size(std::int64_t in) const;

  Shape weight_shape() const { return {out_ch, in_ch, kernel, kernel}; }
  Shape transposed_weight_shape() const { return {in_ch, out_ch, kernel, kernel}; }

  bool operator==(const ConvSpec&) const = default;
};

// Convolution family (NCHW). `bias` may be undefined when spec.has_bias is false.
Tensor conv2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight, const Tensor& bias);
Tensor conv_transpose2d(const Tensor& x, const ConvSpec& spec, const Tensor& weight,
                        const Tensor& bias);

/// Window max with kernel == stride; spatial dims must divide by stride.
/// Ties route the gradient to the first element in row-major window order.
Tensor maxpool2d(const Tensor& x, int kernel, int stride);
/// Window i spans [floor(i*H/out), ceil((i+1)*H/out)).
Tensor adaptive_maxpool2d(const Tensor& x, int out_h, int out_w);
Tensor global_avg_pool(const Tensor& x);

// Elementwise with broadcasting over dims that match or are 1 (equal rank).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor clamp(const Tensor& x, double lo, double hi);

/// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

Tensor concat(std::span<const Tensor> xs, int axis);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean absolute difference over all elements (subgradient 0 at equality).
Tensor l1_mean(const Tensor& a, const Tensor& b);
/// Mean binary cross-entropy on logits; `targets` is never differentiated.
Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);

/// Reflect-pad the bottom and right edges of an NCHW tensor (edge not repeated).
Tensor pad_reflect(const Tensor& x, int bottom, int right);
/// Keep the top-left h x w window of an NCHW tensor.
Tensor crop(const Tensor& x, std::int64_t h, std::int64_t w);

/// Copy of batch element `n` as a [1,...] tensor, no tape.
Tensor batch_item(const Tensor& x, std::int64_t n);
/// Stack equally-shaped [1,...] or [...] tensors along a new/first axis, no tape.
Tensor stack_batch(std::span<const Tensor> xs);

}  // namespace mrfn
