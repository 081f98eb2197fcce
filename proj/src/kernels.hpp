#pragma once

// Internal helpers shared by the op implementations.

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "mrfn/tensor.hpp"

namespace mrfn::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C = op(A) * op(B) (or C += when accumulate). A is M x K after op, B is K x N.
template <class T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
          const T* a, const T* b, T* c, bool accumulate) {
  using Map = Eigen::Map<RowMat<T>>;
  using CMap = Eigen::Map<const RowMat<T>>;
  Map cm(c, m, n);
  if (!accumulate) cm.setZero();
  if (!trans_a && !trans_b) {
    cm.noalias() += CMap(a, m, k) * CMap(b, k, n);
  } else if (trans_a && !trans_b) {
    cm.noalias() += CMap(a, k, m).transpose() * CMap(b, k, n);
  } else if (!trans_a && trans_b) {
    cm.noalias() += CMap(a, m, k) * CMap(b, n, k).transpose();
  } else {
    cm.noalias() += CMap(a, k, m).transpose() * CMap(b, n, k).transpose();
  }
}

inline void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ShapeError(std::string(op) + ": dtype mismatch (" + std::string(dtype_name(a.dtype())) +
                     " vs " + std::string(dtype_name(b.dtype())) + ")");
  }
}

inline void require_rank(const Tensor& x, int rank, const char* op) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

inline std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] =
        s[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return s;
}

}  // namespace mrfn::detail
