#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace mrfn {

enum class DType : std::uint8_t { F32, F64 };

std::string_view dtype_name(DType dt);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for incompatible shapes or invalid layer configuration.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for misuse of the tape (non-scalar loss, released graph).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Storage = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;
struct Node;

/// Shared handle to a dense row-major array with an optional gradient.
///
/// Copies are shallow: two handles refer to the same buffer. Ops never mutate
/// their inputs, so aliasing is only observable through the explicit mutable
/// accessors.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::F32, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::F32);
  static Tensor from_vector(const Shape& shape, std::span<const double> values,
                            DType dtype = DType::F32);
  static Tensor from_vector(const Shape& shape, std::initializer_list<double> values,
                            DType dtype = DType::F32);
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev = 1.0,
                      DType dtype = DType::F32);
  static Tensor uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                        DType dtype = DType::F32);
  static Tensor scalar(double value, DType dtype = DType::F32);
  /// Takes ownership of `data`; its length must equal the product of `shape`.
  static Tensor from_storage(const Shape& shape, Storage data);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const;
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<T> data();
  template <class T>
  std::span<const T> data() const;

  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  /// Only valid on leaves; marks the tensor as a trainable parameter.
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  /// Accumulated gradient; undefined until a backward pass reaches this leaf.
  Tensor grad() const;
  bool has_grad() const;
  void zero_grad();
  void accumulate_grad(const Tensor& g);

  const std::shared_ptr<Node>& grad_fn() const;
  void set_grad_fn(std::shared_ptr<Node> node);

  /// New leaf sharing nothing with the tape (data is copied).
  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  /// Overwrite elements in place (leaf tensors only, used by optimizers/loaders).
  void copy_from(const Tensor& other);
  void fill(double value);

  void backward() const;

  TensorImpl* impl() const { return impl_.get(); }
  bool same_as(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

/// One recorded op on the tape; owns its inputs and the rule that maps the
/// output gradient to input gradients (undefined tensors for inputs that do
/// not need one).
struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<std::vector<Tensor>(const Tensor& grad_out)> backward;
  bool released = false;
};

struct TensorImpl {
  Shape shape;
  Storage data;
  Tensor grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

template <class T>
std::span<T> Tensor::data() {
  auto* vec = std::get_if<std::vector<T>>(&impl_->data);
  if (vec == nullptr) throw std::logic_error("tensor dtype mismatch in data access");
  return {vec->data(), vec->size()};
}

template <class T>
std::span<const T> Tensor::data() const {
  const auto* vec = std::get_if<std::vector<T>>(&impl_->data);
  if (vec == nullptr) throw std::logic_error("tensor dtype mismatch in data access");
  return {vec->data(), vec->size()};
}

/// Invoke `fn.template operator()<T>()` with T = float or double.
template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::F32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

template <class T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

bool grad_enabled();

/// Disables tape recording for the lifetime of the guard (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode sweep from a scalar. Releases the graph afterwards, so a second
/// call on the same loss raises AutogradError.
void backward(const Tensor& loss);

/// Attach a tape node to `out` when recording is on and any input needs grad.
/// Returns true if the node was attached.
bool record(Tensor& out, std::string op, std::vector<Tensor> inputs,
            std::function<std::vector<Tensor>(const Tensor&)> rule);

}  // namespace mrfn
