#include "mrfn/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace mrfn {

namespace {

thread_local bool g_grad_enabled = true;

Storage make_storage(DType dtype, std::size_t n, double value = 0.0) {
  if (dtype == DType::F32) return std::vector<float>(n, static_cast<float>(value));
  return std::vector<double>(n, value);
}

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape));
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  if (dst.shape() != src.shape()) {
    throw ShapeError("gradient shape " + shape_str(src.shape()) + " does not match " +
                     shape_str(dst.shape()));
  }
  dispatch(dst.dtype(), [&]<typename T>() {
    auto d = dst.data<T>();
    auto s = src.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
}

}  // namespace

std::string_view dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(const Shape& shape, DType dtype, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = make_storage(dtype, static_cast<std::size_t>(shape_numel(shape)));
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = make_storage(dtype, static_cast<std::size_t>(shape_numel(shape)), value);
  return Tensor(std::move(impl));
}

Tensor Tensor::from_vector(const Shape& shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  Tensor t = zeros(shape, dtype);
  dispatch(dtype, [&]<typename T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::initializer_list<double> values,
                           DType dtype) {
  return from_vector(shape, std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev, DType dtype) {
  Tensor t = zeros(shape, dtype);
  std::normal_distribution<double> dist(0.0, stddev);
  dispatch(dtype, [&]<typename T>() {
    for (auto& v : t.data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

Tensor Tensor::uniform(const Shape& shape, std::mt19937_64& rng, double lo, double hi,
                       DType dtype) {
  Tensor t = zeros(shape, dtype);
  std::uniform_real_distribution<double> dist(lo, hi);
  dispatch(dtype, [&]<typename T>() {
    for (auto& v : t.data<T>()) v = static_cast<T>(dist(rng));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::from_storage(const Shape& shape, Storage data) {
  check_shape(shape);
  const auto n = std::visit([](const auto& v) { return v.size(); }, data);
  if (static_cast<std::int64_t>(n) != shape_numel(shape)) {
    throw ShapeError("from_storage: " + std::to_string(n) + " elements for shape " +
                     shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

std::int64_t Tensor::numel() const { return shape_numel(impl_->shape); }

DType Tensor::dtype() const {
  return std::holds_alternative<std::vector<float>>(impl_->data) ? DType::F32 : DType::F64;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return dispatch(dtype(), [&]<typename T>() { return static_cast<double>(data<T>()[0]); });
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) throw ShapeError("at(): rank mismatch");
  std::int64_t flat = 0;
  int axis = 0;
  for (auto i : index) {
    const auto d = impl_->shape[static_cast<std::size_t>(axis++)];
    if (i < 0 || i >= d) throw ShapeError("at(): index out of range");
    flat = flat * d + i;
  }
  return dispatch(dtype(), [&]<typename T>() {
    return static_cast<double>(data<T>()[static_cast<std::size_t>(flat)]);
  });
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<typename T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (impl_->grad_fn) throw AutogradError("set_requires_grad on a non-leaf tensor");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

Tensor Tensor::grad() const { return impl_->grad; }

bool Tensor::has_grad() const { return impl_->grad.defined(); }

void Tensor::zero_grad() { impl_->grad = Tensor(); }

void Tensor::accumulate_grad(const Tensor& g) {
  if (!impl_->grad.defined()) {
    impl_->grad = g.clone();
  } else {
    add_into(impl_->grad, g);
  }
}

const std::shared_ptr<Node>& Tensor::grad_fn() const { return impl_->grad_fn; }

void Tensor::set_grad_fn(std::shared_ptr<Node> node) {
  impl_->grad_fn = std::move(node);
  impl_->requires_grad = impl_->grad_fn != nullptr || impl_->requires_grad;
}

Tensor Tensor::detach() const { return clone(); }

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Tensor out = zeros(shape(), target);
  dispatch(dtype(), [&]<typename S>() {
    auto src = data<S>();
    dispatch(target, [&]<typename D>() {
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

void Tensor::copy_from(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ShapeError("copy_from: " + shape_str(other.shape()) + " into " + shape_str(shape()));
  }
  if (other.dtype() == dtype()) {
    impl_->data = other.impl_->data;
  } else {
    impl_->data = other.to(dtype()).impl_->data;
  }
}

void Tensor::fill(double value) {
  dispatch(dtype(), [&]<typename T>() {
    for (auto& v : data<T>()) v = static_cast<T>(value);
  });
}

void Tensor::backward() const { mrfn::backward(*this); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool record(Tensor& out, std::string op, std::vector<Tensor> inputs,
            std::function<std::vector<Tensor>(const Tensor&)> rule) {
  if (!g_grad_enabled) return false;
  const bool needed = std::any_of(inputs.begin(), inputs.end(),
                                  [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!needed) return false;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(rule);
  out.set_grad_fn(std::move(node));
  return true;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutogradError("backward needs a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw AutogradError("loss is not attached to any tape");

  // Post-order DFS gives a topological order of tensors (inputs before outputs).
  std::vector<Tensor> order;
  std::unordered_set<const TensorImpl*> visited;
  struct Frame {
    Tensor t;
    std::size_t next;
  };
  std::vector<Frame> stack{{loss, 0}};
  visited.insert(loss.impl());
  while (!stack.empty()) {
    Frame& top = stack.back();
    const auto& fn = top.t.grad_fn();
    if (fn && fn->released) {
      throw AutogradError("graph for op '" + fn->op +
                          "' was already released by an earlier backward()");
    }
    if (fn && top.next < fn->inputs.size()) {
      const Tensor& child = fn->inputs[top.next++];
      if (child.defined() && child.requires_grad() && !visited.count(child.impl())) {
        visited.insert(child.impl());
        stack.push_back({child, 0});
      }
      continue;
    }
    order.push_back(top.t);
    stack.pop_back();
  }

  std::unordered_map<const TensorImpl*, Tensor> grads;
  grads[loss.impl()] = Tensor::full(loss.shape(), 1.0, loss.dtype());

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Tensor& t = *it;
    auto found = grads.find(t.impl());
    if (found == grads.end()) continue;
    Tensor g = found->second;
    grads.erase(found);
    const auto& fn = t.grad_fn();
    if (!fn) {
      Tensor leaf = t;
      leaf.accumulate_grad(g);
      continue;
    }
    auto input_grads = fn->backward(g);
    for (std::size_t i = 0; i < fn->inputs.size() && i < input_grads.size(); ++i) {
      const Tensor& in = fn->inputs[i];
      if (!in.defined() || !in.requires_grad() || !input_grads[i].defined()) continue;
      auto slot = grads.find(in.impl());
      if (slot == grads.end()) {
        grads.emplace(in.impl(), input_grads[i]);
      } else {
        // Rules may hand out aliases of grad_out, so never accumulate in place.
        Tensor sum = slot->second.clone();
        add_into(sum, input_grads[i]);
        slot->second = sum;
      }
    }
  }

  for (const Tensor& t : order) {
    if (const auto& fn = t.grad_fn()) {
      fn->released = true;
      fn->inputs.clear();
      fn->backward = nullptr;
    }
  }
}

}  // namespace mrfn
