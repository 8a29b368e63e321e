#include "c2sti/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace c2sti {

const char* dtype_name(DType dt) { return dt == DType::F32 ? "f32" : "f64"; }

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;

std::int64_t flat_index(const Shape& shape, std::initializer_list<std::int64_t> idx) {
  if (idx.size() != shape.size()) {
    throw ShapeError("index rank " + std::to_string(idx.size()) + " does not match tensor rank " +
                     std::to_string(shape.size()));
  }
  std::int64_t off = 0;
  std::size_t d = 0;
  for (auto i : idx) {
    if (i < 0 || i >= shape[d]) throw ShapeError("index out of range for shape " + shape_str(shape));
    off = off * shape[d] + i;
    ++d;
  }
  return off;
}
}  // namespace

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

namespace detail {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, DType dt) {
  for (auto e : shape) {
    if (e <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dt;
  const auto n = static_cast<std::size_t>(numel_of(shape));
  if (dt == DType::F32) {
    impl->data = std::vector<float>(n, 0.0f);
  } else {
    impl->data = std::vector<double>(n, 0.0);
  }
  return impl;
}

bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!GradMode::enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t && t->defined() && t->requires_grad(); });
}

bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!GradMode::enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.defined() && t.requires_grad(); });
}

void attach(Tensor& out, std::string name, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> backward) {
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
}

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw Error(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                dtype_name(b.dtype()) + ")");
  }
}

}  // namespace detail

Tensor Tensor::zeros(const Shape& shape, DType dt) { return Tensor(detail::make_impl(shape, dt)); }

Tensor Tensor::full(const Shape& shape, double value, DType dt) {
  Tensor t = zeros(shape, dt);
  dispatch(dt, [&]<typename T>() { std::fill(t.data<T>().begin(), t.data<T>().end(), T(value)); });
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::span<const double> values, DType dt) {
  Tensor t = zeros(shape, dt);
  if (static_cast<std::int64_t>(values.size()) != t.numel()) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  }
  dispatch(dt, [&]<typename T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from_vector(const Shape& shape, std::initializer_list<double> values, DType dt) {
  return from_vector(shape, std::span<const double>(values.begin(), values.size()), dt);
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int n = ndim();
  if (axis < 0) axis += n;
  if (axis < 0 || axis >= n) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(axis)];
}

DType Tensor::dtype() const { return impl_->dtype; }

double Tensor::flat(std::int64_t i) const {
  return dispatch(dtype(), [&]<typename T>() -> double { return data<T>()[static_cast<std::size_t>(i)]; });
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const { return flat(flat_index(shape(), idx)); }

void Tensor::set_flat(std::int64_t i, double v) {
  dispatch(dtype(), [&]<typename T>() { data<T>()[static_cast<std::size_t>(i)] = static_cast<T>(v); });
}

void Tensor::set(std::initializer_list<std::int64_t> idx, double v) { set_flat(flat_index(shape(), idx), v); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return flat(0);
}

std::vector<double> Tensor::to_vector() const {
  return dispatch(dtype(), [&]<typename T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_->node && !flag) throw Error("cannot clear requires_grad on a non-leaf tensor; use detach()");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::has_grad() const { return impl_->grad.has_value(); }

Tensor Tensor::grad() const {
  if (!impl_->grad) throw Error("tensor has no accumulated gradient");
  auto g = std::make_shared<detail::TensorImpl>();
  g->shape = impl_->shape;
  g->dtype = impl_->dtype;
  g->data = *impl_->grad;
  return Tensor(std::move(g));
}

void Tensor::clear_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
  auto d = std::make_shared<detail::TensorImpl>();
  d->shape = impl_->shape;
  d->dtype = impl_->dtype;
  d->data = impl_->data;
  return Tensor(std::move(d));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType dt) const {
  if (dt == dtype()) return detach();
  Tensor out = zeros(shape(), dt);
  dispatch(dtype(), [&]<typename S>() {
    dispatch(dt, [&]<typename D>() {
      auto src = data<S>();
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

void Tensor::copy_from(const Tensor& src) {
  if (src.shape() != shape()) {
    throw ShapeError("copy_from: shape " + shape_str(src.shape()) + " into " + shape_str(shape()));
  }
  dispatch(src.dtype(), [&]<typename S>() {
    dispatch(dtype(), [&]<typename D>() {
      auto s = src.data<S>();
      auto d = data<D>();
      for (std::size_t i = 0; i < s.size(); ++i) d[i] = static_cast<D>(s[i]);
    });
  });
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!requires_grad()) throw Error("backward() on a tensor that does not require grad");

  // Reverse topological order via iterative post-order DFS.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* n = node->node.get();
    if (n && next < n->inputs.size()) {
      auto* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  dispatch(dtype(), [&]<typename T>() { impl_->grad_values<T>()[0] += T(1); });
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* t = *it;
    if (!t->node || !t->grad) continue;
    t->node->backward(*t);
    // Interior gradients are final once propagated.
    t->grad.reset();
  }
}

}  // namespace c2sti
