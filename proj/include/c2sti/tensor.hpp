#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace c2sti {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

const char* dtype_name(DType dt);

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Invoke `fn.template operator()<T>()` with T = float or double.
template <typename Fn>
decltype(auto) dispatch(DType dt, Fn&& fn) {
  if (dt == DType::F32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

namespace detail {

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

struct TensorImpl;

struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the grads of `inputs`.
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  DType dtype = DType::F32;
  Buffer data;
  std::optional<Buffer> grad;
  std::shared_ptr<Node> node;
  bool requires_grad = false;

  template <typename T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(data);
  }
  template <typename T>
  const std::vector<T>& values() const {
    return std::get<std::vector<T>>(data);
  }
  // Lazily allocates a zero gradient buffer.
  template <typename T>
  std::vector<T>& grad_values() {
    if (!grad) grad = Buffer(std::vector<T>(values<T>().size(), T(0)));
    return std::get<std::vector<T>>(*grad);
  }
};

}  // namespace detail

/// Dense row-major tensor with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Use clone()
/// for a deep copy and detach() for a handle that is cut from the graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dt = DType::F32);
  static Tensor full(const Shape& shape, double value, DType dt = DType::F32);
  static Tensor from_vector(const Shape& shape, std::span<const double> values,
                            DType dt = DType::F32);
  static Tensor from_vector(const Shape& shape, std::initializer_list<double> values,
                            DType dt = DType::F32);
  static Tensor scalar(double value, DType dt = DType::F32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const { return numel_of(shape()); }
  DType dtype() const;

  template <typename T>
  std::span<T> data() {
    return std::span<T>(impl_->values<T>());
  }
  template <typename T>
  std::span<const T> data() const {
    return std::span<const T>(impl_->values<T>());
  }

  /// Element at a flat row-major index, widened to double.
  double flat(std::int64_t i) const;
  /// Element at a multi-index, widened to double.
  double at(std::initializer_list<std::int64_t> idx) const;
  void set_flat(std::int64_t i, double v);
  void set(std::initializer_list<std::int64_t> idx, double v);
  double item() const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const;
  /// Gradient as a detached tensor; throws when no gradient was accumulated.
  Tensor grad() const;
  void clear_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dt) const;
  /// Overwrite the values in place (same shape, any dtype); never tracked.
  void copy_from(const Tensor& src);

  /// Reverse-mode sweep from this scalar. Gradients accumulate across calls.
  void backward() const;

  bool is_leaf() const;

  // Internal access for op implementations.
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Thread-local switch that disables graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

std::shared_ptr<TensorImpl> make_impl(const Shape& shape, DType dt);

// True when any input is tracked and grad mode is on.
bool needs_grad(std::initializer_list<const Tensor*> inputs);
bool needs_grad(const std::vector<Tensor>& inputs);

// Attach a backward rule to `out`, recording `inputs` as parents.
void attach(Tensor& out, std::string name, std::vector<Tensor> inputs,
            std::function<void(TensorImpl&)> backward);

void check_same_dtype(const Tensor& a, const Tensor& b, const char* op);

}  // namespace detail

}  // namespace c2sti
