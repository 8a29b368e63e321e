#include "c2sti/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "c2sti/parallel.hpp"

namespace c2sti {

using detail::TensorImpl;

namespace {

template <typename T>
T* grad_ptr(const Tensor& t) {
  return t.requires_grad() ? t.impl()->grad_values<T>().data() : nullptr;
}

template <typename T>
const T* out_grad(TensorImpl& out) {
  return out.grad_values<T>().data();
}

int norm_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw ShapeError(std::string(op) + ": axis out of range");
  return axis;
}

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int d = static_cast<int>(s.size()) - 2; d >= 0; --d) st[d] = st[d + 1] * s[d + 1];
  return st;
}

// Strides of `in` as seen from the broadcast output shape `out` (0 on broadcast axes).
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto nd = out.size();
  const auto off = nd - in.size();
  const auto cs = contiguous_strides(in);
  std::vector<std::int64_t> st(nd, 0);
  for (std::size_t d = 0; d < in.size(); ++d) {
    st[d + off] = (in[d] == 1 && out[d + off] != 1) ? 0 : cs[d];
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const auto nd = std::max(a.size(), b.size());
  Shape out(nd, 1);
  for (std::size_t i = 0; i < nd; ++i) {
    const std::int64_t ea = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
    const std::int64_t eb = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Calls f(io, ia, ib) for every output element.
template <typename F>
void broadcast_loop(const Shape& out, const std::vector<std::int64_t>& sa,
                    const std::vector<std::int64_t>& sb, F&& f) {
  const int nd = static_cast<int>(out.size());
  const std::int64_t n = numel_of(out);
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t ia = 0;
  std::int64_t ib = 0;
  for (std::int64_t io = 0; io < n; ++io) {
    f(io, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  detail::check_same_dtype(a, b, name);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out.data<T>().data();
    switch (op) {
      case BinOp::Add:
        broadcast_loop(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] + pb[ib]; });
        break;
      case BinOp::Sub:
        broadcast_loop(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] - pb[ib]; });
        break;
      case BinOp::Mul:
        broadcast_loop(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] * pb[ib]; });
        break;
      case BinOp::Div:
        broadcast_loop(out_shape, sa, sb, [&](auto io, auto ia, auto ib) { po[io] = pa[ia] / pb[ib]; });
        break;
    }
  });
  if (detail::needs_grad({&a, &b})) {
    detail::attach(out, name, {a, b}, [a, b, op, out_shape, sa, sb](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        T* ga = grad_ptr<T>(a);
        T* gb = grad_ptr<T>(b);
        broadcast_loop(out_shape, sa, sb, [&](auto io, auto ia, auto ib) {
          const T gi = g[io];
          switch (op) {
            case BinOp::Add:
              if (ga) ga[ia] += gi;
              if (gb) gb[ib] += gi;
              break;
            case BinOp::Sub:
              if (ga) ga[ia] += gi;
              if (gb) gb[ib] -= gi;
              break;
            case BinOp::Mul:
              if (ga) ga[ia] += gi * pb[ib];
              if (gb) gb[ib] += gi * pa[ia];
              break;
            case BinOp::Div:
              if (ga) ga[ia] += gi / pb[ib];
              if (gb) gb[ib] -= gi * pa[ia] / (pb[ib] * pb[ib]);
              break;
          }
        });
      });
    });
  }
  return out;
}

// Element-wise unary op. fwd(x) -> y, dfdx(x, y) -> derivative.
template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, const char* name, Fwd fwd, Deriv dfdx) {
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto in = a.data<T>();
    auto o = out.data<T>();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = static_cast<T>(fwd(static_cast<double>(in[i])));
  });
  if (detail::needs_grad({&a})) {
    Tensor saved = out.detach();
    detail::attach(out, name, {a}, [a, saved, dfdx](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        auto in = a.data<T>();
        auto y = saved.data<T>();
        T* ga = grad_ptr<T>(a);
        for (std::size_t i = 0; i < in.size(); ++i) {
          ga[i] += g[i] * static_cast<T>(dfdx(static_cast<double>(in[i]), static_cast<double>(y[i])));
        }
      });
    });
  }
  return out;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Per-axis reduction plan: output index stride for each input axis.
struct ReducePlan {
  Shape out_keep;  // output shape with reduced axes kept as 1
  std::vector<std::int64_t> in_to_out;
  std::int64_t count = 1;
};

ReducePlan reduce_plan(const Shape& in, const std::vector<int>& dims, const char* op) {
  ReducePlan p;
  p.out_keep = in;
  const int nd = static_cast<int>(in.size());
  for (int d : dims) {
    const int a = norm_axis(d, nd, op);
    p.out_keep[a] = 1;
  }
  for (int a = 0; a < nd; ++a) {
    if (p.out_keep[a] == 1 && in[a] != 1) p.count *= in[a];
  }
  p.in_to_out = broadcast_strides(p.out_keep, in);
  return p;
}

Tensor reduce_sum(const Tensor& a, const std::vector<int>& dims, bool keepdim, double factor,
                  const char* name) {
  const ReducePlan p = reduce_plan(a.shape(), dims, name);
  Shape out_shape = p.out_keep;
  if (!keepdim) {
    Shape squeezed;
    std::vector<bool> reduced(a.shape().size(), false);
    for (int d : dims) reduced[norm_axis(d, a.ndim(), name)] = true;
    for (std::size_t i = 0; i < out_shape.size(); ++i) {
      if (!reduced[i]) squeezed.push_back(out_shape[i]);
    }
    if (squeezed.empty()) squeezed.push_back(1);
    out_shape = squeezed;
  }
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  const std::vector<std::int64_t> unit(a.shape().size(), 0);
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    T* po = out.data<T>().data();
    broadcast_loop(a.shape(), p.in_to_out, unit, [&](auto ii, auto io, auto) { po[io] += pa[ii]; });
    if (factor != 1.0) {
      for (auto& v : out.data<T>()) v = static_cast<T>(v * factor);
    }
  });
  if (detail::needs_grad({&a})) {
    detail::attach(out, name, {a}, [a, p, unit, factor](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* ga = grad_ptr<T>(a);
        const T f = static_cast<T>(factor);
        broadcast_loop(a.shape(), p.in_to_out, unit, [&](auto ii, auto io, auto) { ga[ii] += g[io] * f; });
      });
    });
  }
  return out;
}

void check_rank(const Tensor& t, int rank, const char* op, const char* what) {
  if (t.ndim() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must be rank " + std::to_string(rank) +
                     ", got " + shape_str(t.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Div, "div"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, "add_scalar", [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
  return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
               [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(a, "sigmoid", sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(a, "softplus",
               [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
               [](double x, double) { return sigmoid_scalar(x); });
}

Tensor abs(const Tensor& a) {
  return unary(a, "abs", [](double x) { return std::abs(x); },
               [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Shape out_shape = broadcast_shape(a.shape(), shape, "broadcast_to");
  if (out_shape != shape) {
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " does not broadcast to " + shape_str(shape));
  }
  const auto sa = broadcast_strides(a.shape(), shape);
  const std::vector<std::int64_t> unit(shape.size(), 0);
  Tensor out = Tensor::zeros(shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    T* po = out.data<T>().data();
    broadcast_loop(shape, sa, unit, [&](auto io, auto ia, auto) { po[io] = pa[ia]; });
  });
  if (detail::needs_grad({&a})) {
    detail::attach(out, "broadcast_to", {a}, [a, shape, sa, unit](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* ga = grad_ptr<T>(a);
        broadcast_loop(shape, sa, unit, [&](auto io, auto ia, auto) { ga[ia] += g[io]; });
      });
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  std::vector<int> dims(a.shape().size());
  std::iota(dims.begin(), dims.end(), 0);
  return reduce_sum(a, dims, false, 1.0, "sum");
}

Tensor mean(const Tensor& a) {
  std::vector<int> dims(a.shape().size());
  std::iota(dims.begin(), dims.end(), 0);
  return reduce_sum(a, dims, false, 1.0 / static_cast<double>(a.numel()), "mean");
}

Tensor sum_dims(const Tensor& a, const std::vector<int>& dims, bool keepdim) {
  return reduce_sum(a, dims, keepdim, 1.0, "sum_dims");
}

Tensor mean_dims(const Tensor& a, const std::vector<int>& dims, bool keepdim) {
  const auto p = reduce_plan(a.shape(), dims, "mean_dims");
  return reduce_sum(a, dims, keepdim, 1.0 / static_cast<double>(p.count), "mean_dims");
}

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out = Tensor::zeros(shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() { std::copy(a.data<T>().begin(), a.data<T>().end(), out.data<T>().begin()); });
  if (detail::needs_grad({&a})) {
    detail::attach(out, "reshape", {a}, [a](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* ga = grad_ptr<T>(a);
        for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += g[i];
      });
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  axis = norm_axis(axis, nd, "concat");
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    detail::check_same_dtype(parts[0], p, "concat");
    if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
    for (int d = 0; d < nd; ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        throw ShapeError("concat: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()) +
                         " along axis " + std::to_string(axis));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  std::int64_t inner = 1;
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[d];
  const std::int64_t out_row = out_shape[axis] * inner;

  Tensor out = Tensor::zeros(out_shape, parts[0].dtype());
  dispatch(out.dtype(), [&]<typename T>() {
    T* po = out.data<T>().data();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const T* pp = p.data<T>().data();
      const std::int64_t row = p.shape()[axis] * inner;
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy(pp + o * row, pp + (o + 1) * row, po + o * out_row + offset);
      }
      offset += row;
    }
  });
  if (detail::needs_grad(parts)) {
    detail::attach(out, "concat", parts, [parts, axis, outer, inner, out_row](TensorImpl& o) {
      dispatch(parts[0].dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        std::int64_t offset = 0;
        for (const auto& p : parts) {
          const std::int64_t row = p.shape()[axis] * inner;
          if (T* gp = grad_ptr<T>(p)) {
            for (std::int64_t k = 0; k < outer; ++k) {
              for (std::int64_t i = 0; i < row; ++i) gp[k * row + i] += g[k * out_row + offset + i];
            }
          }
          offset += row;
        }
      });
    });
  }
  return out;
}

Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  const int nd = a.ndim();
  axis = norm_axis(axis, nd, "narrow");
  if (start < 0 || length <= 0 || start + length > a.shape()[axis]) {
    throw ShapeError("narrow: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of bounds for " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  std::int64_t outer = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  std::int64_t inner = 1;
  for (int d = axis + 1; d < nd; ++d) inner *= out_shape[d];
  const std::int64_t in_row = a.shape()[axis] * inner;
  const std::int64_t out_row = length * inner;
  const std::int64_t skip = start * inner;

  Tensor out = Tensor::zeros(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(pa + o * in_row + skip, pa + o * in_row + skip + out_row, po + o * out_row);
    }
  });
  if (detail::needs_grad({&a})) {
    detail::attach(out, "narrow", {a}, [a, outer, in_row, out_row, skip](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* ga = grad_ptr<T>(a);
        for (std::int64_t k = 0; k < outer; ++k) {
          for (std::int64_t i = 0; i < out_row; ++i) ga[k * in_row + skip + i] += g[k * out_row + i];
        }
      });
    });
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  check_rank(a, 2, "transpose2d", "input");
  const auto rows = a.dim(0);
  const auto cols = a.dim(1);
  Tensor out = Tensor::zeros({cols, rows}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j) po[j * rows + i] = pa[i * cols + j];
  });
  if (detail::needs_grad({&a})) {
    detail::attach(out, "transpose2d", {a}, [a, rows, cols](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* ga = grad_ptr<T>(a);
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < cols; ++j) ga[i * cols + j] += g[j * rows + i];
      });
    });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank(a, 2, "matmul", "lhs");
  check_rank(b, 2, "matmul", "rhs");
  detail::check_same_dtype(a, b, "matmul");
  const auto m = a.dim(0);
  const auto k = a.dim(1);
  const auto n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n}, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = pa[i * k + p];
        for (std::int64_t j = 0; j < n; ++j) po[i * n + j] += av * pb[p * n + j];
      }
  });
  if (detail::needs_grad({&a, &b})) {
    detail::attach(out, "matmul", {a, b}, [a, b, m, k, n](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        const T* pa = a.data<T>().data();
        const T* pb = b.data<T>().data();
        if (T* ga = grad_ptr<T>(a)) {
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
              T acc = 0;
              for (std::int64_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
              ga[i * k + p] += acc;
            }
        }
        if (T* gb = grad_ptr<T>(b)) {
          for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
              const T av = pa[i * k + p];
              for (std::int64_t j = 0; j < n; ++j) gb[p * n + j] += av * g[i * n + j];
            }
        }
      });
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  check_rank(weight, 2, "linear", "weight");
  if (x.ndim() != 2 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  Tensor y = matmul(x, transpose2d(weight));
  if (bias.defined()) y = add(y, reshape(bias, {1, weight.dim(0)}));
  return y;
}

namespace {

// Valid output range [lo, hi) for a kernel tap so that lo*stride + tap - pad in [0, extent).
inline void tap_range(std::int64_t out_extent, std::int64_t in_extent, int stride, int pad,
                      std::int64_t tap, std::int64_t& lo, std::int64_t& hi) {
  // o*stride + tap - pad >= 0  ->  o >= ceil((pad - tap)/stride)
  const std::int64_t num = pad - tap;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  // o*stride + tap - pad <= in_extent - 1
  const std::int64_t top = in_extent - 1 + pad - tap;
  hi = top < 0 ? 0 : std::min(out_extent, top / stride + 1);
  if (hi < lo) hi = lo;
}

// cols[(ci*kh + ky)*kw + kx][oy*Wo + ox], zero where the tap lands in padding
template <typename T>
void im2col(const T* ip, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
            int stride, int padding, std::int64_t Ho, std::int64_t Wo, T* cols) {
  const std::int64_t N = Ho * Wo;
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      std::int64_t ylo, yhi;
      tap_range(Ho, H, stride, padding, ky, ylo, yhi);
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        std::int64_t xlo, xhi;
        tap_range(Wo, W, stride, padding, kx, xlo, xhi);
        T* row = cols + ((ci * kh + ky) * kw + kx) * N;
        std::fill(row, row + N, T(0));
        const T* src = ip + ci * H * W;
        for (std::int64_t oy = ylo; oy < yhi; ++oy) {
          const T* irow = src + (oy * stride + ky - padding) * W + kx - padding;
          T* orow = row + oy * Wo;
          for (std::int64_t ox = xlo; ox < xhi; ++ox) orow[ox] = irow[ox * stride];
        }
      }
    }
}

// same patches laid out [n][k]
template <typename T>
void im2col_t(const T* ip, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
              int stride, int padding, std::int64_t Ho, std::int64_t Wo, T* cols) {
  const std::int64_t K = Cin * kh * kw;
  std::fill(cols, cols + Ho * Wo * K, T(0));
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      std::int64_t ylo, yhi;
      tap_range(Ho, H, stride, padding, ky, ylo, yhi);
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        std::int64_t xlo, xhi;
        tap_range(Wo, W, stride, padding, kx, xlo, xhi);
        const std::int64_t k = (ci * kh + ky) * kw + kx;
        const T* src = ip + ci * H * W;
        for (std::int64_t oy = ylo; oy < yhi; ++oy) {
          const T* irow = src + (oy * stride + ky - padding) * W + kx - padding;
          for (std::int64_t ox = xlo; ox < xhi; ++ox) cols[(oy * Wo + ox) * K + k] = irow[ox * stride];
        }
      }
    }
}

template <typename T>
void col2im(const T* cols, std::int64_t Cin, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
            int stride, int padding, std::int64_t Ho, std::int64_t Wo, T* gp) {
  const std::int64_t N = Ho * Wo;
  for (std::int64_t ci = 0; ci < Cin; ++ci)
    for (std::int64_t ky = 0; ky < kh; ++ky) {
      std::int64_t ylo, yhi;
      tap_range(Ho, H, stride, padding, ky, ylo, yhi);
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        std::int64_t xlo, xhi;
        tap_range(Wo, W, stride, padding, kx, xlo, xhi);
        const T* row = cols + ((ci * kh + ky) * kw + kx) * N;
        T* dst = gp + ci * H * W;
        for (std::int64_t oy = ylo; oy < yhi; ++oy) {
          T* irow = dst + (oy * stride + ky - padding) * W + kx - padding;
          const T* crow = row + oy * Wo;
          for (std::int64_t ox = xlo; ox < xhi; ++ox) irow[ox * stride] += crow[ox];
        }
      }
    }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding) {
  check_rank(input, 4, "conv2d", "input");
  check_rank(weight, 4, "conv2d", "weight");
  detail::check_same_dtype(input, weight, "conv2d");
  const auto B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Cin) {
    throw ShapeError("conv2d: input has " + std::to_string(Cin) + " channels but weight " +
                     shape_str(weight.shape()) + " expects " + std::to_string(weight.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd, got " + shape_str(weight.shape()));
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride must be >= 1 and padding >= 0");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(Cout) + " outputs");
  }
  const std::int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  const std::int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: input " + shape_str(input.shape()) + " too small for kernel");

  const std::int64_t K = Cin * kh * kw, N = Ho * Wo;
  Tensor out = Tensor::zeros({B, Cout, Ho, Wo}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* in = input.data<T>().data();
    const T* w = weight.data<T>().data();
    const T* bp = bias.defined() ? bias.data<T>().data() : nullptr;
    T* po = out.data<T>().data();
    std::vector<T> cols(static_cast<std::size_t>(K * N));
    for (std::int64_t b = 0; b < B; ++b) {
      im2col(in + b * Cin * H * W, Cin, H, W, kh, kw, stride, padding, Ho, Wo, cols.data());
      parallel_for(Cout, [&](std::int64_t begin, std::int64_t end) {
        for (std::int64_t co = begin; co < end; ++co) {
          T* op = po + (b * Cout + co) * N;
          if (bp) std::fill(op, op + N, bp[co]);
          const T* wr = w + co * K;
          for (std::int64_t k = 0; k < K; ++k) {
            const T wv = wr[k];
            const T* cr = cols.data() + k * N;
            for (std::int64_t n = 0; n < N; ++n) op[n] += wv * cr[n];
          }
        }
      }, 4);
    }
  });

  if (detail::needs_grad({&input, &weight, &bias})) {
    std::vector<Tensor> parents{input, weight};
    if (bias.defined()) parents.push_back(bias);
    detail::attach(out, "conv2d", parents, [=](TensorImpl& o) {
      dispatch(input.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        const T* in = input.data<T>().data();
        const T* w = weight.data<T>().data();
        if (T* gi = grad_ptr<T>(input)) {
          std::vector<T> gcols(static_cast<std::size_t>(K * N));
          for (std::int64_t b = 0; b < B; ++b) {
            const T* gb = g + b * Cout * N;
            parallel_for(K, [&](std::int64_t begin, std::int64_t end) {
              for (std::int64_t k = begin; k < end; ++k) {
                T* gr = gcols.data() + k * N;
                std::fill(gr, gr + N, T(0));
                for (std::int64_t co = 0; co < Cout; ++co) {
                  const T wv = w[co * K + k];
                  const T* grow = gb + co * N;
                  for (std::int64_t n = 0; n < N; ++n) gr[n] += wv * grow[n];
                }
              }
            }, 8);
            col2im(gcols.data(), Cin, H, W, kh, kw, stride, padding, Ho, Wo, gi + b * Cin * H * W);
          }
        }
        if (T* gw = grad_ptr<T>(weight)) {
          std::vector<T> colsT(static_cast<std::size_t>(N * K));
          for (std::int64_t b = 0; b < B; ++b) {
            im2col_t(in + b * Cin * H * W, Cin, H, W, kh, kw, stride, padding, Ho, Wo, colsT.data());
            const T* gb = g + b * Cout * N;
            parallel_for(Cout, [&](std::int64_t begin, std::int64_t end) {
              for (std::int64_t co = begin; co < end; ++co) {
                T* gwr = gw + co * K;
                const T* grow = gb + co * N;
                for (std::int64_t n = 0; n < N; ++n) {
                  const T gv = grow[n];
                  if (gv == T(0)) continue;
                  const T* cr = colsT.data() + n * K;
                  for (std::int64_t k = 0; k < K; ++k) gwr[k] += gv * cr[k];
                }
              }
            });
          }
        }
        if (bias.defined()) {
          if (T* gb = grad_ptr<T>(bias)) {
            for (std::int64_t co = 0; co < Cout; ++co) {
              T acc = 0;
              for (std::int64_t b = 0; b < B; ++b) {
                const T* gop = g + (b * Cout + co) * N;
                for (std::int64_t i = 0; i < N; ++i) acc += gop[i];
              }
              gb[co] += acc;
            }
          }
        }
      });
    });
  }
  return out;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, int padding) {
  check_rank(input, 4, "depthwise_conv2d", "input");
  check_rank(kernel, 3, "depthwise_conv2d", "kernel");
  detail::check_same_dtype(input, kernel, "depthwise_conv2d");
  const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto kh = kernel.dim(1), kw = kernel.dim(2);
  if (kernel.dim(0) != C) {
    throw ShapeError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) + " for " + std::to_string(C) +
                     " channels");
  }
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("depthwise_conv2d: kernel extents must be odd, got " + shape_str(kernel.shape()));
  }
  if (padding < 0) throw ShapeError("depthwise_conv2d: negative padding");
  const std::int64_t Ho = H + 2 * padding - kh + 1;
  const std::int64_t Wo = W + 2 * padding - kw + 1;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("depthwise_conv2d: input too small for kernel");

  Tensor out = Tensor::zeros({B, C, Ho, Wo}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* in = input.data<T>().data();
    const T* k = kernel.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      const std::int64_t c = bc % C;
      const T* ip = in + bc * H * W;
      T* op = po + bc * Ho * Wo;
      for (std::int64_t ky = 0; ky < kh; ++ky) {
        std::int64_t ylo, yhi;
        tap_range(Ho, H, 1, padding, ky, ylo, yhi);
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          std::int64_t xlo, xhi;
          tap_range(Wo, W, 1, padding, kx, xlo, xhi);
          const T kv = k[(c * kh + ky) * kw + kx];
          for (std::int64_t oy = ylo; oy < yhi; ++oy) {
            const T* row = ip + (oy + ky - padding) * W + kx - padding;
            T* orow = op + oy * Wo;
            for (std::int64_t ox = xlo; ox < xhi; ++ox) orow[ox] += kv * row[ox];
          }
        }
      }
    }
  });
  if (detail::needs_grad({&input, &kernel})) {
    detail::attach(out, "depthwise_conv2d", {input, kernel}, [=](TensorImpl& o) {
      dispatch(input.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        const T* in = input.data<T>().data();
        const T* k = kernel.data<T>().data();
        T* gi = grad_ptr<T>(input);
        T* gk = grad_ptr<T>(kernel);
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
          const std::int64_t c = bc % C;
          const T* ip = in + bc * H * W;
          const T* gop = g + bc * Ho * Wo;
          for (std::int64_t ky = 0; ky < kh; ++ky) {
            std::int64_t ylo, yhi;
            tap_range(Ho, H, 1, padding, ky, ylo, yhi);
            for (std::int64_t kx = 0; kx < kw; ++kx) {
              std::int64_t xlo, xhi;
              tap_range(Wo, W, 1, padding, kx, xlo, xhi);
              const std::int64_t kidx = (c * kh + ky) * kw + kx;
              T acc = 0;
              for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                const std::int64_t base = (oy + ky - padding) * W + kx - padding;
                const T* grow = gop + oy * Wo;
                for (std::int64_t ox = xlo; ox < xhi; ++ox) {
                  acc += grow[ox] * ip[base + ox];
                  if (gi) gi[bc * H * W + base + ox] += k[kidx] * grow[ox];
                }
              }
              if (gk) gk[kidx] += acc;
            }
          }
        }
      });
    });
  }
  return out;
}

namespace {

// Shared index map: shuffled (B,C,H*r,W*r) element <-> unshuffled (B,C*r*r,H,W) element.
template <typename F>
void shuffle_map(std::int64_t B, std::int64_t C, std::int64_t H, std::int64_t W, int r, F&& f) {
  const std::int64_t Hr = H * r, Wr = W * r;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < r; ++j) {
          const std::int64_t src_c = c * r * r + i * r + j;
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w = 0; w < W; ++w) {
              const std::int64_t packed = ((b * C * r * r + src_c) * H + h) * W + w;
              const std::int64_t spread = ((b * C + c) * Hr + h * r + i) * Wr + w * r + j;
              f(packed, spread);
            }
        }
}

Tensor permute_copy(const Tensor& a, const Shape& out_shape, bool to_spread, std::int64_t B,
                    std::int64_t C, std::int64_t H, std::int64_t W, int r, const char* name) {
  Tensor out = Tensor::zeros(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    T* po = out.data<T>().data();
    shuffle_map(B, C, H, W, r, [&](auto packed, auto spread) {
      if (to_spread) po[spread] = pa[packed];
      else po[packed] = pa[spread];
    });
  });
  if (detail::needs_grad({&a})) {
    detail::attach(out, name, {a}, [=](TensorImpl& o) {
      dispatch(a.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* ga = grad_ptr<T>(a);
        shuffle_map(B, C, H, W, r, [&](auto packed, auto spread) {
          if (to_spread) ga[packed] += g[spread];
          else ga[spread] += g[packed];
        });
      });
    });
  }
  return out;
}

}  // namespace

Tensor pixel_shuffle(const Tensor& input, int r) {
  check_rank(input, 4, "pixel_shuffle", "input");
  if (r < 1) throw ShapeError("pixel_shuffle: factor must be >= 1");
  const auto B = input.dim(0), Cr = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (Cr % (static_cast<std::int64_t>(r) * r) != 0) {
    throw ShapeError("pixel_shuffle: " + std::to_string(Cr) + " channels not divisible by r^2=" +
                     std::to_string(r * r));
  }
  const auto C = Cr / (r * r);
  return permute_copy(input, {B, C, H * r, W * r}, true, B, C, H, W, r, "pixel_shuffle");
}

Tensor pixel_unshuffle(const Tensor& input, int r) {
  check_rank(input, 4, "pixel_unshuffle", "input");
  if (r < 1) throw ShapeError("pixel_unshuffle: factor must be >= 1");
  const auto B = input.dim(0), C = input.dim(1), Hr = input.dim(2), Wr = input.dim(3);
  if (Hr % r != 0 || Wr % r != 0) throw ShapeError("pixel_unshuffle: spatial size not divisible by r");
  const auto H = Hr / r, W = Wr / r;
  return permute_copy(input, {B, C * r * r, H, W}, false, B, C, H, W, r, "pixel_unshuffle");
}

Tensor upsample_nearest(const Tensor& input, int factor) {
  check_rank(input, 4, "upsample_nearest", "input");
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const auto Ho = H * factor, Wo = W * factor;
  Tensor out = Tensor::zeros({B, C, Ho, Wo}, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* in = input.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
      for (std::int64_t y = 0; y < Ho; ++y)
        for (std::int64_t x = 0; x < Wo; ++x)
          po[(bc * Ho + y) * Wo + x] = in[(bc * H + y / factor) * W + x / factor];
  });
  if (detail::needs_grad({&input})) {
    detail::attach(out, "upsample_nearest", {input}, [=](TensorImpl& o) {
      dispatch(input.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        T* gi = grad_ptr<T>(input);
        for (std::int64_t bc = 0; bc < B * C; ++bc)
          for (std::int64_t y = 0; y < Ho; ++y)
            for (std::int64_t x = 0; x < Wo; ++x)
              gi[(bc * H + y / factor) * W + x / factor] += g[(bc * Ho + y) * Wo + x];
      });
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input) {
  check_rank(input, 4, "global_avg_pool", "input");
  return mean_dims(input, {2, 3}, false);
}

Tensor mix_axis(const Tensor& x, const Tensor& m, int axis) {
  detail::check_same_dtype(x, m, "mix_axis");
  const int nd = x.ndim();
  axis = norm_axis(axis, nd, "mix_axis");
  const auto D = x.shape()[axis];
  const bool batched = m.ndim() == 3;
  if (!(m.ndim() == 2 || batched) || m.dim(-1) != D || m.dim(-2) != D) {
    throw ShapeError("mix_axis: matrix " + shape_str(m.shape()) + " for axis extent " + std::to_string(D));
  }
  if (batched && (axis == 0 || m.dim(0) != x.dim(0))) {
    throw ShapeError("mix_axis: batched matrix " + shape_str(m.shape()) + " for input " + shape_str(x.shape()));
  }
  std::int64_t pre = 1;
  for (int d = 0; d < axis; ++d) pre *= x.shape()[d];
  std::int64_t post = 1;
  for (int d = axis + 1; d < nd; ++d) post *= x.shape()[d];
  const std::int64_t per_batch = batched ? pre / x.dim(0) : pre;

  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    const T* px = x.data<T>().data();
    const T* pm = m.data<T>().data();
    T* po = out.data<T>().data();
    for (std::int64_t p = 0; p < pre; ++p) {
      const T* mm = batched ? pm + (p / per_batch) * D * D : pm;
      for (std::int64_t i = 0; i < D; ++i) {
        T* orow = po + (p * D + i) * post;
        for (std::int64_t j = 0; j < D; ++j) {
          const T mv = mm[i * D + j];
          const T* xrow = px + (p * D + j) * post;
          for (std::int64_t q = 0; q < post; ++q) orow[q] += mv * xrow[q];
        }
      }
    }
  });
  if (detail::needs_grad({&x, &m})) {
    detail::attach(out, "mix_axis", {x, m}, [=](TensorImpl& o) {
      dispatch(x.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        const T* px = x.data<T>().data();
        const T* pm = m.data<T>().data();
        T* gx = grad_ptr<T>(x);
        T* gm = grad_ptr<T>(m);
        for (std::int64_t p = 0; p < pre; ++p) {
          const std::int64_t moff = batched ? (p / per_batch) * D * D : 0;
          for (std::int64_t i = 0; i < D; ++i) {
            const T* grow = g + (p * D + i) * post;
            for (std::int64_t j = 0; j < D; ++j) {
              const T* xrow = px + (p * D + j) * post;
              if (gx) {
                const T mv = pm[moff + i * D + j];
                T* gxrow = gx + (p * D + j) * post;
                for (std::int64_t q = 0; q < post; ++q) gxrow[q] += mv * grow[q];
              }
              if (gm) {
                T acc = 0;
                for (std::int64_t q = 0; q < post; ++q) acc += grow[q] * xrow[q];
                gm[moff + i * D + j] += acc;
              }
            }
          }
        }
      });
    });
  }
  return out;
}

namespace {

struct Corner4 {
  std::int64_t y0, x0;
  double wy1, wx1;
};

inline Corner4 corners(double y, double x) {
  const double fy = std::floor(y);
  const double fx = std::floor(x);
  return {static_cast<std::int64_t>(fy), static_cast<std::int64_t>(fx), y - fy, x - fx};
}

template <typename T>
inline T pixel_or_zero(const T* plane, std::int64_t H, std::int64_t W, std::int64_t y, std::int64_t x) {
  return (y >= 0 && y < H && x >= 0 && x < W) ? plane[y * W + x] : T(0);
}

template <typename T>
BilinearSample sample_plane(const T* plane, std::int64_t H, std::int64_t W, double y, double x) {
  // Far outside: every corner is a zero virtual pixel.
  if (!(y > -1.0 && y < static_cast<double>(H) && x > -1.0 && x < static_cast<double>(W))) return {};
  const Corner4 c = corners(y, x);
  const double v00 = pixel_or_zero(plane, H, W, c.y0, c.x0);
  const double v01 = pixel_or_zero(plane, H, W, c.y0, c.x0 + 1);
  const double v10 = pixel_or_zero(plane, H, W, c.y0 + 1, c.x0);
  const double v11 = pixel_or_zero(plane, H, W, c.y0 + 1, c.x0 + 1);
  const double wy0 = 1.0 - c.wy1, wx0 = 1.0 - c.wx1;
  BilinearSample s;
  s.value = wy0 * (wx0 * v00 + c.wx1 * v01) + c.wy1 * (wx0 * v10 + c.wx1 * v11);
  s.d_dy = wx0 * (v10 - v00) + c.wx1 * (v11 - v01);
  s.d_dx = wy0 * (v01 - v00) + c.wy1 * (v11 - v10);
  return s;
}

constexpr int kTaps = 9;
constexpr int kTapY[kTaps] = {-1, -1, -1, 0, 0, 0, 1, 1, 1};
constexpr int kTapX[kTaps] = {-1, 0, 1, -1, 0, 1, -1, 0, 1};

}  // namespace

double bilinear_sample(const Tensor& input, double y, double x, std::int64_t b, std::int64_t c) {
  return bilinear_sample_grad(input, y, x, b, c).value;
}

BilinearSample bilinear_sample_grad(const Tensor& input, double y, double x, std::int64_t b,
                                    std::int64_t c) {
  check_rank(input, 4, "bilinear_sample", "input");
  const auto C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (b < 0 || b >= input.dim(0) || c < 0 || c >= C) throw ShapeError("bilinear_sample: plane index out of range");
  return dispatch(input.dtype(), [&]<typename T>() {
    return sample_plane(input.data<T>().data() + (b * C + c) * H * W, H, W, y, x);
  });
}

Tensor deform_conv3x3(const Tensor& input, const Tensor& kernel, const Tensor& offset,
                      const Tensor& mask) {
  check_rank(input, 4, "deform_conv3x3", "input");
  const auto B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (kernel.shape() != Shape{B, C, 3, 3}) {
    throw ShapeError("deform_conv3x3: kernel " + shape_str(kernel.shape()) + ", expected " +
                     shape_str({B, C, 3, 3}));
  }
  if (offset.shape() != Shape{B, 2 * kTaps, H, W}) {
    throw ShapeError("deform_conv3x3: offset " + shape_str(offset.shape()) + ", expected " +
                     shape_str({B, 2 * kTaps, H, W}));
  }
  if (mask.shape() != Shape{B, kTaps, H, W}) {
    throw ShapeError("deform_conv3x3: mask " + shape_str(mask.shape()) + ", expected " +
                     shape_str({B, kTaps, H, W}));
  }
  for (const Tensor* t : {&kernel, &offset, &mask}) detail::check_same_dtype(input, *t, "deform_conv3x3");

  const std::int64_t HW = H * W;
  Tensor out = Tensor::zeros(input.shape(), input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    const T* in = input.data<T>().data();
    const T* pk = kernel.data<T>().data();
    const T* po = offset.data<T>().data();
    const T* pm = mask.data<T>().data();
    T* pout = out.data<T>().data();
    parallel_for(B * C, [&](std::int64_t begin, std::int64_t end) {
      for (std::int64_t bc = begin; bc < end; ++bc) {
        const std::int64_t b = bc / C;
        const T* plane = in + bc * HW;
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int j = 0; j < kTaps; ++j) {
              const std::int64_t pix = y * W + x;
              const double sy = static_cast<double>(y + kTapY[j]) + po[(b * 2 * kTaps + 2 * j) * HW + pix];
              const double sx = static_cast<double>(x + kTapX[j]) + po[(b * 2 * kTaps + 2 * j + 1) * HW + pix];
              const double v = sample_plane(plane, H, W, sy, sx).value;
              acc += static_cast<double>(pk[bc * kTaps + j]) * pm[(b * kTaps + j) * HW + pix] * v;
            }
            pout[bc * HW + y * W + x] = static_cast<T>(acc);
          }
      }
    }, 2);
  });

  if (detail::needs_grad({&input, &kernel, &offset, &mask})) {
    detail::attach(out, "deform_conv3x3", {input, kernel, offset, mask}, [=](TensorImpl& o) {
      dispatch(input.dtype(), [&]<typename T>() {
        const T* g = out_grad<T>(o);
        const T* in = input.data<T>().data();
        const T* pk = kernel.data<T>().data();
        const T* po = offset.data<T>().data();
        const T* pm = mask.data<T>().data();
        T* gi = grad_ptr<T>(input);
        T* gk = grad_ptr<T>(kernel);
        T* goff = grad_ptr<T>(offset);
        T* gmask = grad_ptr<T>(mask);
        for (std::int64_t bc = 0; bc < B * C; ++bc) {
          const std::int64_t b = bc / C;
          const T* plane = in + bc * HW;
          for (std::int64_t y = 0; y < H; ++y)
            for (std::int64_t x = 0; x < W; ++x) {
              const std::int64_t pix = y * W + x;
              const double go = g[bc * HW + pix];
              if (go == 0.0) continue;
              for (int j = 0; j < kTaps; ++j) {
                const std::int64_t oy_idx = (b * 2 * kTaps + 2 * j) * HW + pix;
                const std::int64_t ox_idx = oy_idx + HW;
                const std::int64_t m_idx = (b * kTaps + j) * HW + pix;
                const double sy = static_cast<double>(y + kTapY[j]) + po[oy_idx];
                const double sx = static_cast<double>(x + kTapX[j]) + po[ox_idx];
                const BilinearSample s = sample_plane(plane, H, W, sy, sx);
                const double kv = pk[bc * kTaps + j];
                const double mv = pm[m_idx];
                if (gk) gk[bc * kTaps + j] += static_cast<T>(go * mv * s.value);
                if (gmask) gmask[m_idx] += static_cast<T>(go * kv * s.value);
                if (goff) {
                  goff[oy_idx] += static_cast<T>(go * kv * mv * s.d_dy);
                  goff[ox_idx] += static_cast<T>(go * kv * mv * s.d_dx);
                }
                if (gi && sy > -1.0 && sy < static_cast<double>(H) && sx > -1.0 && sx < static_cast<double>(W)) {
                  const Corner4 c = corners(sy, sx);
                  const double scale_g = go * kv * mv;
                  const double wts[4] = {(1 - c.wy1) * (1 - c.wx1), (1 - c.wy1) * c.wx1, c.wy1 * (1 - c.wx1),
                                         c.wy1 * c.wx1};
                  const std::int64_t ys[4] = {c.y0, c.y0, c.y0 + 1, c.y0 + 1};
                  const std::int64_t xs[4] = {c.x0, c.x0 + 1, c.x0, c.x0 + 1};
                  for (int q = 0; q < 4; ++q) {
                    if (ys[q] >= 0 && ys[q] < H && xs[q] >= 0 && xs[q] < W) {
                      gi[bc * HW + ys[q] * W + xs[q]] += static_cast<T>(scale_g * wts[q]);
                    }
                  }
                }
              }
            }
        }
      });
    });
  }
  return out;
}

}  // namespace c2sti
