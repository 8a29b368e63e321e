#pragma once

#include <cmath>
#include <cstdint>

#include "c2sti/rng.hpp"
#include "c2sti/tensor.hpp"

namespace c2sti::testing {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            DType dt = DType::F64) {
  Tensor t = Tensor::zeros(shape, dt);
  for (std::int64_t i = 0; i < t.numel(); ++i) t.set_flat(i, rng.uniform(lo, hi));
  return t;
}

inline Tensor random_param(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = random_tensor(shape, rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.flat(i) - b.flat(i)));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    if (a.flat(i) != b.flat(i)) return false;
  }
  return true;
}

}  // namespace c2sti::testing
