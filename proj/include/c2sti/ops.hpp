#pragma once

#include <cstdint>
#include <vector>

#include "c2sti/tensor.hpp"

namespace c2sti {

// Element-wise binary ops with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor abs(const Tensor& a);

Tensor broadcast_to(const Tensor& a, const Shape& shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_dims(const Tensor& a, const std::vector<int>& dims, bool keepdim);
Tensor mean_dims(const Tensor& a, const std::vector<int>& dims, bool keepdim);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
/// Slice [start, start+length) along `axis`.
Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t length);
Tensor transpose2d(const Tensor& a);

/// [M,K] x [K,N] -> [M,N]
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[B,in] W[out,in] + b[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Cross-correlation of x[B,Cin,H,W] with weight[Cout,Cin,kh,kw].
/// bias is optional (pass an undefined Tensor). Zero padding.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride, int padding);

/// Per-channel convolution with kernel[C,kh,kw] shared across the batch.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, int padding);

/// [B, C*r*r, H, W] -> [B, C, H*r, W*r]
Tensor pixel_shuffle(const Tensor& input, int r);
/// Inverse of pixel_shuffle.
Tensor pixel_unshuffle(const Tensor& input, int r);

Tensor upsample_nearest(const Tensor& input, int factor);

/// Mean over the spatial axes: [B,C,H,W] -> [B,C].
Tensor global_avg_pool(const Tensor& input);

/// Contract a square matrix along `axis`: out[.., i, ..] = sum_j m[i, j] x[.., j, ..].
/// `m` is either [D,D] or batched [B,D,D] (axis must then be > 0, batch = axis 0).
Tensor mix_axis(const Tensor& x, const Tensor& m, int axis);

/// Modulated deformable 3x3 convolution with per-sample depth-wise kernels.
///
///   out[b,c,y,x] = sum_j kernel[b,c,j] * mask[b,j,y,x] *
///                  sample(input[b,c], y + ry_j + offset[b,2j,y,x], x + rx_j + offset[b,2j+1,y,x])
///
/// with (ry_j, rx_j) running over {-1,0,1}^2 in row-major order and zero-padded
/// bilinear sampling. Shapes: input [B,C,H,W], kernel [B,C,3,3],
/// offset [B,18,H,W], mask [B,9,H,W].
Tensor deform_conv3x3(const Tensor& input, const Tensor& kernel, const Tensor& offset,
                      const Tensor& mask);

/// Bilinear sample of input[b,c] at (y, x); zero outside [0,H-1]x[0,W-1].
double bilinear_sample(const Tensor& input, double y, double x, std::int64_t b, std::int64_t c);

/// Value and coordinate partials of the zero-padded bilinear sample.
struct BilinearSample {
  double value = 0.0;
  double d_dy = 0.0;
  double d_dx = 0.0;
};
BilinearSample bilinear_sample_grad(const Tensor& input, double y, double x, std::int64_t b,
                                    std::int64_t c);

}  // namespace c2sti
