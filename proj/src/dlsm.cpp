#include "c2sti/dlsm.hpp"

#include <cmath>

#include "c2sti/ops.hpp"

namespace c2sti {

PositionSet uniform_positions(int s) {
  if (s < 1) throw Error("positions: s must be >= 1, got " + std::to_string(s));
  PositionSet ps;
  ps.s = s;
  for (int i = 1; i <= s; ++i) {
    ps.w_bar.push_back(1.0);
    ps.p.push_back(static_cast<double>(i) / (s + 1));
  }
  return ps;
}

Tensor sobel_magnitude(const Tensor& image) {
  if (!(image.ndim() == 2 || (image.ndim() == 3 && image.dim(0) == 1)))
    throw ShapeError("sobel_magnitude: expected [1,H,W], got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(image.ndim() - 2), w = image.dim(image.ndim() - 1);
  const std::vector<double> v = image.to_vector();
  auto px = [&](std::int64_t y, std::int64_t x) {
    y = std::clamp<std::int64_t>(y, 0, h - 1);
    x = std::clamp<std::int64_t>(x, 0, w - 1);
    return v[y * w + x];
  };
  std::vector<double> out(h * w);
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      const double gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
      const double gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                        (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
      out[y * w + x] = std::sqrt(gx * gx + gy * gy);
    }
  return Tensor::from_vector(image.shape(), out, DType::F64);
}

double mean_gradient(const Tensor& he) {
  Tensor t = he.ndim() == 4 && he.dim(0) == 1 ? reshape(he.detach(), {he.dim(1), he.dim(2), he.dim(3)}) : he.detach();
  if (t.ndim() != 3) throw ShapeError("mean_gradient: expected [C,H,W], got " + shape_str(he.shape()));
  NoGradGuard guard;
  Tensor gray = mean_dims(t.to(DType::F64), {0}, true);
  const std::vector<double> g = sobel_magnitude(gray).to_vector();
  double acc = 0.0;
  for (double x : g) acc += x;
  return acc / static_cast<double>(g.size());
}

std::vector<double> clamp_monotone(const std::vector<double>& q) {
  const std::size_t s = q.size();
  bool ok = s > 0 && q.front() > 0.0 && q.back() < 1.0;
  for (std::size_t i = 1; ok && i < s; ++i) ok = q[i] > q[i - 1];
  if (ok) return q;
  const double floor_gap = 0.05 / static_cast<double>(s + 1);
  std::vector<double> gaps(s + 1);
  double prev = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    gaps[i] = std::max(std::isfinite(q[i]) ? q[i] - prev : 0.0, floor_gap);
    prev = std::isfinite(q[i]) ? q[i] : prev;
  }
  gaps[s] = std::max(1.0 - prev, floor_gap);
  double total = 0.0;
  for (double g : gaps) total += g;
  std::vector<double> out(s);
  double acc = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    acc += gaps[i] / total;
    out[i] = acc;
  }
  return out;
}

PositionSet compute_positions(const Tensor& he0, const Tensor& he1, int s, double alpha) {
  if (s < 1) throw Error("compute_positions: s must be >= 1, got " + std::to_string(s));
  if (!(alpha >= 0.0)) throw Error("compute_positions: alpha must be >= 0");
  PositionSet ps = uniform_positions(s);
  ps.alpha = alpha;
  if (alpha == 0.0) return ps;
  const double g0 = mean_gradient(he0), g1 = mean_gradient(he1);
  std::vector<double> w(s);
  double mean_w = 0.0;
  for (int i = 0; i < s; ++i) {
    const double t = ps.p[i];
    w[i] = 1.0 + alpha * ((1.0 - t) * g0 + t * g1);
    mean_w += w[i] / s;
  }
  std::vector<double> q(s);
  for (int i = 0; i < s; ++i) {
    ps.w_bar[i] = w[i] / mean_w;
    q[i] = ps.p[i] * ps.w_bar[i];
  }
  ps.p = clamp_monotone(q);
  return ps;
}

Modulator make_modulator(ModelParams& params, int channels, const Init& init) {
  const std::string p = "dlsm.modulate.";
  Modulator m;
  m.phi = make_linear(params, p + "phi", 1, kEmbedDim, init);
  m.mlp1 = make_linear(params, p + "channel_mlp1", channels + kEmbedDim, channels, init);
  m.mlp2 = make_linear(params, p + "channel_mlp2", channels, channels, init);
  m.local = make_conv(params, p + "local", channels, channels, 3, 1, init);
  m.psi = make_linear(params, p + "psi", 1, kSpatialEmbedDim, init);
  m.fuse1 = make_conv(params, p + "fuse1", channels + kSpatialEmbedDim, channels, 1, 1, init);
  m.fuse2 = make_conv(params, p + "fuse2", channels, channels, 1, 1, init);
  m.kernel1 = make_linear(params, p + "kernel_mlp1", kSpatialEmbedDim, 16, init);
  m.kernel2 = make_linear(params, p + "kernel_mlp2", 16, channels * 9, init);
  return m;
}

ModulatedFeature modulate(const Tensor& f, double p, const Modulator& m) {
  if (!(p > 0.0 && p < 1.0)) throw Error("modulate: position must lie in (0,1), got " + std::to_string(p));
  if (f.ndim() != 4) throw ShapeError("modulate: expected [B,C,H,W], got " + shape_str(f.shape()));
  const std::int64_t b = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const Tensor pos = Tensor::full({1, 1}, p, f.dtype());
  ModulatedFeature out;

  out.e_p = m.phi(pos);
  Tensor pooled = concat({global_avg_pool(f), broadcast_to(out.e_p, {b, kEmbedDim})}, 1);
  Tensor wc = sigmoid(m.mlp2(relu(m.mlp1(pooled))));
  out.f_ca = mul(f, reshape(wc, {b, c, 1, 1}));

  out.e2_p = m.psi(pos);
  Tensor e_map = broadcast_to(reshape(out.e2_p, {1, kSpatialEmbedDim, 1, 1}), {b, kSpatialEmbedDim, h, w});
  Tensor fused = m.fuse2(relu(m.fuse1(concat({m.local(f), e_map}, 1))));
  out.kernel = reshape(m.kernel2(relu(m.kernel1(out.e2_p))), {c, 3, 3});
  out.f_sp = depthwise_conv2d(fused, out.kernel, 1);

  out.f_out = add(scale(out.f_ca, m.beta), scale(out.f_sp, m.gamma));
  return out;
}

Estimators make_estimators(ModelParams& params, int channels, const Init& init) {
  const std::string p = "dlsm.estimate.";
  return {make_linear(params, p + "kernel_mlp1", channels, channels, init),
          make_linear(params, p + "kernel_mlp2", channels, 9 * channels, init, InitKind::Zero),
          make_conv(params, p + "offset", channels, 18, 3, 1, init, InitKind::Zero),
          make_conv(params, p + "mask", channels, 9, 3, 1, init, InitKind::Zero)};
}

DeformParams estimate_deform(const Tensor& f_out, const Estimators& e) {
  if (f_out.ndim() != 4) throw ShapeError("estimate_deform: expected [B,C,H,W], got " + shape_str(f_out.shape()));
  const std::int64_t b = f_out.dim(0), c = f_out.dim(1);
  DeformParams dp;
  Tensor raw = reshape(softplus(e.kernel2(relu(e.kernel1(global_avg_pool(f_out))))), {b, c, 9});
  dp.kernel = reshape(div(raw, sum_dims(raw, {2}, true)), {b, c, 3, 3});
  dp.offset = e.offset(f_out);
  dp.mask = sigmoid(e.mask(f_out));
  return dp;
}

Tensor deformable_fuse(const Tensor& f_dir, const DeformParams& dp) {
  return deform_conv3x3(f_dir, dp.kernel, dp.offset, dp.mask);
}

Synthesizer make_synthesizer(ModelParams& params, int channels, int genes, const Init& init) {
  const std::string p = "dlsm.synth.";
  return {make_conv(params, p + "conv1", 3 * channels, 4 * kSynthChannels, 3, 1, init),
          make_conv(params, p + "conv2", kSynthChannels, kSynthChannels, 3, 1, init),
          make_conv(params, p + "out", kSynthChannels, genes, 1, 1, init)};
}

Tensor synthesize_slice(const Tensor& f01, const Tensor& f10, double p, const Synthesizer& syn) {
  if (f01.shape() != f10.shape())
    throw ShapeError("synthesize_slice: direction features differ: " + shape_str(f01.shape()) + " vs " +
                     shape_str(f10.shape()));
  Tensor blend = add(scale(f01, 1.0 - p), scale(f10, p));
  Tensor up = pixel_shuffle(relu(syn.conv1(concat({blend, f01, f10}, 1))), 2);
  return sigmoid(syn.out(relu(syn.conv2(up))));
}

}  // namespace c2sti
