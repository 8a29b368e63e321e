#pragma once

#include <string>
#include <vector>

#include "c2sti/layers.hpp"

namespace c2sti {

struct PositionSet {
  int s = 0;
  double delta_d = 1.0;
  double alpha = 0.0;
  std::vector<double> w_bar;
  std::vector<double> p;
};

/// Uniform grid i/(s+1), i = 1..s.
PositionSet uniform_positions(int s);

/// Sobel magnitude of a single-channel image [1,H,W] (or [H,W]); borders
/// replicate the edge pixel.
Tensor sobel_magnitude(const Tensor& image);

/// Mean Sobel magnitude of the channel-mean of an H&E patch [3,H,W] or [1,3,H,W].
double mean_gradient(const Tensor& he);

/// Identity when q is already strictly increasing inside (0,1); otherwise the
/// gaps (q1, q2-q1, ..., 1-qs) are floored at a small positive value and
/// renormalized to sum 1.
std::vector<double> clamp_monotone(const std::vector<double>& q);

/// Gradient-weighted positions from the two anchor H&E patches.
PositionSet compute_positions(const Tensor& he0, const Tensor& he1, int s, double alpha);

inline constexpr int kEmbedDim = 16;
inline constexpr int kSpatialEmbedDim = 8;

struct Modulator {
  Linear phi;        // 1 -> 16
  Linear mlp1;       // C+16 -> C
  Linear mlp2;       // C -> C
  Conv2d local;      // 3x3, C -> C
  Linear psi;        // 1 -> 8
  Conv2d fuse1;      // 1x1, C+8 -> C
  Conv2d fuse2;      // 1x1, C -> C
  Linear kernel1;    // 8 -> 16
  Linear kernel2;    // 16 -> 9C
  double beta = 0.5;
  double gamma = 0.5;
};

Modulator make_modulator(ModelParams& params, int channels, const Init& init);

struct ModulatedFeature {
  Tensor f_ca;
  Tensor f_sp;
  Tensor f_out;
  Tensor e_p;       // [1,16]
  Tensor e2_p;      // [1,8]
  Tensor kernel;    // [C,3,3]
};

/// Position-conditioned channel and spatial reweighting of f [B,C,H,W].
ModulatedFeature modulate(const Tensor& f, double p, const Modulator& m);

struct DeformParams {
  Tensor kernel;  // [B,C,3,3], taps of each channel sum to 1
  Tensor offset;  // [B,18,H,W]
  Tensor mask;    // [B,9,H,W] in (0,1)
};

struct Estimators {
  Linear kernel1;  // C -> C
  Linear kernel2;  // C -> 9C, zero-initialized
  Conv2d offset;   // 3x3, C -> 18, zero-initialized
  Conv2d mask;     // 3x3, C -> 9, zero-initialized
};

Estimators make_estimators(ModelParams& params, int channels, const Init& init);

DeformParams estimate_deform(const Tensor& f_out, const Estimators& e);

Tensor deformable_fuse(const Tensor& f_dir, const DeformParams& dp);

inline constexpr int kSynthChannels = 16;

struct Synthesizer {
  Conv2d conv1;  // 3x3, 3C -> 4*16
  Conv2d conv2;  // 3x3, 16 -> 16
  Conv2d out;    // 1x1, 16 -> N
};

Synthesizer make_synthesizer(ModelParams& params, int channels, int genes, const Init& init);

/// Genes in (0,1) at twice the feature resolution: [B,N,2H,2W].
Tensor synthesize_slice(const Tensor& f01, const Tensor& f10, double p, const Synthesizer& syn);

}  // namespace c2sti
