#pragma once

#include <string>

#include "c2sti/layers.hpp"

namespace c2sti {

/// Trainable stand-in for a pretrained image encoder: two stride-1 conv+ReLU
/// blocks and one stride-2 conv+ReLU block. [B,Cin,H,W] -> [B,Cf,H/2,W/2].
struct Backbone {
  Conv2d conv1, conv2, conv3;

  Tensor operator()(const Tensor& image) const;
};

Backbone make_backbone(ModelParams& params, const std::string& prefix, int in_channels,
                       int feature_channels, const Init& init);

struct GateOutput {
  Tensor f_cat;   // [B,Ch+Cs,H,W], H&E first
  Tensor f_gate;  // ReLU(conv1x1(f_cat))
  Tensor g;       // sigmoid(conv1x1(f_gate)), [B,Cs,H,W]
  Tensor x;       // m_s * g
};

struct GatedFusion {
  Conv2d conv1;  // Ch+Cs -> Cs
  Conv2d conv2;  // Cs -> Cs
  int c_h = 0;
  int c_s = 0;

  GateOutput operator()(const Tensor& m_h, const Tensor& m_s) const;
};

GatedFusion make_gated_fusion(ModelParams& params, const std::string& prefix, int c_h, int c_s,
                              const Init& init);

/// Both anchors go through the same instance.
struct CrossModal {
  Backbone st;
  Backbone he;
  GatedFusion gate;
  /// When false, G is fixed to 1 and X = M_s; H&E is never read.
  bool use_he = true;

  /// st [B,N,H,W], he [B,3,H,W] -> X [B,Cf,H/2,W/2].
  Tensor operator()(const Tensor& st_image, const Tensor& he_image) const;
};

CrossModal make_cross_modal(ModelParams& params, int genes, int feature_channels, bool use_he,
                            const Init& init);

}  // namespace c2sti
