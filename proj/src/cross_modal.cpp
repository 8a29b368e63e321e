#include "c2sti/cross_modal.hpp"

#include "c2sti/ops.hpp"

namespace c2sti {

Tensor Backbone::operator()(const Tensor& image) const {
  if (image.ndim() != 4) throw ShapeError("backbone: expected [B,C,H,W], got " + shape_str(image.shape()));
  if (image.dim(2) < 4 || image.dim(3) < 4)
    throw ShapeError("backbone: spatial size must be at least 4x4, got " + shape_str(image.shape()));
  if (image.dim(1) != conv1.in_channels())
    throw ShapeError("backbone: expected " + std::to_string(conv1.in_channels()) + " channels, got " +
                     shape_str(image.shape()));
  return relu(conv3(relu(conv2(relu(conv1(image))))));
}

Backbone make_backbone(ModelParams& params, const std::string& prefix, int in_channels,
                       int feature_channels, const Init& init) {
  return {make_conv(params, prefix + ".conv1", in_channels, feature_channels, 3, 1, init),
          make_conv(params, prefix + ".conv2", feature_channels, feature_channels, 3, 1, init),
          make_conv(params, prefix + ".conv3", feature_channels, feature_channels, 3, 2, init)};
}

GateOutput GatedFusion::operator()(const Tensor& m_h, const Tensor& m_s) const {
  if (m_h.ndim() != 4 || m_s.ndim() != 4) throw ShapeError("gated_fusion: expected 4-d features");
  if (m_h.dim(1) != c_h || m_s.dim(1) != c_s)
    throw ShapeError("gated_fusion: expected " + std::to_string(c_h) + " H&E and " + std::to_string(c_s) +
                     " ST channels, got " + shape_str(m_h.shape()) + " and " + shape_str(m_s.shape()));
  if (m_h.dim(0) != m_s.dim(0) || m_h.dim(2) != m_s.dim(2) || m_h.dim(3) != m_s.dim(3))
    throw ShapeError("gated_fusion: extents differ: " + shape_str(m_h.shape()) + " vs " + shape_str(m_s.shape()));
  GateOutput out;
  out.f_cat = concat({m_h, m_s}, 1);
  out.f_gate = relu(conv1(out.f_cat));
  out.g = sigmoid(conv2(out.f_gate));
  out.x = mul(m_s, out.g);
  return out;
}

GatedFusion make_gated_fusion(ModelParams& params, const std::string& prefix, int c_h, int c_s,
                              const Init& init) {
  GatedFusion g;
  g.conv1 = make_conv(params, prefix + ".conv1", c_h + c_s, c_s, 1, 1, init);
  g.conv2 = make_conv(params, prefix + ".conv2", c_s, c_s, 1, 1, init);
  g.c_h = c_h;
  g.c_s = c_s;
  return g;
}

Tensor CrossModal::operator()(const Tensor& st_image, const Tensor& he_image) const {
  Tensor m_s = st(st_image);
  if (!use_he) return m_s;
  return gate(he(he_image), m_s).x;
}

CrossModal make_cross_modal(ModelParams& params, int genes, int feature_channels, bool use_he,
                            const Init& init) {
  CrossModal cm;
  cm.st = make_backbone(params, "cross_modal.backbone_st", genes, feature_channels, init);
  cm.he = make_backbone(params, "cross_modal.backbone_he", 3, feature_channels, init);
  cm.gate = make_gated_fusion(params, "cross_modal.gate", feature_channels, feature_channels, init);
  cm.use_he = use_he;
  return cm;
}

}  // namespace c2sti
