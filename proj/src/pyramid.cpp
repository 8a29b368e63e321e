#include "c2sti/pyramid.hpp"

#include <cmath>

#include "c2sti/ops.hpp"

namespace c2sti {

std::vector<Tensor> PyramidEncoder::operator()(const Tensor& x) const {
  if (x.ndim() != 4) throw ShapeError("pyramid_encode: expected [B,C,H,W], got " + shape_str(x.shape()));
  if (x.dim(2) < 1 << (kPyramidLevels - 1) || x.dim(3) < 1 << (kPyramidLevels - 1))
    throw ShapeError("pyramid_encode: input " + shape_str(x.shape()) + " too small to halve three times");
  std::vector<Tensor> levels;
  Tensor h = x;
  for (const auto& level : convs) {
    for (const Conv2d& c : level) h = relu(c(h));
    levels.push_back(h);
  }
  return levels;
}

PyramidEncoder make_pyramid_encoder(ModelParams& params, int in_channels, int channels, const Init& init) {
  PyramidEncoder enc;
  for (int l = 0; l < kPyramidLevels; ++l)
    for (int i = 0; i < 4; ++i) {
      const int cin = (l == 0 && i == 0) ? in_channels : channels;
      enc.convs[l][i] = make_conv(params, "pyramid.level" + std::to_string(l + 1) + ".conv" + std::to_string(i + 1),
                                  cin, channels, 3, i == 0 ? 2 : 1, init);
    }
  return enc;
}

Tensor pearson_matrix(const Tensor& e, std::vector<int>* zero_variance) {
  if (e.ndim() != 2) throw ShapeError("pearson_matrix: expected [N,M], got " + shape_str(e.shape()));
  const std::int64_t n = e.dim(0), m = e.dim(1);
  const std::vector<double> v = e.to_vector();
  std::vector<double> centered(v.size());
  std::vector<double> norm(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::int64_t j = 0; j < m; ++j) mu += v[i * m + j];
    mu /= static_cast<double>(m);
    double ss = 0.0;
    for (std::int64_t j = 0; j < m; ++j) {
      const double c = v[i * m + j] - mu;
      centered[i * m + j] = c;
      ss += c * c;
    }
    norm[i] = std::sqrt(ss);
  }
  // relative guard so float-rounded constants still count as constant
  std::vector<bool> flat(n);
  for (std::int64_t i = 0; i < n; ++i) {
    double scale = 0.0;
    for (std::int64_t j = 0; j < m; ++j) scale = std::max(scale, std::abs(v[i * m + j]));
    flat[i] = norm[i] <= 1e-12 * std::max(1.0, scale) * std::sqrt(static_cast<double>(m));
    if (flat[i] && zero_variance) zero_variance->push_back(static_cast<int>(i));
  }
  std::vector<double> a(n * n, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    a[i * n + i] = 1.0;
    for (std::int64_t k = i + 1; k < n; ++k) {
      double r = 0.0;
      if (!flat[i] && !flat[k]) {
        double dot = 0.0;
        for (std::int64_t j = 0; j < m; ++j) dot += centered[i * m + j] * centered[k * m + j];
        r = std::clamp(dot / (norm[i] * norm[k]), -1.0, 1.0);
      }
      a[i * n + k] = r;
      a[k * n + i] = r;
    }
  }
  return Tensor::from_vector({n, n}, a, DType::F64);
}

Tensor propagation_matrix(const Tensor& a) {
  const std::int64_t n = a.dim(0);
  std::vector<double> p(n * n);
  for (std::int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::int64_t k = 0; k < n; ++k) {
      p[i * n + k] = std::max(0.0, a.flat(i * n + k)) + (i == k ? 1.0 : 0.0);
      row += p[i * n + k];
    }
    for (std::int64_t k = 0; k < n; ++k) p[i * n + k] /= row;
  }
  return Tensor::from_vector({n, n}, p, DType::F64);
}

namespace {

Tensor gene_rows(const Tensor& st) {
  if (st.ndim() == 4 && st.dim(0) == 1) return reshape(st.detach(), {st.dim(1), st.dim(2) * st.dim(3)});
  if (st.ndim() == 3) return reshape(st.detach(), {st.dim(0), st.dim(1) * st.dim(2)});
  throw ShapeError("build_graph: expected [N,H,W] or [1,N,H,W], got " + shape_str(st.shape()));
}

}  // namespace

CoexpressionGraph build_graph(const Tensor& st0, const Tensor& st1, DType dt) {
  NoGradGuard guard;
  Tensor e0 = gene_rows(st0).to(DType::F64), e1 = gene_rows(st1).to(DType::F64);
  if (e0.dim(0) != e1.dim(0)) throw ShapeError("build_graph: anchors have different gene counts");
  if (e0.dim(0) < 2) throw ShapeError("build_graph: need at least 2 genes");
  CoexpressionGraph g;
  g.a = pearson_matrix(concat({e0, e1}, 1), &g.zero_variance).to(dt);
  g.p_prop = propagation_matrix(g.a).to(dt);
  return g;
}

GraphLayer make_graph_layer(ModelParams& params, int channels, int genes, const Init& init) {
  GraphLayer g;
  g.nodes = genes;
  g.node_channels = (channels + genes - 1) / genes;
  g.proj_in = make_conv(params, "gcn.proj_in", channels, genes * g.node_channels, 1, 1, init);
  g.proj_out = make_conv(params, "gcn.proj_out", genes * g.node_channels, channels, 1, 1, init);
  g.w_n = params.add("gcn.w_n", he_uniform({g.node_channels, g.node_channels}, g.node_channels,
                                           path_seed(init.seed, "gcn.w_n"), init.dtype));
  return g;
}

Tensor gcn_nodes(const Tensor& nodes, const Tensor& p_prop, const Tensor& w_n) {
  if (nodes.ndim() != 5) throw ShapeError("gcn: nodes must be [B,N,Cn,H,W], got " + shape_str(nodes.shape()));
  return relu(mix_axis(mix_axis(nodes, p_prop, 1), transpose2d(w_n), 2));
}

Tensor gcn_propagate(const Tensor& c, const Tensor& p_prop, double lambda, const GraphLayer& layer) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("gcn: lambda must lie in [0,1], got " + std::to_string(lambda));
  if (lambda == 0.0) return c;
  const std::int64_t b = c.dim(0), h = c.dim(2), w = c.dim(3);
  Tensor nodes = reshape(layer.proj_in(c), {b, layer.nodes, layer.node_channels, h, w});
  Tensor g = layer.proj_out(reshape(gcn_nodes(nodes, p_prop, layer.w_n), {b, layer.nodes * layer.node_channels, h, w}));
  if (lambda == 1.0) return g;
  return add(scale(g, lambda), scale(c, 1.0 - lambda));
}

Tensor DecoderBlock::operator()(const Tensor& x) const { return conv2(relu(conv1(x))); }

DeformationBundle DeformationDecoder::operator()(const std::vector<std::pair<Tensor, Tensor>>& levels,
                                                 const std::pair<Tensor, Tensor>& base) const {
  if (levels.size() != kPyramidLevels)
    throw Error("decode_deformation: expected " + std::to_string(kPyramidLevels) + " levels, got " +
                std::to_string(levels.size()));
  DeformationBundle out(kPyramidLevels + 1);
  const auto& top = levels.back();
  out[kPyramidLevels] = {blocks[kPyramidLevels](concat({top.first, top.second}, 1)),
                         blocks[kPyramidLevels](concat({top.second, top.first}, 1))};
  for (int l = kPyramidLevels - 1; l >= 0; --l) {
    const auto& anchors = l == 0 ? base : levels[l - 1];
    const Tensor u01 = upsample_nearest(out[l + 1].first, 2);
    const Tensor u10 = upsample_nearest(out[l + 1].second, 2);
    if (u01.dim(2) != anchors.first.dim(2) || u01.dim(3) != anchors.first.dim(3))
      throw ShapeError("decode_deformation: level " + std::to_string(l) + " extents " +
                       shape_str(anchors.first.shape()) + " do not match upsampled " + shape_str(u01.shape()));
    out[l] = {blocks[l](concat({anchors.first, anchors.second, u01, u10}, 1)),
              blocks[l](concat({anchors.second, anchors.first, u10, u01}, 1))};
  }
  return out;
}

DeformationDecoder make_decoder(ModelParams& params, int base_channels, int channels, const Init& init) {
  DeformationDecoder d;
  for (int l = 0; l <= kPyramidLevels; ++l) {
    const std::string p = "pyramid.decoder" + std::to_string(l);
    const int anchor_c = l == 0 ? base_channels : channels;
    const int cin = l == kPyramidLevels ? 2 * channels : 2 * anchor_c + 2 * channels;
    d.blocks[l] = {make_conv(params, p + ".conv1", cin, channels, 3, 1, init),
                   make_conv(params, p + ".conv2", channels, channels, 3, 1, init)};
  }
  return d;
}

}  // namespace c2sti
