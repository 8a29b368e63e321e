#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "c2sti/layers.hpp"

namespace c2sti {

inline constexpr int kPyramidLevels = 3;

/// Three levels of four conv+ReLU layers, the first of each with stride 2.
struct PyramidEncoder {
  std::array<std::array<Conv2d, 4>, kPyramidLevels> convs;

  /// Returns levels 1..3 (finest first).
  std::vector<Tensor> operator()(const Tensor& x) const;
};

PyramidEncoder make_pyramid_encoder(ModelParams& params, int in_channels, int channels, const Init& init);

struct CoexpressionGraph {
  Tensor a;       // [N,N] Pearson correlations
  Tensor p_prop;  // [N,N] row-normalized relu(A) + I
  std::vector<int> zero_variance;  // genes whose correlations were zeroed
};

/// Pearson correlation between the rows of e [N,M], computed in double.
/// Constant rows get zero off-diagonals and a unit diagonal.
Tensor pearson_matrix(const Tensor& e, std::vector<int>* zero_variance = nullptr);

/// Graph from two anchors' gene maps ([N,H,W] or [1,N,H,W]), pooling all pixels
/// of both. The result never carries gradient.
CoexpressionGraph build_graph(const Tensor& st0, const Tensor& st1, DType dt = DType::F64);

/// Row-normalized relu(A) + I.
Tensor propagation_matrix(const Tensor& a);

struct GraphLayer {
  Conv2d proj_in;   // 1x1, C -> N*C_node
  Tensor w_n;       // [C_node,C_node]
  Conv2d proj_out;  // 1x1, N*C_node -> C
  int nodes = 0;
  int node_channels = 0;
};

GraphLayer make_graph_layer(ModelParams& params, int channels, int genes, const Init& init);

/// relu(P · nodes · W_n) per location. nodes [B,N,Cn,H,W]; P [N,N] or [B,N,N].
Tensor gcn_nodes(const Tensor& nodes, const Tensor& p_prop, const Tensor& w_n);

/// lambda * proj_out(gcn(proj_in(c))) + (1 - lambda) * c; lambda == 0 returns c.
Tensor gcn_propagate(const Tensor& c, const Tensor& p_prop, double lambda, const GraphLayer& layer);

/// Per level, the (0->1, 1->0) deformation features.
using DeformationBundle = std::vector<std::pair<Tensor, Tensor>>;

struct DecoderBlock {
  Conv2d conv1, conv2;
  Tensor operator()(const Tensor& x) const;
};

/// Coarse-to-fine decoder. Level 3 sees concat(F0, F1); every finer level sees
/// its anchor features plus the 2x nearest-upsampled coarser outputs. A final
/// stage at the backbone resolution consumes X0, X1 the same way. Each stage
/// evaluates one shared block on mirrored concatenations, so swapping anchors
/// swaps the two streams.
struct DeformationDecoder {
  std::array<DecoderBlock, kPyramidLevels + 1> blocks;  // index = level (0 = backbone resolution)

  /// levels: (F0, F1) for levels 1..3; base: (X0, X1). Returns bundle indexed by level 0..3.
  DeformationBundle operator()(const std::vector<std::pair<Tensor, Tensor>>& levels,
                               const std::pair<Tensor, Tensor>& base) const;
};

DeformationDecoder make_decoder(ModelParams& params, int base_channels, int channels, const Init& init);

}  // namespace c2sti
