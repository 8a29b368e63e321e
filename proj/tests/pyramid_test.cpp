#include <gtest/gtest.h>

#include <cmath>

#include "c2sti/gradcheck.hpp"
#include "c2sti/ops.hpp"
#include "c2sti/pyramid.hpp"
#include "test_util.hpp"

using namespace c2sti;
using c2sti::testing::bit_equal;
using c2sti::testing::max_abs_diff;
using c2sti::testing::random_tensor;

namespace {

const Init kF64{21, DType::F64};

double pearson_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double cov = 0, va = 0, vb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (a[i] - ma) * (b[i] - mb) / n;
    va += (a[i] - ma) * (a[i] - ma) / n;
    vb += (b[i] - mb) * (b[i] - mb) / n;
  }
  return cov / std::sqrt(va * vb);
}

std::vector<double> pooled_gene(const Tensor& s0, const Tensor& s1, int g) {
  std::vector<double> v;
  const std::int64_t hw = s0.dim(1) * s0.dim(2);
  for (std::int64_t i = 0; i < hw; ++i) v.push_back(s0.flat(g * hw + i));
  for (std::int64_t i = 0; i < hw; ++i) v.push_back(s1.flat(g * hw + i));
  return v;
}

void set_identity_projections(GraphLayer& g) {
  const std::int64_t c = g.proj_in.weight.dim(1);
  Tensor eye = Tensor::zeros({c, c, 1, 1}, DType::F64);
  for (std::int64_t i = 0; i < c; ++i) eye.set({i, i, 0, 0}, 1.0);
  g.proj_in.weight.copy_from(eye);
  g.proj_out.weight.copy_from(eye);
  Tensor eye_n = Tensor::zeros({g.node_channels, g.node_channels}, DType::F64);
  for (int i = 0; i < g.node_channels; ++i) eye_n.set({i, i}, 1.0);
  g.w_n.copy_from(eye_n);
}

}  // namespace

TEST(PyramidEncoder, HalvesThreeTimes) {
  ModelParams p;
  PyramidEncoder enc = make_pyramid_encoder(p, 16, 32, kF64);
  Rng rng(1);
  const auto levels = enc(random_tensor({1, 16, 16, 16}, rng));
  ASSERT_EQ(levels.size(), 3u);
  EXPECT_EQ(levels[0].shape(), (Shape{1, 32, 8, 8}));
  EXPECT_EQ(levels[1].shape(), (Shape{1, 32, 4, 4}));
  EXPECT_EQ(levels[2].shape(), (Shape{1, 32, 2, 2}));
  EXPECT_EQ(p.size(), 24u);
  EXPECT_THROW(enc(random_tensor({1, 16, 2, 2}, rng)), ShapeError);
}

TEST(PyramidEncoder, IdenticalAnchorsGiveIdenticalLevels) {
  ModelParams p;
  PyramidEncoder enc = make_pyramid_encoder(p, 4, 8, kF64);
  Rng rng(2);
  Tensor x = random_tensor({1, 4, 8, 8}, rng);
  const auto a = enc(x), b = enc(x.clone());
  for (int l = 0; l < 3; ++l) EXPECT_TRUE(bit_equal(a[l], b[l]));
}

TEST(PyramidEncoder, GradientsThroughAllConvs) {
  ModelParams p;
  PyramidEncoder enc = make_pyramid_encoder(p, 2, 3, kF64);
  Rng rng(3);
  for (const auto& [_, t] : p) Tensor(t).copy_from(random_tensor(t.shape(), rng, -0.6, 0.6));
  Tensor x = random_tensor({1, 2, 8, 8}, rng, 0.0, 1.0);
  std::vector<std::pair<std::string, Tensor>> inputs(p.begin(), p.end());
  auto loss = [&] {
    const auto lv = enc(x);
    return add(add(sum(lv[0]), sum(mul(lv[1], lv[1]))), sum(lv[2]));
  };
  const auto r = gradcheck(loss, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_input;
}

TEST(Graph, PerfectCorrelationAndAnticorrelation) {
  Rng rng(4);
  Tensor s0 = random_tensor({3, 4, 4}, rng), s1 = random_tensor({3, 4, 4}, rng);
  for (Tensor* s : {&s0, &s1})
    for (std::int64_t i = 0; i < 16; ++i) {
      s->set_flat(16 + i, s->flat(i));             // gene 1 copies gene 0
      s->set_flat(32 + i, 0.7 - s->flat(i));       // gene 2 = -gene 0 + c
    }
  CoexpressionGraph g = build_graph(s0, s1);
  EXPECT_NEAR(g.a.at({0, 1}), 1.0, 1e-12);
  EXPECT_NEAR(g.a.at({0, 2}), -1.0, 1e-12);
  EXPECT_NEAR(g.a.at({1, 2}), -1.0, 1e-12);
}

TEST(Graph, MatchesPearsonOracleWithUnitDiagonalAndSymmetry) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor s0 = random_tensor({4, 8, 8}, rng, 0, 1), s1 = random_tensor({4, 8, 8}, rng, 0, 1);
    CoexpressionGraph g = build_graph(s0, s1);
    EXPECT_TRUE(g.zero_variance.empty());
    for (int i = 0; i < 4; ++i) {
      EXPECT_EQ(g.a.at({i, i}), 1.0);
      double row = 0;
      for (int k = 0; k < 4; ++k) {
        EXPECT_EQ(g.a.at({i, k}), g.a.at({k, i}));
        EXPECT_LE(std::abs(g.a.at({i, k})), 1.0);
        if (i != k) EXPECT_NEAR(g.a.at({i, k}), pearson_oracle(pooled_gene(s0, s1, i), pooled_gene(s0, s1, k)), 1e-6);
        row += g.p_prop.at({i, k});
        EXPECT_GE(g.p_prop.at({i, k}), 0.0);
      }
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
    EXPECT_FALSE(g.a.requires_grad());
  }
}

TEST(Graph, ScaleInvariance) {
  Rng rng(6);
  Tensor s0 = random_tensor({3, 5, 5}, rng, 0, 1), s1 = random_tensor({3, 5, 5}, rng, 0, 1);
  CoexpressionGraph a = build_graph(s0, s1);
  Tensor t0 = s0.clone(), t1 = s1.clone();
  for (std::int64_t i = 25; i < 50; ++i) {
    t0.set_flat(i, 3.7 * t0.flat(i));
    t1.set_flat(i, 3.7 * t1.flat(i));
  }
  EXPECT_LT(max_abs_diff(a.a, build_graph(t0, t1).a), 1e-6);
}

TEST(Graph, ZeroVarianceGeneIsGuarded) {
  Rng rng(7);
  Tensor s0 = random_tensor({3, 4, 4}, rng), s1 = random_tensor({3, 4, 4}, rng);
  for (std::int64_t i = 0; i < 16; ++i) {
    s0.set_flat(16 + i, 0.25);
    s1.set_flat(16 + i, 0.25);
  }
  CoexpressionGraph g = build_graph(s0, s1);
  ASSERT_EQ(g.zero_variance, std::vector<int>{1});
  EXPECT_EQ(g.a.at({1, 1}), 1.0);
  EXPECT_EQ(g.a.at({1, 0}), 0.0);
  EXPECT_EQ(g.a.at({2, 1}), 0.0);
  for (double v : g.p_prop.to_vector()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(build_graph(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 4, 4})), ShapeError);
}

TEST(Gcn, LambdaZeroReturnsInput) {
  ModelParams p;
  GraphLayer g = make_graph_layer(p, 6, 3, kF64);
  Rng rng(8);
  Tensor c = random_tensor({1, 6, 3, 3}, rng);
  Tensor pp = propagation_matrix(Tensor::from_vector({3, 3}, {1, .2, -.4, .2, 1, .5, -.4, .5, 1}, DType::F64));
  EXPECT_TRUE(bit_equal(gcn_propagate(c, pp, 0.0, g), c));
  EXPECT_THROW(gcn_propagate(c, pp, 1.5, g), Error);
  EXPECT_THROW(gcn_propagate(c, pp, -0.1, g), Error);
}

TEST(Gcn, IdentityPropagationKeepsNonNegativeInput) {
  ModelParams p;
  GraphLayer g = make_graph_layer(p, 4, 2, kF64);
  set_identity_projections(g);
  Rng rng(9);
  Tensor c = random_tensor({2, 4, 3, 3}, rng, 0.0, 1.0);
  Tensor eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1}, DType::F64);
  EXPECT_LT(max_abs_diff(gcn_propagate(c, eye, 1.0, g), c), 1e-15);
}

TEST(Gcn, TwoNodeHandExample) {
  ModelParams p;
  GraphLayer g = make_graph_layer(p, 2, 2, kF64);
  ASSERT_EQ(g.node_channels, 1);
  set_identity_projections(g);
  Tensor c = Tensor::from_vector({1, 2, 1, 1}, {2.0, 4.0}, DType::F64);
  Tensor half = Tensor::from_vector({2, 2}, {0.5, 0.5, 0.5, 0.5}, DType::F64);
  Tensor full = gcn_propagate(c, half, 1.0, g);
  EXPECT_DOUBLE_EQ(full.flat(0), 3.0);
  EXPECT_DOUBLE_EQ(full.flat(1), 3.0);
  Tensor blended = gcn_propagate(c, half, 0.5, g);
  EXPECT_DOUBLE_EQ(blended.flat(0), 2.5);
  EXPECT_DOUBLE_EQ(blended.flat(1), 3.5);
}

TEST(Gcn, AffineInLambda) {
  ModelParams p;
  GraphLayer g = make_graph_layer(p, 8, 3, kF64);
  EXPECT_EQ(g.node_channels, 3);
  Rng rng(10);
  Tensor c = random_tensor({1, 8, 4, 4}, rng);
  Tensor pp = build_graph(random_tensor({3, 4, 4}, rng), random_tensor({3, 4, 4}, rng)).p_prop;
  Tensor q = gcn_propagate(c, pp, 0.25, g);
  Tensor avg = scale(add(gcn_propagate(c, pp, 0.0, g), gcn_propagate(c, pp, 0.5, g)), 0.5);
  EXPECT_LT(max_abs_diff(q, avg), 1e-6);
}

TEST(Gcn, GradientsMatchFiniteDifferences) {
  ModelParams p;
  GraphLayer g = make_graph_layer(p, 5, 2, kF64);
  Rng rng(11);
  Tensor c = c2sti::testing::random_param({1, 5, 3, 3}, rng);
  Tensor pp = build_graph(random_tensor({2, 3, 3}, rng), random_tensor({2, 3, 3}, rng)).p_prop;
  std::vector<std::pair<std::string, Tensor>> inputs(p.begin(), p.end());
  inputs.emplace_back("c", c);
  Tensor w = random_tensor({1, 5, 3, 3}, rng);
  const auto r = gradcheck([&] { return sum(mul(gcn_propagate(c, pp, 0.5, g), w)); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_input;
}

TEST(Decoder, ShapesAndMirroredSwap) {
  ModelParams p;
  DeformationDecoder dec = make_decoder(p, 4, 6, kF64);
  Rng rng(12);
  auto pair_of = [&](std::int64_t c, std::int64_t s) {
    return std::make_pair(random_tensor({1, c, s, s}, rng), random_tensor({1, c, s, s}, rng));
  };
  std::vector<std::pair<Tensor, Tensor>> levels = {pair_of(6, 4), pair_of(6, 2), pair_of(6, 1)};
  auto base = pair_of(4, 8);
  DeformationBundle out = dec(levels, base);
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0].first.shape(), (Shape{1, 6, 8, 8}));
  EXPECT_EQ(out[1].first.shape(), (Shape{1, 6, 4, 4}));
  EXPECT_EQ(out[3].second.shape(), (Shape{1, 6, 1, 1}));

  std::vector<std::pair<Tensor, Tensor>> swapped;
  for (auto& [a, b] : levels) swapped.emplace_back(b, a);
  DeformationBundle sw = dec(swapped, {base.second, base.first});
  for (int l = 0; l < 4; ++l) {
    EXPECT_TRUE(bit_equal(out[l].first, sw[l].second));
    EXPECT_TRUE(bit_equal(out[l].second, sw[l].first));
  }
  levels.pop_back();
  EXPECT_THROW(dec(levels, base), Error);
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  ModelParams p;
  DeformationDecoder dec = make_decoder(p, 2, 3, kF64);
  Rng rng(13);
  auto pair_of = [&](std::int64_t c, std::int64_t s) {
    return std::make_pair(random_tensor({1, c, s, s}, rng), random_tensor({1, c, s, s}, rng));
  };
  std::vector<std::pair<Tensor, Tensor>> levels = {pair_of(3, 4), pair_of(3, 2), pair_of(3, 1)};
  auto base = pair_of(2, 8);
  Tensor w0 = random_tensor({1, 3, 8, 8}, rng), w1 = random_tensor({1, 3, 8, 8}, rng);
  std::vector<std::pair<std::string, Tensor>> inputs(p.begin(), p.end());
  auto loss = [&] {
    auto out = dec(levels, base);
    return add(sum(mul(out[0].first, w0)), sum(mul(out[0].second, w1)));
  };
  const auto r = gradcheck(loss, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_input;
}
