#include <gtest/gtest.h>

#include <cmath>

#include "c2sti/cross_modal.hpp"
#include "c2sti/gradcheck.hpp"
#include "c2sti/ops.hpp"
#include "test_util.hpp"

using namespace c2sti;
using c2sti::testing::bit_equal;
using c2sti::testing::random_tensor;

namespace {

const Init kF64{11, DType::F64};

void zero_biases(ModelParams& p) {
  for (const auto& [path, t] : p)
    if (path.size() > 5 && path.substr(path.size() - 5) == ".bias") Tensor(t).copy_from(Tensor::zeros(t.shape(), DType::F64));
}

void fill(Tensor t, double v) { t.copy_from(Tensor::full(t.shape(), v, DType::F64)); }

}  // namespace

TEST(Backbone, ShapeContract) {
  ModelParams p;
  Backbone b = make_backbone(p, "bb", 3, 16, kF64);
  Rng rng(1);
  EXPECT_EQ(b(random_tensor({1, 3, 32, 32}, rng)).shape(), (Shape{1, 16, 16, 16}));
  EXPECT_THROW(b(random_tensor({1, 3, 3, 8}, rng)), ShapeError);
  EXPECT_THROW(b(random_tensor({1, 4, 8, 8}, rng)), ShapeError);
}

TEST(Backbone, ZeroInputZeroBiasGivesZero) {
  ModelParams p;
  Backbone b = make_backbone(p, "bb", 8, 16, kF64);
  zero_biases(p);
  Tensor y = b(Tensor::zeros({1, 8, 16, 16}, DType::F64));
  for (double v : y.to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, GradientsMatchFiniteDifferences) {
  for (int trial = 0; trial < 3; ++trial) {
    ModelParams p;
    Backbone b = make_backbone(p, "bb", 3, 4, Init{static_cast<std::uint64_t>(trial), DType::F64});
    Rng rng(trial + 10);
    for (const auto& [path, t] : p) Tensor(t).copy_from(random_tensor(t.shape(), rng, -0.5, 0.5));
    Tensor x = random_tensor({1, 3, 6, 6}, rng);
    Tensor w = random_tensor({1, 4, 3, 3}, rng);
    std::vector<std::pair<std::string, Tensor>> inputs(p.begin(), p.end());
    const auto r = gradcheck([&] { return sum(mul(b(x), w)); }, inputs);
    EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_input;
  }
}

TEST(GatedFusion, SaturatedGates) {
  ModelParams p;
  GatedFusion g = make_gated_fusion(p, "gate", 4, 4, kF64);
  Rng rng(3);
  Tensor mh = random_tensor({1, 4, 5, 5}, rng), ms = random_tensor({1, 4, 5, 5}, rng);
  fill(g.conv2.weight, 0.0);
  fill(g.conv2.bias, 20.0);
  GateOutput open = g(mh, ms);
  EXPECT_LT(c2sti::testing::max_abs_diff(open.x, ms), 1e-8);
  fill(g.conv2.bias, -20.0);
  GateOutput closed = g(mh, ms);
  for (double v : closed.x.to_vector()) EXPECT_LT(std::abs(v), 1e-8);
}

TEST(GatedFusion, HandEvaluatedChain) {
  ModelParams p;
  GatedFusion g = make_gated_fusion(p, "gate", 1, 1, kF64);
  g.conv1.weight.copy_from(Tensor::from_vector({1, 2, 1, 1}, {1.0, 1.0}, DType::F64));
  g.conv2.weight.copy_from(Tensor::from_vector({1, 1, 1, 1}, {2.0}, DType::F64));
  GateOutput out = g(Tensor::full({1, 1, 1, 1}, 0.5, DType::F64), Tensor::full({1, 1, 1, 1}, 1.0, DType::F64));
  EXPECT_DOUBLE_EQ(out.f_gate.item(), 1.5);
  const double sig3 = 1.0 / (1.0 + std::exp(-3.0));
  EXPECT_NEAR(out.g.item(), 0.95257, 1e-5);
  EXPECT_DOUBLE_EQ(out.x.item(), sig3);
}

TEST(GatedFusion, RangeBoundAndChannelChecks) {
  ModelParams p;
  GatedFusion g = make_gated_fusion(p, "gate", 3, 5, kF64);
  Rng rng(4);
  Tensor mh = random_tensor({2, 3, 4, 4}, rng), ms = random_tensor({2, 5, 4, 4}, rng, -3, 3);
  GateOutput out = g(mh, ms);
  for (std::int64_t i = 0; i < out.g.numel(); ++i) {
    EXPECT_GT(out.g.flat(i), 0.0);
    EXPECT_LT(out.g.flat(i), 1.0);
    EXPECT_LE(std::abs(out.x.flat(i)), std::abs(ms.flat(i)));
  }
  EXPECT_THROW(g(ms, mh), ShapeError);
  EXPECT_THROW(g(mh, random_tensor({2, 5, 3, 4}, rng)), ShapeError);
}

TEST(GatedFusion, GateIsMonotoneInPreActivation) {
  ModelParams p;
  GatedFusion g = make_gated_fusion(p, "gate", 2, 2, kF64);
  Rng rng(5);
  Tensor mh = random_tensor({1, 2, 3, 3}, rng), ms = random_tensor({1, 2, 3, 3}, rng);
  const double before = g(mh, ms).g.at({0, 1, 0, 0});
  g.conv2.bias.set_flat(1, g.conv2.bias.flat(1) + 0.3);
  EXPECT_GT(g(mh, ms).g.at({0, 1, 0, 0}), before);
}

TEST(GatedFusion, GradientsMatchFiniteDifferences) {
  ModelParams p;
  GatedFusion g = make_gated_fusion(p, "gate", 3, 2, kF64);
  Rng rng(6);
  Tensor mh = c2sti::testing::random_param({1, 3, 4, 4}, rng);
  Tensor ms = c2sti::testing::random_param({1, 2, 4, 4}, rng);
  std::vector<std::pair<std::string, Tensor>> inputs(p.begin(), p.end());
  inputs.emplace_back("m_h", mh);
  inputs.emplace_back("m_s", ms);
  const auto r = gradcheck([&] { return sum(mul(g(mh, ms).x, ms)); }, inputs);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_input;
}

TEST(CrossModal, SharedWeightsSwapAnchorsExactly) {
  ModelParams p;
  CrossModal cm = make_cross_modal(p, 4, 8, true, kF64);
  Rng rng(7);
  Tensor s0 = random_tensor({1, 4, 8, 8}, rng), s1 = random_tensor({1, 4, 8, 8}, rng);
  Tensor h0 = random_tensor({1, 3, 8, 8}, rng), h1 = random_tensor({1, 3, 8, 8}, rng);
  EXPECT_TRUE(bit_equal(cm(s0, h0), cm(s0, h0)));
  Tensor a0 = cm(s0, h0), a1 = cm(s1, h1);
  EXPECT_TRUE(bit_equal(cm(s1, h1), a1));
  EXPECT_FALSE(bit_equal(a0, a1));
}

TEST(CrossModal, WithoutHeIgnoresHe) {
  ModelParams p;
  CrossModal cm = make_cross_modal(p, 4, 8, false, kF64);
  Rng rng(8);
  Tensor s0 = random_tensor({1, 4, 8, 8}, rng);
  Tensor x = cm(s0, random_tensor({1, 3, 8, 8}, rng));
  EXPECT_TRUE(bit_equal(x, cm(s0, random_tensor({1, 3, 8, 8}, rng))));
  EXPECT_TRUE(bit_equal(x, cm.st(s0)));
}
