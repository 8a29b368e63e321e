#include <gtest/gtest.h>

#include <algorithm>

#include "c2sti/gradcheck.hpp"
#include "c2sti/model.hpp"
#include "c2sti/ops.hpp"
#include "c2sti/train.hpp"
#include "test_util.hpp"

using namespace c2sti;
using c2sti::testing::bit_equal;
using c2sti::testing::max_abs_diff;
using c2sti::testing::random_tensor;

namespace {

struct Anchors {
  Tensor st0, st1, he0, he1;
};

Anchors random_anchors(std::uint64_t seed, std::int64_t size = 16, DType dt = DType::F32) {
  Rng rng(seed);
  return {random_tensor({8, size, size}, rng, 0.0, 1.0, dt), random_tensor({8, size, size}, rng, 0.0, 1.0, dt),
          random_tensor({3, size, size}, rng, 0.0, 1.0, dt), random_tensor({3, size, size}, rng, 0.0, 1.0, dt)};
}

ModelConfig with_variant(Variant v, double lambda = 0.5) {
  ModelConfig c;
  c.variant = v;
  c.lambda = lambda;
  return c;
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

TEST(Model, SingleSliceShapeAndRange) {
  Model m(ModelConfig{}, 3);
  const Anchors a = random_anchors(1);
  const ForwardResult r = m.forward(a.st0, a.st1, a.he0, a.he1, 1);
  ASSERT_EQ(r.slices.size(), 1u);
  EXPECT_EQ(r.slices[0].shape(), (Shape{1, 8, 16, 16}));
  for (double v : r.slices[0].to_vector()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(r.positions.s, 1);
}

TEST(Model, MultiSlicePositionsIncrease) {
  Model m(ModelConfig{}, 3);
  const Anchors a = random_anchors(2);
  const ForwardResult r = m.forward(a.st0, a.st1, a.he0, a.he1, 4);
  ASSERT_EQ(r.slices.size(), 4u);
  ASSERT_EQ(r.positions.p.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_GT(r.positions.p[i], 0.0);
    EXPECT_LT(r.positions.p[i], 1.0);
    if (i > 0) EXPECT_GT(r.positions.p[i], r.positions.p[i - 1]);
  }
}

TEST(Model, RejectsBadExtentsAndChannelCounts) {
  Model m(ModelConfig{}, 3);
  Rng rng(4);
  const Anchors a = random_anchors(3);
  Tensor odd = random_tensor({8, 12, 12}, rng, 0, 1, DType::F32);
  Tensor odd_he = random_tensor({3, 12, 12}, rng, 0, 1, DType::F32);
  EXPECT_THROW(m.forward(odd, odd, odd_he, odd_he, 1), ShapeError);
  Tensor wrong = random_tensor({5, 16, 16}, rng, 0, 1, DType::F32);
  EXPECT_THROW(m.forward(wrong, a.st1, a.he0, a.he1, 1), ShapeError);
  EXPECT_THROW(m.forward(a.st0, a.st1, a.he0, a.he1, 0), Error);
}

TEST(Model, FixedSeedIsDeterministic) {
  Model a(ModelConfig{}, 11), b(ModelConfig{}, 11), c(ModelConfig{}, 12);
  const Anchors in = random_anchors(5);
  const auto ra = a.forward(in.st0, in.st1, in.he0, in.he1, 2);
  const auto rb = b.forward(in.st0, in.st1, in.he0, in.he1, 2);
  const auto rc = c.forward(in.st0, in.st1, in.he0, in.he1, 2);
  for (int i = 0; i < 2; ++i) EXPECT_TRUE(bit_equal(ra.slices[i], rb.slices[i]));
  EXPECT_FALSE(bit_equal(ra.slices[0], rc.slices[0]));
}

TEST(Variants, ShareParameterValues) {
  Model full(ModelConfig{}, 9);
  for (Variant v : {Variant::NoCrossModal, Variant::NoMgcGraph, Variant::NoDlsm}) {
    Model other(with_variant(v), 9);
    ASSERT_EQ(other.params().paths(), full.params().paths()) << variant_name(v);
    for (const auto& [path, t] : full.params()) EXPECT_TRUE(bit_equal(t, other.params().at(path))) << path;
  }
}

TEST(Variants, ActivePathsExcludeDisabledBranches) {
  auto active = [](const ModelConfig& c) { return Model(c, 1).active_paths(); };
  const auto full = active(ModelConfig{});
  EXPECT_EQ(full.size(), Model(ModelConfig{}, 1).params().size());

  auto any_prefix = [](const std::vector<std::string>& paths, const std::string& prefix) {
    return std::any_of(paths.begin(), paths.end(), [&](const std::string& p) { return starts_with(p, prefix); });
  };
  const auto ncm = active(with_variant(Variant::NoCrossModal));
  EXPECT_FALSE(any_prefix(ncm, "cross_modal.backbone_he."));
  EXPECT_FALSE(any_prefix(ncm, "cross_modal.gate."));
  EXPECT_TRUE(any_prefix(ncm, "cross_modal.backbone_st."));
  EXPECT_FALSE(any_prefix(active(with_variant(Variant::NoMgcGraph)), "gcn."));
  EXPECT_FALSE(any_prefix(active(with_variant(Variant::Full, 0.0)), "gcn."));
  const auto nd = active(with_variant(Variant::NoDlsm));
  EXPECT_FALSE(any_prefix(nd, "dlsm.modulate."));
  EXPECT_TRUE(any_prefix(nd, "dlsm.synth."));
}

TEST(Variants, NoGraphMatchesFullWithZeroLambda) {
  Model ng(with_variant(Variant::NoMgcGraph), 21);
  Model z(with_variant(Variant::Full, 0.0), 21);
  EXPECT_EQ(ng.effective_lambda(), 0.0);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Anchors a = random_anchors(seed);
    for (int s : {1, 3}) {
      const auto r1 = ng.forward(a.st0, a.st1, a.he0, a.he1, s);
      const auto r2 = z.forward(a.st0, a.st1, a.he0, a.he1, s);
      for (int i = 0; i < s; ++i) EXPECT_TRUE(bit_equal(r1.slices[i], r2.slices[i]));
    }
  }
}

TEST(Variants, NoCrossModalIgnoresHistology) {
  Model m(with_variant(Variant::NoCrossModal), 5);
  Model full(ModelConfig{}, 5);
  const Anchors a = random_anchors(6);
  Rng rng(7);
  Tensor he0b = random_tensor({3, 16, 16}, rng, 0, 1, DType::F32);
  Tensor he1b = random_tensor({3, 16, 16}, rng, 0, 1, DType::F32);
  const auto r1 = m.forward(a.st0, a.st1, a.he0, a.he1, 2);
  const auto r2 = m.forward(a.st0, a.st1, he0b, he1b, 2);
  EXPECT_EQ(max_abs_diff(r1.trace.x0, r2.trace.x0), 0.0);
  EXPECT_EQ(max_abs_diff(r1.trace.x1, r2.trace.x1), 0.0);
  // positions still read H&E, so compare slices at fixed positions
  const PositionSet fixed = uniform_positions(2);
  const auto u1 = m.forward(a.st0, a.st1, a.he0, a.he1, fixed);
  const auto u2 = m.forward(a.st0, a.st1, he0b, he1b, fixed);
  for (int i = 0; i < 2; ++i) EXPECT_TRUE(bit_equal(u1.slices[i], u2.slices[i]));
  // the full model does look at H&E
  const auto f1 = full.forward(a.st0, a.st1, a.he0, a.he1, 2);
  const auto f2 = full.forward(a.st0, a.st1, he0b, he1b, 2);
  EXPECT_GT(max_abs_diff(f1.trace.x0, f2.trace.x0), 0.0);
}

TEST(Variants, NoDlsmUsesUniformPositions) {
  Model m(with_variant(Variant::NoDlsm), 5);
  const Anchors a = random_anchors(8);
  const auto r = m.forward(a.st0, a.st1, a.he0, a.he1, 3);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(r.positions.p[i], (i + 1) / 4.0);
}

TEST(Variants, NamesRoundTrip) {
  for (Variant v : {Variant::Full, Variant::NoCrossModal, Variant::NoMgcGraph, Variant::NoDlsm})
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  EXPECT_THROW(parse_variant("no_everything"), Error);
}

TEST(Model, ExplicitPositionsAreHonoured) {
  Model m(ModelConfig{}, 2);
  const Anchors a = random_anchors(9);
  PositionSet p = uniform_positions(2);
  p.p = {0.2, 0.7};
  const auto r = m.forward(a.st0, a.st1, a.he0, a.he1, p);
  EXPECT_EQ(r.positions.p, p.p);
  p.p = {0.7, 0.2};
  EXPECT_THROW(m.forward(a.st0, a.st1, a.he0, a.he1, p), Error);
}

TEST(Model, EndToEndGradientMatchesFiniteDifferences) {
  Model m(ModelConfig{}, 13, DType::F64);
  Rng rng(14);
  // zero-initialised heads would hide the offset and mask paths
  for (const auto& [path, t] : m.params()) {
    if (starts_with(path, "dlsm.estimate.")) Tensor(t).copy_from(random_tensor(t.shape(), rng, -0.05, 0.05));
  }
  const Anchors a = random_anchors(15, 16, DType::F64);
  SliceTuple tuple;
  tuple.anchors = {STPatch{a.st0, 0}, STPatch{a.st1, 2}};
  tuple.he_anchors = {HEPatch{a.he0, 0}, HEPatch{a.he1, 2}};
  tuple.targets = {STPatch{random_tensor({8, 16, 16}, rng, 0.0, 1.0), 1}};

  std::vector<std::pair<std::string, Tensor>> inputs(m.params().begin(), m.params().end());
  GradCheckOptions opt;
  opt.max_elements_per_input = 2;
  const auto r = gradcheck([&] { return tuple_loss(m, tuple, 1.0, 1.0); }, inputs, opt);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst_input << "[" << r.worst_index << "]";
  EXPECT_GT(r.probed, 100);
}
