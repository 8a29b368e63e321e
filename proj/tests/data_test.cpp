#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "c2sti/data.hpp"
#include "c2sti/io.hpp"
#include "c2sti/ops.hpp"
#include "test_util.hpp"

using namespace c2sti;
using c2sti::testing::bit_equal;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.size = 16;
  c.slices = 8;
  return c;
}

double mean_adjacent_l1(const Volume& v) {
  double total = 0.0;
  for (std::size_t i = 1; i < v.st.size(); ++i)
    total += mean(abs(v.st[i].genes.to(DType::F64) - v.st[i - 1].genes.to(DType::F64))).item();
  return total / static_cast<double>(v.st.size() - 1);
}

}  // namespace

TEST(Generator, ZeroDeformationAndDriftGivesIdenticalSlices) {
  GeneratorConfig c = small_config();
  c.deformation = 0.0;
  c.drift = 0.0;
  const Volume v = generate_volume(c, 5);
  for (std::size_t i = 1; i < v.st.size(); ++i) {
    EXPECT_TRUE(bit_equal(v.st[i].genes, v.st[0].genes)) << i;
    EXPECT_TRUE(bit_equal(v.he[i].rgb, v.he[0].rgb)) << i;
  }
}

TEST(Generator, FixedSeedIsBitIdentical) {
  const Volume a = generate_volume(small_config(), 42);
  const Volume b = generate_volume(small_config(), 42);
  const Volume c = generate_volume(small_config(), 43);
  for (std::size_t i = 0; i < a.st.size(); ++i) {
    EXPECT_TRUE(bit_equal(a.st[i].genes, b.st[i].genes));
    EXPECT_TRUE(bit_equal(a.he[i].rgb, b.he[i].rgb));
  }
  EXPECT_FALSE(bit_equal(a.st[0].genes, c.st[0].genes));
}

TEST(Generator, LargerDeformationMovesAdjacentSlicesFurther) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    GeneratorConfig c = small_config();
    c.drift = 0.0;
    c.deformation = 1.0;
    const double d1 = mean_adjacent_l1(generate_volume(c, seed));
    c.deformation = 2.0;
    const double d2 = mean_adjacent_l1(generate_volume(c, seed));
    EXPECT_GT(d2, d1) << "seed " << seed;
  }
}

TEST(Generator, ValuesInUnitRangeShapesAndSparsity) {
  GeneratorConfig c = small_config();
  c.drift = 0.3;
  c.deformation = 3.0;
  const Volume v = generate_volume(c, 9);
  ASSERT_EQ(v.st.size(), 8u);
  std::int64_t zeros = 0, total = 0;
  for (std::size_t i = 0; i < v.st.size(); ++i) {
    EXPECT_EQ(v.st[i].genes.shape(), (Shape{8, 16, 16}));
    EXPECT_EQ(v.he[i].rgb.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(v.st[i].slice_index, static_cast<int>(i));
    for (double x : v.st[i].genes.to_vector()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
      zeros += x == 0.0;
      ++total;
    }
    for (double x : v.he[i].rgb.to_vector()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
  EXPECT_GE(static_cast<double>(zeros) / total, 0.5 - 1e-9);
}

TEST(Generator, RejectsDegenerateConfig) {
  GeneratorConfig c = small_config();
  c.genes = 0;
  EXPECT_THROW(generate_volume(c, 1), Error);
  c = small_config();
  c.size = 0;
  EXPECT_THROW(generate_volume(c, 1), Error);
  c = small_config();
  c.slices = 2;
  EXPECT_THROW(generate_volume(c, 1), Error);
}

TEST(Generator, SameWarpKeepsModalitiesRegistered) {
  // A marker channel appended to the ST stack and to the H&E stack lands on the
  // same pixels after the same warp.
  Rng rng(8);
  Tensor marker = Tensor::zeros({1, 16, 16}, DType::F64);
  marker.set({0, 7, 9}, 1.0);
  marker.set({0, 3, 4}, 1.0);
  Tensor st = concat({c2sti::testing::random_tensor({4, 16, 16}, rng), marker}, 0);
  Tensor he = concat({c2sti::testing::random_tensor({3, 16, 16}, rng), marker}, 0);
  Tensor field = smooth_displacement(16, 16, 2.0, 77);
  Tensor ws = warp_stack(st, field), wh = warp_stack(he, field);
  EXPECT_TRUE(bit_equal(narrow(ws, 0, 4, 1), narrow(wh, 0, 3, 1)));
  EXPECT_GT(sum(narrow(ws, 0, 4, 1)).item(), 0.0);
  // channels are warped independently
  EXPECT_TRUE(bit_equal(narrow(ws, 0, 0, 4), warp_stack(narrow(st, 0, 0, 4), field)));
}

TEST(Generator, DisplacementPeakIsBounded) {
  Tensor f = smooth_displacement(32, 32, 1.5, 3);
  for (double x : f.to_vector()) EXPECT_LE(std::abs(x), 1.5 + 1e-12);
  Tensor z = smooth_displacement(8, 8, 0.0, 3);
  for (double x : z.to_vector()) EXPECT_EQ(x, 0.0);
}

TEST(Tuples, WindowCounts) {
  GeneratorConfig c = small_config();
  c.slices = 19;
  c.size = 8;
  const Volume v = generate_volume(c, 1);
  EXPECT_EQ(make_tuples(v, 1).size(), 17u);
  EXPECT_EQ(make_tuples(v, 4).size(), 14u);
  EXPECT_THROW(make_tuples(v, 0), Error);
  EXPECT_THROW(make_tuples(v, 18), Error);
  EXPECT_EQ(make_tuples(v, 17).size(), 1u);
}

TEST(Tuples, TargetsAreConsecutiveBetweenAnchors) {
  const Volume v = generate_volume(small_config(), 1);
  for (int s = 1; s <= 4; ++s)
    for (const SliceTuple& t : make_tuples(v, s)) {
      const int a0 = t.anchors[0].slice_index;
      EXPECT_EQ(t.anchors[1].slice_index, a0 + s + 1);
      EXPECT_EQ(t.he_anchors[0].slice_index, a0);
      EXPECT_EQ(t.he_anchors[1].slice_index, a0 + s + 1);
      ASSERT_EQ(t.s(), s);
      for (int i = 0; i < s; ++i) EXPECT_EQ(t.targets[i].slice_index, a0 + i + 1);
    }
}

TEST(Splits, LargestRemainderFollowsRatio) {
  const SplitCounts c = split_counts(64);
  EXPECT_EQ(c.train, 45);
  EXPECT_EQ(c.val, 5);
  EXPECT_EQ(c.test, 14);
  const SplitCounts full = split_counts(1216);
  EXPECT_EQ(full.train, 852);
  EXPECT_EQ(full.val, 100);
  EXPECT_EQ(full.test, 264);
  for (int n = 0; n < 200; ++n) {
    const SplitCounts s = split_counts(n);
    EXPECT_EQ(s.train + s.val + s.test, n);
  }
}

TEST(Dataset, WriteReadAndDisjointSplits) {
  const fs::path root = fs::temp_directory_path() / "c2sti_data_test_ds";
  fs::remove_all(root);
  GeneratorConfig c;
  c.size = 8;
  c.slices = 5;
  c.volumes = 10;
  const DatasetManifest m = write_dataset(c, 7, root);
  EXPECT_EQ(m.counts.train + m.counts.val + m.counts.test, 10);
  EXPECT_TRUE(fs::exists(root / "train" / "vol_0" / "st_4.ctf"));
  EXPECT_TRUE(fs::exists(root / "train" / "vol_0" / "he_0.ctf"));

  const DatasetManifest back = read_dataset_manifest(root);
  EXPECT_EQ(back.seed, 7u);
  EXPECT_EQ(back.generator.size, 8);
  EXPECT_EQ(back.volume_seeds, m.volume_seeds);

  // each volume directory belongs to exactly one split, so no window crosses splits
  std::set<std::string> seen;
  for (const char* split : {"train", "val", "test"}) {
    if (!fs::exists(root / split)) continue;
    for (const auto& e : fs::directory_iterator(root / split))
      EXPECT_TRUE(seen.insert(e.path().filename().string()).second) << e.path();
  }
  EXPECT_EQ(seen.size(), 10u);

  const auto train = load_split(root, "train");
  ASSERT_EQ(static_cast<int>(train.size()), m.counts.train);
  const Volume regen = generate_volume(c, volume_seed(7, 0));
  for (int i = 0; i < c.slices; ++i) {
    EXPECT_TRUE(bit_equal(train[0].st[i].genes, regen.st[i].genes));
    EXPECT_TRUE(bit_equal(train[0].he[i].rgb, regen.he[i].rgb));
  }
  EXPECT_THROW(load_split(root, "bogus"), Error);
}

TEST(Patches, RoundTripAndChannelCheck) {
  const fs::path dir = fs::temp_directory_path() / "c2sti_data_test_patch";
  fs::create_directories(dir);
  Rng rng(2);
  STPatch p{c2sti::testing::random_tensor({8, 16, 16}, rng, 0.0, 1.0, DType::F32), 3};
  save_patch(p, dir / "st.ctf");
  const STPatch q = load_st_patch(dir / "st.ctf", 3);
  EXPECT_TRUE(bit_equal(p.genes, q.genes));
  EXPECT_THROW(load_he_patch(dir / "st.ctf"), ShapeError);
}
