#include <gtest/gtest.h>

#include <sstream>

#include "c3s3/metrics.hpp"
#include "c3s3/oracles.hpp"

using namespace c3s3;

namespace {

LabelVolume random_mask(Rng& rng, const Extent3& s, double p) {
  LabelVolume m(s);
  for (auto& v : m.voxels) v = rng.uniform() < p ? 1 : 0;
  return m;
}

// A blobby mask: random boxes, so surfaces have some structure.
LabelVolume random_boxes(Rng& rng, const Extent3& s) {
  LabelVolume m(s);
  const std::size_t boxes = 1 + rng.below(3);
  for (std::size_t b = 0; b < boxes; ++b) {
    std::array<std::size_t, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[a] = rng.below(s[a] - 2);
      hi[a] = lo[a] + 1 + rng.below(s[a] - lo[a] - 1);
    }
    for (std::size_t d = lo[0]; d <= hi[0]; ++d)
      for (std::size_t h = lo[1]; h <= hi[1]; ++h)
        for (std::size_t w = lo[2]; w <= hi[2]; ++w) m.at(d, h, w) = 1;
  }
  return m;
}

LabelVolume shifted(const LabelVolume& m, std::size_t dd, std::size_t dh, std::size_t dw) {
  LabelVolume out(m.shape);
  for (std::size_t d = 0; d + dd < m.shape[0]; ++d)
    for (std::size_t h = 0; h + dh < m.shape[1]; ++h)
      for (std::size_t w = 0; w + dw < m.shape[2]; ++w) out.at(d + dd, h + dh, w + dw) = m.at(d, h, w);
  return out;
}

}  // namespace

TEST(Overlap, IdentityAndDisjoint) {
  LabelVolume a({4, 4, 4}), b({4, 4, 4});
  a.at(1, 1, 1) = 1;
  b.at(2, 2, 2) = 1;
  EXPECT_EQ(dice_jaccard(a, a).dice, 1.0);
  EXPECT_EQ(dice_jaccard(a, a).jaccard, 1.0);
  EXPECT_EQ(dice_jaccard(a, b).dice, 0.0);
  EXPECT_EQ(dice_jaccard(a, b).jaccard, 0.0);
}

TEST(Overlap, OneInsideTwo) {
  LabelVolume p({4, 4, 4}), t({4, 4, 4});
  p.at(0, 0, 0) = 1;
  t.at(0, 0, 0) = t.at(0, 0, 1) = 1;
  const auto o = dice_jaccard(p, t);
  EXPECT_DOUBLE_EQ(o.dice, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(o.jaccard, 0.5);
  EXPECT_NEAR(o.dice / (2.0 - o.dice), o.jaccard, 1e-15);
}

TEST(Overlap, EmptyConventions) {
  LabelVolume empty({4, 4, 4}), one({4, 4, 4});
  one.at(3, 3, 3) = 1;
  EXPECT_EQ(dice_jaccard(empty, empty).dice, 1.0);
  EXPECT_EQ(dice_jaccard(empty, empty).jaccard, 1.0);
  EXPECT_EQ(dice_jaccard(empty, one).dice, 0.0);
  EXPECT_EQ(dice_jaccard(one, empty).jaccard, 0.0);
}

TEST(Overlap, ShapeMismatchIsRejected) {
  EXPECT_THROW(dice_jaccard(LabelVolume({4, 4, 4}), LabelVolume({4, 4, 5})), ShapeError);
}

TEST(Overlap, JaccardIdentityOnRandomMasks) {
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto a = random_mask(rng, {6, 6, 6}, rng.uniform()), b = random_mask(rng, {6, 6, 6}, rng.uniform());
    const auto o = dice_jaccard(a, b);
    EXPECT_NEAR(o.jaccard, o.dice / (2.0 - o.dice), 1e-12);
  }
}

TEST(Surface, SingleVoxelAndCubeShell) {
  LabelVolume one({5, 5, 5});
  one.at(2, 3, 1) = 1;
  EXPECT_EQ(surface_voxels(one), (std::vector<Voxel>{{2, 3, 1}}));

  LabelVolume cube({6, 6, 6});
  for (std::size_t d = 1; d < 5; ++d)
    for (std::size_t h = 1; h < 5; ++h)
      for (std::size_t w = 1; w < 5; ++w) cube.at(d, h, w) = 1;
  EXPECT_EQ(surface_voxels(cube).size(), 56u);
  EXPECT_TRUE(surface_voxels(LabelVolume({3, 3, 3})).empty());
}

TEST(Surface, VolumeBorderCountsAsBackground) {
  LabelVolume full({3, 3, 3}, 1);
  EXPECT_EQ(surface_voxels(full).size(), 26u);
}

TEST(SurfaceDistance, IdenticalMasksAreZero) {
  Rng rng(2);
  const auto m = random_boxes(rng, {10, 10, 10});
  const auto d = hd95_asd(m, m);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->hd95, 0.0);
  EXPECT_EQ(d->asd, 0.0);
}

TEST(SurfaceDistance, SingleVoxelsThreeApart) {
  LabelVolume a({8, 8, 8}), b({8, 8, 8});
  a.at(2, 4, 4) = 1;
  b.at(5, 4, 4) = 1;
  const auto d = hd95_asd(a, b);
  ASSERT_TRUE(d);
  EXPECT_EQ(d->hd95, 3.0);
  EXPECT_EQ(d->asd, 3.0);
}

TEST(SurfaceDistance, EmptyMaskIsUndefined) {
  LabelVolume a({8, 8, 8}), b({8, 8, 8});
  a.at(1, 1, 1) = 1;
  EXPECT_FALSE(hd95_asd(a, b));
  EXPECT_FALSE(hd95_asd(b, a));
  EXPECT_FALSE(evaluate_masks(a, b).surface);
}

TEST(SurfaceDistance, MatchesBruteForceOracle) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const bool boxes = i % 2 == 0;
    const auto a = boxes ? random_boxes(rng, {12, 12, 12}) : random_mask(rng, {12, 12, 12}, rng.uniform(0.02, 0.6));
    const auto b = boxes ? random_boxes(rng, {12, 12, 12}) : random_mask(rng, {12, 12, 12}, rng.uniform(0.02, 0.6));
    const auto fast = hd95_asd(a, b);
    const auto slow = oracle::hd95_asd_brute(a, b);
    ASSERT_EQ(fast.has_value(), slow.has_value());
    if (!fast) continue;
    EXPECT_NEAR(fast->hd95, slow->hd95, 1e-9) << "instance " << i;
    EXPECT_NEAR(fast->asd, slow->asd, 1e-9) << "instance " << i;
  }
}

TEST(SurfaceDistance, SymmetricBoundedAndTranslationInvariant) {
  Rng rng(4);
  for (int i = 0; i < 30; ++i) {
    const auto a = random_boxes(rng, {12, 12, 12});
    const auto b = random_boxes(rng, {12, 12, 12});
    const auto ab = hd95_asd(a, b), ba = hd95_asd(b, a);
    ASSERT_TRUE(ab && ba);
    EXPECT_EQ(ab->hd95, ba->hd95);
    EXPECT_NEAR(ab->asd, ba->asd, 1e-12);
    const auto all = surface_distances(a, b);
    const double max_d = *std::max_element(all.begin(), all.end());
    EXPECT_LE(ab->hd95, max_d);
    EXPECT_LE(ab->asd, max_d);

    // Shift both inside a larger grid so nothing falls off the edge.
    LabelVolume big_a({16, 16, 16}), big_b({16, 16, 16});
    for (std::size_t d = 0; d < 12; ++d)
      for (std::size_t h = 0; h < 12; ++h)
        for (std::size_t w = 0; w < 12; ++w) {
          big_a.at(d, h, w) = a.at(d, h, w);
          big_b.at(d, h, w) = b.at(d, h, w);
        }
    const auto base = evaluate_masks(big_a, big_b);
    const auto moved = evaluate_masks(shifted(big_a, 2, 1, 3), shifted(big_b, 2, 1, 3));
    EXPECT_EQ(base.dice, moved.dice);
    EXPECT_EQ(base.jaccard, moved.jaccard);
    ASSERT_TRUE(base.surface && moved.surface);
    EXPECT_NEAR(base.surface->hd95, moved.surface->hd95, 1e-12);
    EXPECT_NEAR(base.surface->asd, moved.surface->asd, 1e-12);
  }
}

TEST(Percentile, LinearInterpolationBetweenRanks) {
  EXPECT_DOUBLE_EQ(percentile_linear({0.0, 10.0}, 0.95), 9.5);
  EXPECT_DOUBLE_EQ(percentile_linear({4.0, 1.0, 3.0, 2.0, 5.0}, 0.5), 3.0);
  EXPECT_DOUBLE_EQ(percentile_linear({7.0}, 0.95), 7.0);
}

TEST(Csv, MeanRowIsArithmeticMeanAndSentinelIsExplicit) {
  LabelVolume t({8, 8, 8}), p1({8, 8, 8}), p2({8, 8, 8});
  t.at(1, 1, 1) = t.at(1, 1, 2) = 1;
  p1.at(1, 1, 1) = 1;
  const std::vector<MetricReport> rows{evaluate_masks(p1, t), evaluate_masks(p2, t)};
  std::ostringstream os;
  write_metrics_csv(os, {"s0", "s1"}, rows);
  const std::string csv = os.str();
  EXPECT_NE(csv.find("sample_id,dice,jaccard,hd95,asd\n"), std::string::npos);
  EXPECT_NE(csv.find("s1,0,0,undefined,undefined\n"), std::string::npos);
  const auto s = summarize(rows);
  EXPECT_NEAR(s.dice, (rows[0].dice + rows[1].dice) / 2.0, 1e-12);
  EXPECT_EQ(s.undefined_surface, 1u);
  ASSERT_TRUE(s.hd95);
  EXPECT_EQ(*s.hd95, rows[0].surface->hd95);
  EXPECT_NE(csv.find("mean," + format_metric(s.dice)), std::string::npos);
}
