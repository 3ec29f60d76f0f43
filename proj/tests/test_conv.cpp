#include <gtest/gtest.h>

#include "c3s3/conv.hpp"
#include "c3s3/oracles.hpp"

using namespace c3s3;

namespace {

Tensor random_tensor(Rng& rng, const Shape& s, bool grad = false) {
  Tensor t(s);
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  if (grad) t.set_requires_grad();
  return t;
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Conv3d, CenterTapScalesSingleVoxel) {
  Tensor w(Shape{1, 1, 3, 3, 3}, 0.0);
  w.data()[13] = 3.0;
  const Tensor y = conv3d(Tensor(Shape{1, 1, 1, 1, 1}, 2.0), w, Tensor(Shape{1}, 0.0));
  EXPECT_EQ(y.item(), 6.0);
}

TEST(Conv3d, ZeroInputYieldsBias) {
  Rng rng(1);
  const Tensor y = conv3d(Tensor(Shape{1, 2, 3, 3, 3}, 0.0), random_tensor(rng, {2, 2, 3, 3, 3}),
                          Tensor(Shape{2}, {0.25, -4.0}));
  for (std::size_t i = 0; i < 27; ++i) {
    EXPECT_EQ(y.data()[i], 0.25);
    EXPECT_EQ(y.data()[27 + i], -4.0);
  }
}

TEST(Conv3d, MatchesNaiveReference) {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {1, 2, 4, 4, 4});
  const Tensor w = random_tensor(rng, {3, 2, 3, 3, 3});
  const Tensor b = random_tensor(rng, {3});
  const auto ref = oracle::conv3d_naive(x.values(), x.shape(), w.values(), w.shape(), b.values());
  EXPECT_LT(max_abs_diff(conv3d(x, w, b).data(), ref), 1e-12);
}

class ConvExtent : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ConvExtent, MatchesNaiveReferenceOnOddShapes) {
  const std::size_t ks = GetParam();
  Rng rng(10 + ks);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor(rng, {2, 3, 3 + rng.below(4), 2 + rng.below(5), 1 + rng.below(7)});
    const Tensor w = random_tensor(rng, {1 + rng.below(5), 3, ks, ks, ks});
    const auto ref = oracle::conv3d_naive(x.values(), x.shape(), w.values(), w.shape(), {});
    EXPECT_LT(max_abs_diff(conv3d(x, w).data(), ref), 1e-12);
  }
}

TEST_P(ConvExtent, GradientsMatchFiniteDifferences) {
  const std::size_t ks = GetParam();
  Rng rng(20 + ks);
  Tensor x = random_tensor(rng, {2, 2, 3, 4, 5}, true);
  Tensor w = random_tensor(rng, {3, 2, ks, ks, ks}, true);
  Tensor b = random_tensor(rng, {3}, true);
  const Tensor r = random_tensor(rng, {2, 3, 3, 4, 5});
  oracle::GradCheckProblem p{{&x, &w, &b}, [&] { return sum(mul(conv3d(x, w, b), r)); }};
  EXPECT_LT(oracle::grad_check(p, 200, ks).relative_error, oracle::kGradRelativeTolerance);
}

INSTANTIATE_TEST_SUITE_P(Extents, ConvExtent, ::testing::Values(1, 3, 5));

TEST(Conv3d, RejectsChannelMismatch) {
  EXPECT_THROW(conv3d(Tensor(Shape{1, 2, 4, 4, 4}), Tensor(Shape{1, 3, 3, 3, 3})), ShapeError);
}

TEST(Conv3d, RejectsBadBiasAndEvenKernel) {
  EXPECT_THROW(conv3d(Tensor(Shape{1, 1, 4, 4, 4}), Tensor(Shape{2, 1, 3, 3, 3}), Tensor(Shape{3})), ShapeError);
  EXPECT_THROW(conv3d(Tensor(Shape{1, 1, 4, 4, 4}), Tensor(Shape{2, 1, 2, 2, 2})), ShapeError);
  EXPECT_THROW(conv3d(Tensor(Shape{1, 4, 4, 4}), Tensor(Shape{2, 1, 3, 3, 3})), ShapeError);
}
