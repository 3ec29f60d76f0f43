#include <gtest/gtest.h>

#include <cmath>

#include "c3s3/oracles.hpp"
#include "c3s3/rng.hpp"
#include "c3s3/tensor.hpp"

using namespace c3s3;

namespace {

Tensor leaf(Shape s, std::vector<double> v) { return Tensor(std::move(s), std::move(v)).set_requires_grad(); }

Tensor random_leaf(Rng& rng, const Shape& s) {
  Tensor t(s);
  for (auto& x : t.data()) x = rng.uniform(-1.0, 1.0);
  return t.set_requires_grad();
}

}  // namespace

TEST(Elementwise, ReluClampsNegatives) {
  const Tensor y = relu(Tensor(Shape{2}, {-1.5, 2.5}));
  EXPECT_EQ(y.data()[0], 0.0);
  EXPECT_EQ(y.data()[1], 2.5);
}

TEST(Elementwise, SoftmaxOfEqualLogitsIsHalf) {
  const Tensor y = softmax_channel(Tensor(Shape{1, 2, 2, 2, 2}, 0.7));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Elementwise, SoftmaxChannelsSumToOne) {
  Rng rng(5);
  Tensor x(Shape{2, 3, 2, 3, 2});
  for (auto& v : x.data()) v = rng.uniform(-30.0, 30.0);
  const Tensor y = softmax_channel(x);
  const std::size_t spatial = 12;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < spatial; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double p = y.data()[(b * 3 + c) * spatial + i];
        EXPECT_GE(p, 0.0);
        s += p;
      }
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(Elementwise, MismatchedShapesAreRejected) {
  EXPECT_THROW(add(Tensor(Shape{1, 2, 2, 2, 2}), Tensor(Shape{1, 3, 2, 2, 2})), ShapeError);
  EXPECT_THROW(mul(Tensor(Shape{3}), Tensor(Shape{4})), ShapeError);
  EXPECT_THROW(concat_channel(Tensor(Shape{1, 1, 2, 2, 2}), Tensor(Shape{1, 1, 4, 2, 2})), ShapeError);
}

TEST(Reduction, MeanOfFourValues) { EXPECT_DOUBLE_EQ(mean(Tensor(Shape{4}, {1, 2, 3, 6})).item(), 3.0); }

TEST(Pooling, ConstantBlockPoolsToItself) {
  EXPECT_DOUBLE_EQ(avg_pool3d(Tensor(Shape{1, 1, 2, 2, 2}, 5.0)).item(), 5.0);
}

TEST(Pooling, SingleHotBlockAveragesToOne) {
  EXPECT_DOUBLE_EQ(avg_pool3d(Tensor(Shape{1, 1, 2, 2, 2}, {0, 0, 0, 0, 0, 0, 0, 8})).item(), 1.0);
}

TEST(Pooling, UpsampleReplicates) {
  const Tensor y = nearest_upsample3d(Tensor(Shape{1, 1, 1, 1, 1}, 3.0));
  ASSERT_EQ(y.numel(), 8u);
  for (double v : y.data()) EXPECT_EQ(v, 3.0);
}

TEST(Pooling, IndivisibleExtentIsRejected) {
  EXPECT_THROW(avg_pool3d(Tensor(Shape{1, 1, 3, 2, 2})), ShapeError);
}

TEST(Backward, LinearFunctionGradientIsInput) {
  Tape tape;
  TapeScope scope(tape);
  Tensor w = leaf({3}, {0.5, -1.0, 2.0});
  const Tensor x({3}, {4.0, 5.0, -6.0});
  backward(sum(mul(w, x)));
  EXPECT_EQ(w.grad_values(), (std::vector<double>{4.0, 5.0, -6.0}));
}

TEST(Backward, SquaredOffsetAtFive) {
  Tape tape;
  TapeScope scope(tape);
  Tensor w = leaf({1}, {5.0});
  const Tensor d = sub(w, Tensor::scalar(3.0));
  backward(mean(mul(d, d)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor w = leaf({2}, {1.0, 2.0});
  for (int i = 0; i < 2; ++i) {
    Tape tape;
    TapeScope scope(tape);
    backward(sum(scale(w, 3.0)));
  }
  EXPECT_EQ(w.grad_values(), (std::vector<double>{6.0, 6.0}));
}

TEST(Backward, NonScalarLossIsRejected) {
  Tape tape;
  TapeScope scope(tape);
  Tensor w = leaf({2}, {1.0, 2.0});
  EXPECT_THROW(backward(scale(w, 2.0)), ShapeError);
}

TEST(StopGradient, ValuesPassThroughUnchanged) {
  const Tensor x({3}, {0.1, -2.0, 7.5});
  const Tensor y = stop_gradient(x);
  EXPECT_EQ(y.values(), x.values());
  EXPECT_FALSE(y.requires_grad());
}

TEST(StopGradient, BlocksGradient) {
  Tape tape;
  TapeScope scope(tape);
  Tensor a = leaf({3}, {1.0, 2.0, 3.0});
  Tensor b = leaf({3}, {4.0, 5.0, 6.0});
  backward(mean(mul(stop_gradient(a), b)));
  EXPECT_EQ(a.grad_values(), (std::vector<double>(3, 0.0)));
  EXPECT_EQ(b.grad_values(), (std::vector<double>{1.0 / 3, 2.0 / 3, 1.0}));
}

// L(a) = sum(a * a) + sum(sg(a) * a): only the attached factor of the second
// product contributes, so dL/da_i = 2 a_i + a_i = 3 a_i.
TEST(StopGradient, MixedPathsMatchHandDerivation) {
  Tape tape;
  TapeScope scope(tape);
  Tensor a = leaf({3}, {1.0, -2.0, 0.5});
  backward(add(sum(mul(a, a)), sum(mul(stop_gradient(a), a))));
  const auto g = a.grad_values();
  EXPECT_DOUBLE_EQ(g[0], 3.0);
  EXPECT_DOUBLE_EQ(g[1], -6.0);
  EXPECT_DOUBLE_EQ(g[2], 1.5);
}

TEST(Flip, IsAnInvolution) {
  Rng rng(3);
  Tensor x = random_leaf(rng, {2, 2, 3, 4, 5});
  for (int axis = -1; axis < 3; ++axis) {
    const std::vector<int> axes{axis, 2 - axis};
    EXPECT_EQ(flip_spatial(flip_spatial(x, axes), axes).values(), x.values());
  }
}

TEST(Flip, MirrorsOnlyItsOwnSample) {
  Tensor x(Shape{2, 1, 2, 2, 2});
  for (std::size_t i = 0; i < 16; ++i) x.data()[i] = static_cast<double>(i);
  const Tensor y = flip_spatial(x, {2, -1});
  EXPECT_EQ(y.data()[0], 1.0);
  EXPECT_EQ(y.data()[1], 0.0);
  for (std::size_t i = 8; i < 16; ++i) EXPECT_EQ(y.data()[i], x.data()[i]);
}

TEST(Composition, ChainRuleMatchesFiniteDifferences) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_leaf(rng, {1, 3, 2, 2, 2});
    Tensor r = random_leaf(rng, {1, 3, 2, 2, 2});
    r.set_requires_grad(false);
    oracle::GradCheckProblem p{{&x}, [&] {
                                 const Tensor s = softmax_channel(scale(sigmoid(x), 3.0));
                                 return sum(mul(normalize_channel(add(s, x)), r));
                               }};
    const auto res = oracle::grad_check(p, 0, trial);
    EXPECT_LT(res.relative_error, oracle::kGradRelativeTolerance) << "trial " << trial;
  }
}

TEST(Determinism, SameInputsGiveBitIdenticalOutputs) {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_leaf(rng, {1, 2, 4, 4, 4});
    Tape tape;
    TapeScope scope(tape);
    Tensor y = sum(relu(avg_pool3d(mul(x, x))));
    backward(y);
    auto g = x.grad_values();
    g.push_back(y.item());
    return g;
  };
  EXPECT_EQ(run(), run());
}
