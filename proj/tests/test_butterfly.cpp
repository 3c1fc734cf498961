#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "bvit/butterfly.hpp"
#include "bvit/ops.hpp"
#include "numeric_check.hpp"

using namespace bvit;
using bvit::testing::numeric_grad;
using bvit::testing::rel_error;

namespace {

ButterflyAngles<double> random_angles(Rng& rng, std::size_t d, std::size_t layers) {
  ButterflyAngles<double> a(d, layers);
  a.angles = gaussian<double>(rng, a.angles.shape(), 0.0, 1.5);
  return a;
}

double row_norm(const Tensor<double>& t, std::size_t r) {
  double s = 0;
  for (double v : t.row(r)) s += v * v;
  return std::sqrt(s);
}

}  // namespace

TEST(Butterfly, ShapesAndParameterCount) {
  const ButterflyAngles<double> a(256, 2);
  EXPECT_EQ(a.padded_dim, 256u);
  EXPECT_EQ(a.parameter_count(), 256u);
  const ButterflyAngles<double> b(20, 3);
  EXPECT_EQ(b.padded_dim, 32u);
  EXPECT_EQ(b.angles.shape(), (Shape{3, 16}));
  EXPECT_EQ(next_pow2(1), 1u);
  EXPECT_EQ(next_pow2(5), 8u);
  EXPECT_EQ(next_pow2(64), 64u);
}

TEST(Butterfly, SingleQuarterTurn) {
  ButterflyAngles<double> a(2, 1);
  a.angle(0, 0) = M_PI / 2;
  const auto y = butterfly_forward(Tensor<double>::matrix(1, 2, {1, 0}), a);
  EXPECT_NEAR(y[0], 0.0, 1e-15);
  EXPECT_NEAR(y[1], 1.0, 1e-15);
}

TEST(Butterfly, TwoByTwoIsTheGivensBlock) {
  ButterflyAngles<double> a(2, 1);
  const double alpha = 0.37;
  a.angle(0, 0) = alpha;
  const auto b = materialize(a);
  EXPECT_NEAR(b(0, 0), std::cos(alpha), 1e-15);
  EXPECT_NEAR(b(0, 1), -std::sin(alpha), 1e-15);
  EXPECT_NEAR(b(1, 0), std::sin(alpha), 1e-15);
  EXPECT_NEAR(b(1, 1), std::cos(alpha), 1e-15);
}

TEST(Butterfly, ZeroAnglesPermuteIndependentlyOfData) {
  const ButterflyAngles<double> a(8, 2);
  const auto p = materialize(a);
  for (std::size_t r = 0; r < 8; ++r) {
    double ones = 0, sum = 0;
    for (std::size_t c = 0; c < 8; ++c) {
      ones += p(r, c) == 1.0;
      sum += p(r, c);
    }
    EXPECT_EQ(ones, 1);
    EXPECT_EQ(sum, 1);
  }
  Rng rng(1);
  const auto x = gaussian<double>(rng, {5, 8}, 0.0, 1.0);
  const auto y = butterfly_forward(x, a);
  for (std::size_t r = 0; r < 5; ++r) {
    EXPECT_NEAR(row_norm(y, r), row_norm(x, r), 1e-12);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        if (p(i, j) == 1.0) {
          EXPECT_EQ(y(r, i), x(r, j));
        }
  }
}

TEST(Butterfly, PreservesNormInFloatIncludingPaddedWidths) {
  Rng rng(2);
  for (std::size_t d : {3, 5, 8, 12, 33, 100}) {
    ButterflyAngles<float> a(d, 2);
    a.angles = gaussian<float>(rng, a.angles.shape(), 0.0, 2.0);
    const auto x = gaussian<float>(rng, {16, d}, 0.0, 1.0);
    const auto y = butterfly_forward(x, a);
    for (std::size_t r = 0; r < 16; ++r) {
      double nx = 0, ny = 0;
      for (std::size_t c = 0; c < d; ++c) {
        nx += double(x(r, c)) * x(r, c);
        ny += double(y(r, c)) * y(r, c);
      }
      // Padding lanes may receive mass, so stripped outputs can only lose norm.
      if (d == next_pow2(d)) {
        EXPECT_NEAR(std::sqrt(ny), std::sqrt(nx), 1e-5) << "d=" << d;
      } else {
        EXPECT_LE(std::sqrt(ny), std::sqrt(nx) + 1e-5) << "d=" << d;
      }
    }
  }
}

TEST(Butterfly, RandomAnglesD8NormPreserved) {
  Rng rng(3);
  const auto a = random_angles(rng, 8, 2);
  const auto x = gaussian<double>(rng, {10, 8}, 0.0, 1.0);
  const auto y = butterfly_forward(x, a);
  for (std::size_t r = 0; r < 10; ++r) EXPECT_NEAR(row_norm(y, r), row_norm(x, r), 1e-6);
}

TEST(Butterfly, MaterializedMatrixIsOrthogonal) {
  Rng rng(4);
  for (std::size_t d : {2, 4, 8, 16, 64, 256}) {
    const auto b = materialize(random_angles(rng, d, 2));
    const auto bbt = matmul_nt(b, b);
    double worst = 0;
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) worst = std::max(worst, std::abs(bbt(i, j) - (i == j ? 1.0 : 0.0)));
    EXPECT_LT(worst, 1e-6) << "d=" << d;
  }
}

TEST(Butterfly, MaterializeAgreesWithForward) {
  Rng rng(5);
  const auto a = random_angles(rng, 16, 3);
  const auto x = gaussian<double>(rng, {4, 16}, 0.0, 1.0);
  EXPECT_LT(bvit::testing::max_abs_diff(butterfly_forward(x, a), matmul_nt(x, materialize(a))), 1e-12);
}

TEST(Butterfly, ZeroUpstreamGradient) {
  Rng rng(6);
  const auto a = random_angles(rng, 8, 2);
  ButterflyCache<double> cache;
  butterfly_forward(gaussian<double>(rng, {3, 8}, 0.0, 1.0), a, &cache);
  const auto g = butterfly_backward(Tensor<double>({3, 8}), a, cache);
  for (double v : g.dx.values()) EXPECT_EQ(v, 0.0);
  for (double v : g.dangles.values()) EXPECT_EQ(v, 0.0);
}

TEST(Butterfly, AngleGradientMatchesFiniteDifferences) {
  Rng rng(7);
  auto a = random_angles(rng, 4, 2);
  const auto x = gaussian<double>(rng, {3, 4}, 0.0, 1.0);
  const auto w = gaussian<double>(rng, {3, 4}, 0.0, 1.0);
  ButterflyCache<double> cache;
  butterfly_forward(x, a, &cache);
  const auto g = butterfly_backward(w, a, cache);
  auto loss = [&] { return bvit::testing::dot(butterfly_forward(x, a), w); };
  EXPECT_LT(rel_error(g.dangles, numeric_grad(loss, a.angles)), 1e-5);
}

TEST(Butterfly, InputGradientIsTransposedMatrix) {
  Rng rng(8);
  const auto a = random_angles(rng, 16, 2);
  const auto x = gaussian<double>(rng, {5, 16}, 0.0, 1.0);
  const auto w = gaussian<double>(rng, {5, 16}, 0.0, 1.0);
  ButterflyCache<double> cache;
  butterfly_forward(x, a, &cache);
  const auto g = butterfly_backward(w, a, cache);
  // Rows are row vectors, so dx = w * B.
  EXPECT_LT(bvit::testing::max_abs_diff(g.dx, matmul(w, materialize(a))), 1e-8);
}

TEST(Butterfly, PaddedGradientsMatchFiniteDifferences) {
  Rng rng(9);
  auto a = random_angles(rng, 6, 2);
  auto x = gaussian<double>(rng, {2, 6}, 0.0, 1.0);
  const auto w = gaussian<double>(rng, {2, 6}, 0.0, 1.0);
  ButterflyCache<double> cache;
  butterfly_forward(x, a, &cache);
  const auto g = butterfly_backward(w, a, cache);
  auto loss = [&] { return bvit::testing::dot(butterfly_forward(x, a), w); };
  EXPECT_LT(rel_error(g.dangles, numeric_grad(loss, a.angles)), 1e-5);
  EXPECT_LT(rel_error(g.dx, numeric_grad(loss, x)), 1e-5);
}

TEST(Butterfly, StaleCacheIsAUsageError) {
  Rng rng(10);
  const auto a = random_angles(rng, 4, 2);
  ButterflyCache<double> cache;
  const Tensor<double> g({1, 4}, 1.0);
  EXPECT_THROW(butterfly_backward(g, a, cache), UsageError);
  butterfly_forward(Tensor<double>({1, 4}, 1.0), a, &cache);
  butterfly_backward(g, a, cache);
  EXPECT_THROW(butterfly_backward(g, a, cache), UsageError);
}

TEST(Butterfly, WidthMismatchThrows) {
  const ButterflyAngles<double> a(8, 2);
  EXPECT_THROW(butterfly_forward(Tensor<double>({2, 7}), a), DimensionError);
}

TEST(Butterfly, CostIsLinearInWidthPerToken) {
  for (std::size_t d : {8, 64, 512}) {
    const ButterflyAngles<double> a(d, 2);
    ButterflyCache<double> cache;
    butterfly_forward(Tensor<double>({3, d}, 1.0), a, &cache);
    // 2 layers x d/2 pairs x 4 multiplies, per token.
    EXPECT_EQ(cache.multiply_adds, 3u * 2u * (d / 2) * 4u);
  }
}

TEST(PerfectShuffle, FourElements) {
  const auto y = perfect_shuffle(Tensor<double>::matrix(1, 4, {10, 11, 12, 13}));
  EXPECT_EQ(y.storage(), (std::vector<double>{10, 12, 11, 13}));
}

TEST(PerfectShuffle, WidthTwoIsIdentity) {
  const auto x = Tensor<double>::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(perfect_shuffle(x), x);
}

TEST(PerfectShuffle, OrderIsLog2Width) {
  for (std::size_t d : {4, 8, 16, 64}) {
    Tensor<double> x({1, d});
    std::iota(x.storage().begin(), x.storage().end(), 0.0);
    Tensor<double> y = x;
    const auto steps = static_cast<std::size_t>(std::log2(static_cast<double>(d)));
    for (std::size_t s = 0; s < steps; ++s) {
      y = perfect_shuffle(y);
      if (s + 1 < steps) {
        EXPECT_NE(y, x);
      }
    }
    EXPECT_EQ(y, x);
    EXPECT_EQ(inverse_perfect_shuffle(perfect_shuffle(x)), x);
  }
}

TEST(PerfectShuffle, OddWidthThrows) {
  EXPECT_THROW(perfect_shuffle(Tensor<double>({1, 3})), DimensionError);
}
