#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ftd/rng.hpp"
#include "ftd/tensor.hpp"

using namespace ftd;

TEST(Tensor, DataLengthMustMatchShape) {
  EXPECT_THROW(Tensor<float>(Shape{2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  Tensor<double> t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t(1, 2), 1.5);
}

TEST(Tensor, ReshapeKeepsDataAndRejectsBadCount) {
  Tensor<float> t(Shape{2, 3}, std::vector<float>{0, 1, 2, 3, 4, 5});
  const auto r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r(2, 1), 5.0f);
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
}

TEST(Tensor, FiniteCheck) {
  Tensor<float> t(Shape{3});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

// Reference SplitMix64 written the usual way: state += gamma, then mix.
static std::uint64_t reference_splitmix(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

TEST(Rng, MatchesSequentialSplitMix64) {
  std::uint64_t state = 1234567;
  RngState rng{1234567, 0};
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(rng.next_u64(), reference_splitmix(state));
}

TEST(Rng, KnownFirstOutputForSeedZero) {
  // First SplitMix64 output for seed 0, as published with the reference code.
  RngState rng{0, 0};
  EXPECT_EQ(rng.next_u64(), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, CounterResumesStream) {
  RngState a{42, 0};
  for (int i = 0; i < 10; ++i) a.next_u64();
  RngState b{42, 10};
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DerivedStreamsDifferByKey) {
  EXPECT_NE(RngState::derive(0, {1}).next_u64(), RngState::derive(0, {2}).next_u64());
  EXPECT_NE(RngState::derive(0, {1, 2}).next_u64(), RngState::derive(0, {2, 1}).next_u64());
  EXPECT_EQ(RngState::derive(9, {3, 4}), RngState::derive(9, {3, 4}));
}

TEST(Rng, UniformAndIndexRanges) {
  RngState rng{7, 0};
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.next_uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(rng.next_index(7), 7u);
  }
}

TEST(SampleNormal, DeterministicForResetState) {
  RngState a{5, 3}, b{5, 3};
  EXPECT_EQ(sample_normal<double>(a, {17}), sample_normal<double>(b, {17}));
  EXPECT_EQ(a, b);
}

TEST(SampleNormal, DifferentSeedsGiveDifferentFirstDraw) {
  RngState a{1, 0}, b{2, 0};
  EXPECT_NE(sample_normal<double>(a, {1})[0], sample_normal<double>(b, {1})[0]);
}

TEST(SampleNormal, OddLengthConsumesWholePair) {
  RngState rng{3, 0};
  sample_normal<float>(rng, {3});
  EXPECT_EQ(rng.counter, 4u);
}

TEST(SampleNormal, BoxMullerMatchesHandEvaluation) {
  RngState rng{11, 0}, raw{11, 0};
  const auto z = sample_normal<double>(rng, {2});
  const double u1 = static_cast<double>((raw.next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = static_cast<double>(raw.next_u64() >> 11) * 0x1.0p-53;
  const double r = std::sqrt(-2.0 * std::log(u1));
  EXPECT_DOUBLE_EQ(z[0], r * std::cos(2.0 * M_PI * u2));
  EXPECT_DOUBLE_EQ(z[1], r * std::sin(2.0 * M_PI * u2));
}

TEST(SampleNormal, MomentsOf100kDraws) {
  RngState rng{2024, 0};
  const auto z = sample_normal<double>(rng, {100000});
  double mean = 0.0;
  for (double v : z.data()) mean += v;
  mean /= 1e5;
  double var = 0.0;
  for (double v : z.data()) var += (v - mean) * (v - mean);
  var /= (1e5 - 1);
  EXPECT_GE(mean, -0.02);
  EXPECT_LE(mean, 0.02);
  EXPECT_GE(var, 0.97);
  EXPECT_LE(var, 1.03);
}

TEST(SampleNormal, MomentsHoldAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngState rng = RngState::derive(seed, {99});
    const auto z = sample_normal<double>(rng, {20000});
    double s = 0.0, s2 = 0.0;
    for (double v : z.data()) {
      s += v;
      s2 += v * v;
    }
    // 4-sigma bands for n = 20000.
    EXPECT_LT(std::abs(s / 2e4), 4.0 / std::sqrt(2e4)) << "seed " << seed;
    EXPECT_LT(std::abs(s2 / 2e4 - 1.0), 4.0 * std::sqrt(2.0 / 2e4)) << "seed " << seed;
  }
}
