#include <gtest/gtest.h>

#include <cmath>

#include "iteach/masking.hpp"

using namespace iteach;

namespace {

Conversation ones_conversation(std::size_t L) {
  Conversation conv;
  conv.id = "c";
  for (std::size_t m = 0; m < kNumModalities; ++m) conv.features[m] = FeatureMatrix(L, 2, 1.0);
  conv.labels.assign(L, 0.0);
  return conv;
}

}  // namespace

TEST(Mask, RateZeroKeepsEverythingAndDrawsNothing) {
  Rng rng(1);
  const std::uint64_t before = Rng(1).next_u64();
  const auto mask = generate_mask(10, 0.0, rng);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_FALSE(mask.any_dropped(i));
  const auto conv = ones_conversation(10);
  EXPECT_EQ(apply_mask(conv, mask), conv);
  EXPECT_EQ(rng.next_u64(), before);
}

TEST(Mask, NoUtteranceLosesEveryModality) {
  Rng rng(2);
  for (double rate : {0.7, 0.9, 1.0})
    for (int t = 0; t < 200; ++t) {
      const auto mask = generate_mask(12, rate, rng);
      for (std::size_t i = 0; i < 12; ++i) EXPECT_TRUE(mask.keep[i][0] || mask.keep[i][1] || mask.keep[i][2]);
    }
}

TEST(Mask, RateOneKeepsExactlyOneModality) {
  Rng rng(3);
  const auto mask = generate_mask(50, 1.0, rng);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(mask.keep[i][0] + mask.keep[i][1] + mask.keep[i][2], 1);
}

TEST(Mask, PaddingRowsKeepNothing) {
  Rng rng(4);
  const auto mask = generate_mask(3, 0.0, rng, 5);
  ASSERT_EQ(mask.rows(), 5u);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    EXPECT_FALSE(mask.keep[3][m]);
    EXPECT_FALSE(mask.keep[4][m]);
  }
}

TEST(Mask, DropFrequencyWithinBinomialBounds) {
  Rng rng(5);
  const std::size_t draws = 20000;
  for (double rate : {0.1, 0.4, 0.7}) {
    std::size_t dropped = 0, slots = 0;
    for (std::size_t t = 0; t < draws / 10; ++t) {
      const auto mask = generate_mask(10, rate, rng);
      for (const auto& row : mask.keep_before_resurrection)
        for (bool k : row) {
          dropped += !k;
          ++slots;
        }
    }
    const double n = static_cast<double>(slots);
    const double sigma = std::sqrt(rate * (1 - rate) / n);
    EXPECT_NEAR(static_cast<double>(dropped) / n, rate, 3 * sigma) << rate;
  }
}

TEST(Mask, SameSeedSameMask) {
  Rng a(6), b(6);
  for (int t = 0; t < 20; ++t) EXPECT_EQ(generate_mask(15, 0.5, a).keep, generate_mask(15, 0.5, b).keep);
}

TEST(Mask, ApplyZeroesDroppedRowsOnlyAndIsIdempotent) {
  Rng rng(7);
  const auto conv = ones_conversation(8);
  const auto mask = generate_mask(8, 0.5, rng);
  const auto once = apply_mask(conv, mask);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t m = 0; m < kNumModalities; ++m)
      for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(once.features[m](i, j), mask.keep[i][m] ? 1.0 : 0.0);
  EXPECT_EQ(apply_mask(once, mask), once);
  EXPECT_EQ(once.labels, conv.labels);
}

TEST(Mask, InvalidRateAndLengthMismatchAreRejected) {
  Rng rng(8);
  EXPECT_THROW(generate_mask(4, 1.5, rng), ConfigError);
  EXPECT_THROW(generate_mask(4, -0.1, rng), ConfigError);
  EXPECT_THROW(apply_mask(ones_conversation(5), generate_mask(4, 0.2, rng)), DimensionError);
}
