#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "iteach/ecce.hpp"
#include "iteach/gradcheck.hpp"
#include "iteach/rng.hpp"
#include "oracles.hpp"

using namespace iteach;

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Tensor t({r, c});
  for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

TEST(EcceParams, Defaults) {
  const EcceParams p;
  EXPECT_EQ(p.window, 7u);
  EXPECT_EQ(p.max_span, 30u);
}

TEST(EcceParams, EvenWindowIsRejected) {
  EXPECT_THROW((EcceParams{6, 30, 4, 4, 2}.validate()), ConfigError);
}

TEST(EncodeLocal, ConstantInputGivesEqualInteriorRows) {
  Rng rng(1);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 30, 2, 3, 2}, rng);
  const Tensor z = ecce.encode_local(Tensor({6, 2}, 0.7));
  for (std::size_t r = 2; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(z(r, c), z(1, c));
}

TEST(EncodeLocal, HandKernelMatchesSlidingWindow) {
  Rng rng(2);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 30, 1, 1, 1}, rng);
  ecce.kernel().values() = {1.0, 10.0, 100.0};
  ecce.kernel_bias().values() = {0.5};
  const Tensor x({5, 1}, std::vector<double>{1, 2, 3, 4, 5});
  const Tensor z = ecce.encode_local(x);
  // row i = x[i-1] + 10 x[i] + 100 x[i+1] + 0.5, zero outside
  const std::vector<double> expect{0 + 10 + 200 + 0.5, 1 + 20 + 300 + 0.5, 2 + 30 + 400 + 0.5, 3 + 40 + 500 + 0.5,
                                   4 + 50 + 0 + 0.5};
  EXPECT_EQ(z.values(), expect);
}

TEST(SpanMean, ConstantRowsFillTheBand) {
  Tensor z({5, 2});
  for (std::size_t r = 0; r < 5; ++r) {
    z(r, 0) = 2.5;
    z(r, 1) = -1.0;
  }
  const Tensor e = span_mean(z, 5, 30);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_EQ(e[(i * 5 + j) * 2], 2.5);
      EXPECT_EQ(e[(i * 5 + j) * 2 + 1], -1.0);
    }
}

TEST(SpanMean, MatchesBruteForceOnL4) {
  Rng rng(3);
  const Tensor z = random_matrix(4, 3, rng);
  const auto want = oracle::span_mean(z, 4, 30);
  const auto got = span_mean(z, 4, 30).values();
  for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
}

TEST(SpanMean, CapOfOneKeepsOnlyTheDiagonal) {
  Rng rng(4);
  const Tensor z = random_matrix(4, 2, rng);
  const Tensor e = span_mean(z, 4, 1);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      for (std::size_t c = 0; c < 2; ++c) {
        const double v = e[(i * 4 + j) * 2 + c];
        if (i == j)
          EXPECT_EQ(v, z(i, c));
        else
          EXPECT_EQ(v, 0.0);
      }
}

TEST(SpanMean, RowsBeyondLengthAreIgnored) {
  Rng rng(5);
  Tensor a = random_matrix(6, 2, rng);
  Tensor b = a.detach();
  b(5, 0) = 99.0;
  b(4, 1) = -99.0;
  const auto ea = span_mean(a, 4, 30).values();
  const auto eb = span_mean(b, 4, 30).values();
  EXPECT_EQ(ea, eb);
}

TEST(SpanMean, Gradcheck) {
  Rng rng(6);
  const Tensor z = random_matrix(7, 2, rng);
  const Tensor r({7, 7, 2}, [&] {
    std::vector<double> v(98);
    for (auto& x : v) x = rng.uniform(-1, 1);
    return v;
  }());
  EXPECT_LT(gradcheck([&] { return sum(mul(span_mean(z, 6, 3), r)); }, {z}), 1e-6);
}

TEST(Project, ZeroInputGivesFcBiasEverywhere) {
  Rng rng(7);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 30, 2, 3, 2}, rng);
  const auto map = ecce.project(Tensor({3, 3, 3}), 3);
  for (std::size_t cell = 0; cell < 9; ++cell)
    for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(map.E[cell * 2 + h], ecce.fc().bias()[h]);
}

TEST(Project, IdentityFcLeavesMapUnchanged) {
  Rng rng(8);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 30, 2, 2, 2}, rng);
  ecce.fc().weight().values() = {1, 0, 0, 1};
  ecce.fc().bias().values() = {0, 0};
  const Tensor raw = span_mean(random_matrix(3, 2, rng), 3, 30);
  EXPECT_EQ(ecce.project(raw, 3).E.values(), raw.values());
}

TEST(Project, HeadSlicesMatchChannels) {
  Rng rng(9);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 30, 2, 2, 3}, rng);
  const auto map = ecce(random_matrix(4, 2, rng), 4);
  ASSERT_EQ(map.heads.size(), 3u);
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(map.heads[h](i, j), map.E[(i * 4 + j) * 3 + h]);
}

TEST(ContextChangeMap, SymmetricForRandomInputs) {
  Rng rng(10);
  for (std::size_t L = 1; L <= 16; ++L) {
    ParamRegistry reg;
    Ecce ecce(reg, "e", EcceParams{7, 5, 3, 4, 2}, rng);
    const auto map = ecce(random_matrix(L, 3, rng), L);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t h = 0; h < 2; ++h) ASSERT_EQ(map.E[(i * L + j) * 2 + h], map.E[(j * L + i) * 2 + h]);
  }
}

TEST(ContextChangeMap, FarCellsAllEqualProjectionOfZero) {
  Rng rng(11);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 2, 2, 2, 2}, rng);
  const std::size_t L = 6;
  const auto map = ecce(random_matrix(L, 2, rng), L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) {
      if ((i > j ? i - j : j - i) < 2) continue;
      for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(map.E[(i * L + j) * 2 + h], ecce.fc().bias()[h]);
    }
}

TEST(ContextChangeMap, PaddingDoesNotChangeTheValidBlock) {
  Rng rng(12);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{7, 30, 3, 4, 2}, rng);
  const Tensor x = random_matrix(5, 3, rng);
  Tensor padded({9, 3});
  std::copy(x.data().begin(), x.data().end(), padded.data().begin());
  const auto a = ecce(x, 5);
  const auto b = ecce(padded, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t h = 0; h < 2; ++h) EXPECT_EQ(a.E[(i * 5 + j) * 2 + h], b.E[(i * 9 + j) * 2 + h]);
}

TEST(Ecce, GradientsReachKernelAndFc) {
  Rng rng(13);
  ParamRegistry reg;
  Ecce ecce(reg, "e", EcceParams{3, 4, 2, 3, 2}, rng);
  const Tensor x = random_matrix(5, 2, rng);
  Tensor r({5, 5, 2});
  for (auto& v : r.data()) v = rng.uniform(-1, 1);
  std::vector<Tensor> params;
  for (const auto& p : reg.all()) params.push_back(p.value);
  EXPECT_LT(gradcheck([&] { return sum(mul(ecce(x, 5).E, r)); }, params), 1e-4);
}
