#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "iteach/gradcheck.hpp"
#include "iteach/mixers.hpp"
#include "iteach/rng.hpp"

using namespace iteach;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

using Mat = std::vector<std::vector<double>>;

Mat to_mat(const Tensor& t) {
  Mat m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t r = 0; r < t.dim(0); ++r)
    for (std::size_t c = 0; c < t.dim(1); ++c) m[r][c] = t(r, c);
  return m;
}

Mat mm(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Textbook multi-head attention written with plain loops. `bias` is
// indexed [i][j][h] or empty.
Mat attention_oracle(const Mat& x, const Mat& mem, const AttentionWeights& w, std::size_t heads,
                     const std::vector<bool>& valid, const std::vector<double>& bias = {}) {
  const Mat q = mm(x, to_mat(w.q.weight())), k = mm(mem, to_mat(w.k.weight())), v = mm(mem, to_mat(w.v.weight()));
  const std::size_t L = x.size(), M = mem.size(), d = q[0].size(), hd = d / heads;
  Mat cat(L, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(M, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t j = 0; j < M; ++j) {
        if (!valid[j]) continue;
        double dot = 0.0;
        for (std::size_t c = 0; c < hd; ++c) dot += q[i][h * hd + c] * k[j][h * hd + c];
        s[j] = dot / std::sqrt(static_cast<double>(hd)) + (bias.empty() ? 0.0 : bias[(i * M + j) * heads + h]);
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < M; ++j) z += valid[j] ? std::exp(s[j] - mx) : 0.0;
      for (std::size_t j = 0; j < M; ++j) {
        if (!valid[j]) continue;
        const double p = std::exp(s[j] - mx) / z;
        for (std::size_t c = 0; c < hd; ++c) cat[i][h * hd + c] += p * v[j][h * hd + c];
      }
    }
  return mm(cat, to_mat(w.o.weight()));
}

void expect_near(const Tensor& got, const Mat& want, double tol) {
  ASSERT_EQ(got.dim(0), want.size());
  for (std::size_t r = 0; r < want.size(); ++r)
    for (std::size_t c = 0; c < want[r].size(); ++c) EXPECT_NEAR(got(r, c), want[r][c], tol) << r << "," << c;
}

ContextChangeMap make_bias(const Tensor& e) {
  ContextChangeMap map;
  map.E = e;
  map.length = e.dim(0);
  for (std::size_t h = 0; h < e.dim(2); ++h) map.heads.push_back(channel(e, h));
  return map;
}

}  // namespace

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
  Rng rng(1);
  ParamRegistry reg;
  AttentionMixer att(reg, "a", 4, 2, rng);
  const Tensor x = random_tensor({1, 4}, rng);
  const Tensor y = att(x, nullptr, {true});
  const Mat want = mm(mm(to_mat(x), to_mat(att.weights().v.weight())), to_mat(att.weights().o.weight()));
  expect_near(y, want, 1e-14);
}

TEST(Attention, MatchesLoopOracle) {
  Rng rng(2);
  ParamRegistry reg;
  AttentionMixer att(reg, "a", 6, 3, rng);
  const Tensor x = random_tensor({5, 6}, rng);
  const std::vector<bool> valid{true, true, true, false, true};
  expect_near(att(x, nullptr, valid), attention_oracle(to_mat(x), to_mat(x), att.weights(), 3, valid), 1e-12);
}

TEST(Attention, BiasedMatchesLoopOracle) {
  Rng rng(3);
  ParamRegistry reg;
  AttentionMixer att(reg, "a", 4, 2, rng);
  const Tensor x = random_tensor({4, 4}, rng);
  const Tensor e = random_tensor({4, 4, 2}, rng, -2, 2);
  const auto bias = make_bias(e);
  const std::vector<bool> valid(4, true);
  expect_near(att(x, &bias, valid), attention_oracle(to_mat(x), to_mat(x), att.weights(), 2, valid, e.values()),
              1e-12);
}

TEST(Attention, ZeroBiasEqualsUnbiasedExactly) {
  Rng rng(4);
  ParamRegistry reg;
  AttentionMixer att(reg, "a", 8, 2, rng);
  const Tensor x = random_tensor({6, 8}, rng);
  const auto bias = make_bias(Tensor({6, 6, 2}));
  const std::vector<bool> valid{true, true, true, true, false, false};
  EXPECT_EQ(att(x, &bias, valid).values(), att(x, nullptr, valid).values());
}

TEST(Attention, RowConstantBiasShiftIsInvisible) {
  Rng rng(5);
  ParamRegistry reg;
  AttentionMixer att(reg, "a", 4, 2, rng);
  const Tensor x = random_tensor({5, 4}, rng);
  const Tensor e = random_tensor({5, 5, 2}, rng);
  Tensor shifted = e.detach();
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t h = 0; h < 2; ++h) {
      const double c = 3.0 * static_cast<double>(i) - 1.5 * static_cast<double>(h);
      for (std::size_t j = 0; j < 5; ++j) shifted[(i * 5 + j) * 2 + h] += c;
    }
  const auto b1 = make_bias(e), b2 = make_bias(shifted);
  const std::vector<bool> valid(5, true);
  const Tensor y1 = att(x, &b1, valid), y2 = att(x, &b2, valid);
  for (std::size_t k = 0; k < y1.size(); ++k) EXPECT_NEAR(y1[k], y2[k], 1e-12);
}

TEST(Attention, HeadsMustDivideWidth) {
  Rng rng(6);
  ParamRegistry reg;
  EXPECT_THROW(AttentionMixer(reg, "a", 6, 4, rng), ConfigError);
}

TEST(Attention, ProjectionsHaveNoBias) {
  Rng rng(7);
  ParamRegistry reg;
  AttentionMixer att(reg, "a", 4, 2, rng);
  EXPECT_EQ(reg.size(), 4u);
  EXPECT_FALSE(att.weights().q.has_bias());
  EXPECT_FALSE(att.weights().o.has_bias());
}

TEST(CrossAttention, SingleValidKeyReturnsItsProjectedValue) {
  Rng rng(8);
  ParamRegistry reg;
  CrossAttention cross(reg, "c", 4, 2, rng);
  const Tensor q = random_tensor({3, 4}, rng);
  const Tensor mem = random_tensor({3, 4}, rng);
  const Tensor y = cross(q, mem, {false, true, false});
  const Mat vo = mm(mm(to_mat(mem), to_mat(cross.weights().v.weight())), to_mat(cross.weights().o.weight()));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(y(i, c), vo[1][c], 1e-14);
}

TEST(CrossAttention, MatchesLoopOracle) {
  Rng rng(9);
  ParamRegistry reg;
  CrossAttention cross(reg, "c", 4, 2, rng);
  const Tensor q = random_tensor({4, 4}, rng), mem = random_tensor({4, 4}, rng);
  const std::vector<bool> valid{true, true, true, false};
  expect_near(cross(q, mem, valid), attention_oracle(to_mat(q), to_mat(mem), cross.weights(), 2, valid), 1e-12);
}

TEST(MlpMixer, MatchesTransposedTwoLayerOracle) {
  Rng rng(10);
  ParamRegistry reg;
  MlpMixer mlp(reg, "m", 4, rng);
  const Tensor x = random_tensor({4, 3}, rng);
  const std::vector<bool> valid{true, true, true, false};
  const Tensor y = mlp(x, valid);
  const Mat w1 = to_mat(mlp.fc1().weight()), w2 = to_mat(mlp.fc2().weight());
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> col(4), hid(4, 0.0);
    for (std::size_t r = 0; r < 4; ++r) col[r] = valid[r] ? x(r, c) : 0.0;
    for (std::size_t o = 0; o < 4; ++o) {
      double s = mlp.fc1().bias()[o];
      for (std::size_t r = 0; r < 4; ++r) s += col[r] * w1[r][o];
      hid[o] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    for (std::size_t o = 0; o < 4; ++o) {
      double s = mlp.fc2().bias()[o];
      for (std::size_t r = 0; r < 4; ++r) s += hid[r] * w2[r][o];
      EXPECT_NEAR(y(o, c), s, 1e-12);
    }
  }
}

TEST(MlpMixer, IdentityLayersGiveGeluOfInput) {
  Rng rng(11);
  ParamRegistry reg;
  MlpMixer mlp(reg, "m", 3, rng);
  for (Linear* fc : {&mlp.fc1(), &mlp.fc2()}) {
    fc->weight().values() = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    fc->bias().values() = {0, 0, 0};
  }
  const Tensor x = random_tensor({3, 2}, rng, -2, 2);
  const Tensor y = mlp(x, {true, true, true});
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double v = x[k];
    EXPECT_NEAR(y[k], 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))), 1e-15);
  }
}

TEST(MlpMixer, RejectsUnpaddedInput) {
  Rng rng(12);
  ParamRegistry reg;
  MlpMixer mlp(reg, "m", 5, rng);
  EXPECT_THROW(mlp(Tensor({4, 2}), std::vector<bool>(4, true)), DimensionError);
}

TEST(Pooling, MaxOfThreeTokens) {
  const Tensor x({3, 1}, std::vector<double>{1, 5, 2});
  EXPECT_EQ(max_pool_tokens(x, {true, true, true}).values(), (std::vector<double>{5, 5, 5}));
}

TEST(Pooling, AverageOfConstantIsUnchanged) {
  const Tensor x({5, 2}, 1.25);
  EXPECT_EQ(avg_pool_tokens(x, std::vector<bool>(5, true)).values(), x.values());
}

TEST(Pooling, AverageSkipsEdgesAndPadding) {
  const Tensor x({4, 1}, std::vector<double>{2, 4, 9, 100});
  const Tensor y = avg_pool_tokens(x, {true, true, true, false});
  EXPECT_DOUBLE_EQ(y[0], 3.0);
  EXPECT_DOUBLE_EQ(y[1], 5.0);
  EXPECT_DOUBLE_EQ(y[2], 6.5);
  EXPECT_DOUBLE_EQ(y[3], 9.0);
}

TEST(Pooling, Gradcheck) {
  Rng rng(13);
  const Tensor x = random_tensor({6, 3}, rng);
  const Tensor r = random_tensor({6, 3}, rng);
  const std::vector<bool> valid{true, true, false, true, true, true};
  EXPECT_LT(gradcheck([&] { return sum(mul(avg_pool_tokens(x, valid), r)); }, {x}), 1e-6);
  EXPECT_LT(gradcheck([&] { return sum(mul(max_pool_tokens(x, valid), r)); }, {x}), 1e-6);
}

TEST(Router, IdentityIsAllOnes) {
  const Router router(1);
  EXPECT_EQ(router.weights(Tensor({3, 4}, 0.3)).values(), (std::vector<double>{1, 1, 1}));
  EXPECT_THROW(Router(2), ConfigError);
}

TEST(Router, ZeroFcGivesUniformWeights) {
  Rng rng(14);
  ParamRegistry reg;
  Router router(reg, "r", 3, 4, rng);
  std::fill(router.fc().weight().values().begin(), router.fc().weight().values().end(), 0.0);
  std::fill(router.fc().bias().values().begin(), router.fc().bias().values().end(), 0.0);
  const Tensor w = router.weights(random_tensor({5, 3}, rng));
  for (double v : w.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Router, MatchesSoftmaxOracleAndSumsToOne) {
  Rng rng(15);
  ParamRegistry reg;
  Router router(reg, "r", 3, 4, rng);
  EXPECT_EQ(reg.all().front().group, ParamGroup::Router);
  const Tensor x = random_tensor({6, 3}, rng, -3, 3);
  const Tensor w = router.weights(x);
  const Mat logits = mm(to_mat(x), to_mat(router.fc().weight()));
  for (std::size_t i = 0; i < 6; ++i) {
    double z = 0.0, total = 0.0;
    for (std::size_t o = 0; o < 4; ++o) z += std::exp(logits[i][o] + router.fc().bias()[o]);
    for (std::size_t o = 0; o < 4; ++o) {
      EXPECT_NEAR(w(i, o), std::exp(logits[i][o] + router.fc().bias()[o]) / z, 1e-14);
      total += w(i, o);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(MixTokens, OneHotSelectsCandidate) {
  Rng rng(16);
  const std::vector<Tensor> outs{random_tensor({3, 2}, rng), random_tensor({3, 2}, rng), random_tensor({3, 2}, rng)};
  const Tensor w = Tensor::matrix({{0, 1, 0}, {1, 0, 0}, {0, 0, 1}});
  const Tensor y = mix_tokens(outs, w);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_EQ(y(0, c), outs[1](0, c));
    EXPECT_EQ(y(1, c), outs[0](1, c));
    EXPECT_EQ(y(2, c), outs[2](2, c));
  }
}

TEST(MixTokens, ConvexCombinationStaysInsideCandidateRange) {
  Rng rng(17);
  ParamRegistry reg;
  MixerSet set(reg, "s", all_mixer_kinds(), 4, 2, 6, rng);
  Router router(reg, "r", 4, 4, rng);
  const std::vector<bool> valid{true, true, true, true, false, false};
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({6, 4}, rng, -2, 2);
    const auto outs = set.evaluate_all(x, nullptr, valid);
    const Tensor y = mix_tokens(outs, router.weights(x));
    for (std::size_t k = 0; k < y.size(); ++k) {
      double lo = INFINITY, hi = -INFINITY;
      for (const auto& o : outs) {
        lo = std::min(lo, o[k]);
        hi = std::max(hi, o[k]);
      }
      EXPECT_GE(y[k], lo - 1e-9);
      EXPECT_LE(y[k], hi + 1e-9);
    }
  }
}

TEST(MixTokens, RejectsMismatchedWeights) {
  const std::vector<Tensor> outs{Tensor({3, 2}), Tensor({3, 2})};
  EXPECT_THROW(mix_tokens(outs, Tensor({3, 3})), DimensionError);
}

TEST(TokenMixer, GradientsReachEveryCandidate) {
  Rng rng(18);
  ParamRegistry reg;
  TokenMixer mixer(MixerSet(reg, "s", all_mixer_kinds(), 4, 2, 5, rng), Router(reg, "r", 4, 4, rng));
  const Tensor x = random_tensor({5, 4}, rng);
  const Tensor r = random_tensor({5, 4}, rng);
  const auto bias = make_bias(random_tensor({5, 5, 2}, rng));
  const std::vector<bool> valid{true, true, true, true, false};
  std::vector<Tensor> params;
  for (const auto& p : reg.all()) params.push_back(p.value);
  params.push_back(x);
  EXPECT_LT(gradcheck([&] { return sum(mul(mixer(x, &bias, valid), r)); }, params), 1e-5);
}
