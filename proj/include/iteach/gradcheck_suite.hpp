#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "iteach/data.hpp"
#include "iteach/ecce.hpp"
#include "iteach/gradcheck.hpp"
#include "iteach/mixers.hpp"
#include "iteach/model.hpp"
#include "iteach/rng.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

inline constexpr double kGradcheckTolerance = 1e-4;

struct GradcheckCase {
  std::string name;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool passed() const { return max_rel_error < kGradcheckTolerance; }
};

namespace detail {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// sum(y * r) for a fixed random r, so every output coordinate matters.
inline Tensor probe(const Tensor& y, const Tensor& r) { return sum(mul(y, r)); }

inline GradcheckCase timed(const std::string& name, const std::function<double()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckCase c{name, body(), 0.0};
  c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return c;
}

}  // namespace detail

/// Cross-entropy of a small model plus a probe on the second hidden state,
/// checked against every parameter.
inline double gradcheck_model(MixerMode mode, std::uint64_t seed) {
  Rng rng(seed);
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.layers = 3;
  cfg.max_len = 3;
  cfg.input_dims = {5, 4, 3};
  cfg.n_outputs = 3;
  cfg.mixer_mode = mode;
  cfg.ecce_window = 3;
  Model model(cfg, rng);
  Conversation conv;
  conv.id = "toy";
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    conv.features[m] = FeatureMatrix(3, cfg.input_dims[m]);
    for (auto& v : conv.features[m].values) v = rng.normal();
  }
  conv.labels = {0.0, 2.0, 1.0};
  const std::vector<int> labels{0, 2, 1};
  const std::vector<double> weights(3, 1.0);
  const Tensor r = detail::random_tensor({3, 8}, rng);
  std::vector<Tensor> params;
  for (const auto& p : model.params().all()) params.push_back(p.value);
  return gradcheck(
      [&] {
        const auto stack = model(conv);
        return add(weighted_nll(stack.logits, labels, weights), detail::probe(stack.H[1], r));
      },
      params);
}

/// Every differentiable op, then the end-to-end toy model in both mixer modes.
inline std::vector<GradcheckCase> run_gradcheck_suite(std::uint64_t seed = 7) {
  using detail::probe;
  using detail::random_tensor;
  using detail::timed;
  Rng rng(seed);
  std::vector<GradcheckCase> out;
  auto unary = [&](const std::string& name, Shape in, Shape outs, std::function<Tensor(const Tensor&)> f,
                   double lo = -1.0, double hi = 1.0) {
    const Tensor x = random_tensor(in, rng, lo, hi);
    const Tensor r = random_tensor(outs, rng);
    out.push_back(timed(name, [&] { return gradcheck([&] { return probe(f(x), r); }, {x}); }));
  };
  auto binary = [&](const std::string& name, Shape sa, Shape sb, Shape so,
                    std::function<Tensor(const Tensor&, const Tensor&)> f) {
    const Tensor a = random_tensor(sa, rng), b = random_tensor(sb, rng);
    const Tensor r = random_tensor(so, rng);
    out.push_back(timed(name, [&] { return gradcheck([&] { return probe(f(a, b), r); }, {a, b}); }));
  };

  binary("matmul", {3, 4}, {4, 5}, {3, 5}, [](auto& a, auto& b) { return matmul(a, b); });
  binary("matmul_nt", {3, 4}, {5, 4}, {3, 5}, [](auto& a, auto& b) { return matmul_nt(a, b); });
  unary("transpose", {3, 4}, {4, 3}, [](auto& x) { return transpose(x); });
  binary("add", {3, 4}, {3, 4}, {3, 4}, [](auto& a, auto& b) { return add(a, b); });
  binary("sub", {3, 4}, {3, 4}, {3, 4}, [](auto& a, auto& b) { return sub(a, b); });
  binary("mul", {3, 4}, {3, 4}, {3, 4}, [](auto& a, auto& b) { return mul(a, b); });
  unary("scale", {3, 4}, {3, 4}, [](auto& x) { return scale(x, -1.7); });
  unary("abs", {3, 4}, {3, 4}, [](auto& x) { return abs(x); }, 0.1, 1.0);
  unary("gelu", {3, 4}, {3, 4}, [](auto& x) { return gelu(x); }, -3.0, 3.0);
  binary("add_rowvec", {3, 4}, {4}, {3, 4}, [](auto& a, auto& b) { return add_rowvec(a, b); });
  binary("mul_colvec", {3, 4}, {3, 1}, {3, 4}, [](auto& a, auto& b) { return mul_colvec(a, b); });
  {
    const std::vector<double> f{1.0, 0.0, 0.5};
    unary("mask_rows", {3, 4}, {3, 4}, [f](auto& x) { return mask_rows(x, f); });
  }
  unary("sum", {3, 4}, {1}, [](auto& x) { return sum(x); });
  unary("mean", {3, 4}, {1}, [](auto& x) { return mean(x); });
  unary("reshape", {3, 4}, {2, 6}, [](auto& x) { return reshape(x, {2, 6}); });
  unary("slice_cols", {3, 5}, {3, 2}, [](auto& x) { return slice_cols(x, 1, 2); });
  binary("concat_cols", {3, 2}, {3, 3}, {3, 5}, [](auto& a, auto& b) { return concat_cols({a, b}); });
  unary("column", {3, 4}, {3}, [](auto& x) { return column(x, 2); });
  unary("channel", {3, 3, 2}, {3, 3}, [](auto& x) { return channel(x, 1); });
  {
    const std::vector<bool> valid{true, false, true, true};
    unary("masked_softmax", {3, 4}, {3, 4}, [valid](auto& x) { return masked_softmax(x, valid); }, -2.0, 2.0);
  }
  unary("softmax_rows", {3, 4}, {3, 4}, [](auto& x) { return softmax_rows(x); }, -2.0, 2.0);
  {
    const Tensor x = random_tensor({3, 5}, rng), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
    const Tensor r = random_tensor({3, 5}, rng);
    out.push_back(timed("layer_norm", [&] { return gradcheck([&] { return probe(layer_norm(x, g, b), r); }, {x, g, b}); }));
  }
  {
    const Tensor x = random_tensor({5, 3}, rng), k = random_tensor({3, 3, 2}, rng);
    const Tensor r = random_tensor({5, 2}, rng);
    out.push_back(timed("conv1d", [&] { return gradcheck([&] { return probe(conv1d(x, k, 1), r); }, {x, k}); }));
  }
  {
    const Tensor x = random_tensor({4, 3}, rng, -2.0, 2.0);
    const std::vector<int> labels{2, 0, 1, 0};
    const std::vector<double> w{1.0, 1.0, 1.0, 0.0};
    out.push_back(timed("weighted_nll", [&] { return gradcheck([&] { return weighted_nll(x, labels, w); }, {x}); }));
  }
  unary("span_mean", {6, 3}, {6, 6, 3}, [](auto& x) { return span_mean(x, 5, 3); });
  {
    ParamRegistry reg;
    Ecce ecce(reg, "ecce", EcceParams{3, 4, 4, 3, 2}, rng);
    const Tensor x = random_tensor({5, 4}, rng);
    const Tensor r = random_tensor({5, 5, 2}, rng);
    std::vector<Tensor> inputs{x};
    for (const auto& p : reg.all()) inputs.push_back(p.value);
    out.push_back(timed("ecce", [&] { return gradcheck([&] { return probe(ecce(x, 4).E, r); }, inputs); }));
  }
  {
    ParamRegistry reg;
    AttentionWeights w(reg, "attn", 4, rng);
    ContextChangeMap bias;
    bias.E = random_tensor({4, 4, 2}, rng);
    bias.length = 3;
    bias.heads = {channel(bias.E, 0), channel(bias.E, 1)};
    const Tensor q = random_tensor({4, 4}, rng), m = random_tensor({4, 4}, rng);
    const Tensor r = random_tensor({4, 4}, rng);
    const std::vector<bool> valid{true, true, true, false};
    std::vector<Tensor> inputs{q, m, bias.E};
    for (const auto& p : reg.all()) inputs.push_back(p.value);
    out.push_back(timed("multi_head_attention", [&] {
      return gradcheck(
          [&] {
            ContextChangeMap b = bias;
            b.heads = {channel(bias.E, 0), channel(bias.E, 1)};
            return probe(multi_head_attention(q, m, w, 2, valid, &b), r);
          },
          inputs);
    }));
  }
  {
    const std::vector<bool> valid{true, true, true, true, false};
    unary("avg_pool_tokens", {5, 3}, {5, 3}, [valid](auto& x) { return avg_pool_tokens(x, valid); });
    unary("max_pool_tokens", {5, 3}, {5, 3}, [valid](auto& x) { return max_pool_tokens(x, valid); });
  }
  {
    ParamRegistry reg;
    MlpMixer mlp(reg, "mlp", 4, rng);
    const Tensor x = random_tensor({4, 3}, rng), r = random_tensor({4, 3}, rng);
    const std::vector<bool> valid{true, true, true, false};
    std::vector<Tensor> inputs{x};
    for (const auto& p : reg.all()) inputs.push_back(p.value);
    out.push_back(timed("mlp_mixer", [&] { return gradcheck([&] { return probe(mlp(x, valid), r); }, inputs); }));
  }
  {
    ParamRegistry reg;
    MixerSet set(reg, "set", all_mixer_kinds(), 4, 2, 4, rng);
    Router router(reg, "router", 4, 4, rng);
    const TokenMixer mixer(std::move(set), std::move(router));
    const Tensor x = random_tensor({4, 4}, rng), r = random_tensor({4, 4}, rng);
    const std::vector<bool> valid{true, true, true, true};
    std::vector<Tensor> inputs{x};
    for (const auto& p : reg.all()) inputs.push_back(p.value);
    out.push_back(timed("token_mixer", [&] { return gradcheck([&] { return probe(mixer(x, nullptr, valid), r); }, inputs); }));
  }
  out.push_back(timed("model_transformer", [&] { return gradcheck_model(MixerMode::Transformer, seed + 1); }));
  out.push_back(timed("model_nas", [&] { return gradcheck_model(MixerMode::Nas, seed + 2); }));
  return out;
}

}  // namespace iteach
