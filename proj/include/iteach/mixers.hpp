#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "iteach/ecce.hpp"
#include "iteach/error.hpp"
#include "iteach/nn.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

// ---------------------------------------------------------------------------
// Attention

/// Bias-free q/k/v/output projections of a multi-head attention block.
struct AttentionWeights {
  Linear q, k, v, o;

  AttentionWeights() = default;
  AttentionWeights(ParamRegistry& reg, const std::string& name, std::size_t d, Rng& rng)
      : q(reg, name + ".q", d, d, rng, false),
        k(reg, name + ".k", d, d, rng, false),
        v(reg, name + ".v", d, d, rng, false),
        o(reg, name + ".o", d, d, rng, false) {}
};

/// Multi-head scaled dot-product attention. Queries come from `query`, keys
/// and values from `memory`. Per head h the score map is
/// (q_h k_h^T) / sqrt(head_dim) + bias->heads[h], softmax-normalized over the
/// keys marked valid.
inline Tensor multi_head_attention(const Tensor& query, const Tensor& memory, const AttentionWeights& w,
                                   std::size_t heads, const std::vector<bool>& key_valid,
                                   const ContextChangeMap* bias = nullptr) {
  const std::size_t d = query.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (memory.dim(1) != d) throw DimensionError("attention: query and memory widths differ");
  if (bias && bias->heads.size() != heads)
    throw ConfigError("context map has " + std::to_string(bias->heads.size()) + " channels for " +
                      std::to_string(heads) + " heads");
  const std::size_t hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const Tensor q = w.q(query);
  const Tensor k = w.k(memory);
  const Tensor v = w.v(memory);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? q : slice_cols(q, h * hd, hd);
    const Tensor kh = heads == 1 ? k : slice_cols(k, h * hd, hd);
    const Tensor vh = heads == 1 ? v : slice_cols(v, h * hd, hd);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    if (bias) scores = add(scores, bias->heads[h]);
    outs.push_back(matmul(masked_softmax(scores, key_valid), vh));
  }
  return w.o(heads == 1 ? outs.front() : concat_cols(outs));
}

class AttentionMixer {
 public:
  AttentionMixer() = default;
  AttentionMixer(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : weights_(reg, name, d, rng), heads_(heads) {
    if (d % heads != 0)
      throw ConfigError("attention width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                        " heads");
  }

  Tensor operator()(const Tensor& x, const ContextChangeMap* bias, const std::vector<bool>& valid) const {
    return multi_head_attention(x, x, weights_, heads_, valid, bias);
  }

  AttentionWeights& weights() { return weights_; }
  const AttentionWeights& weights() const { return weights_; }
  std::size_t heads() const { return heads_; }

 private:
  AttentionWeights weights_;
  std::size_t heads_ = 1;
};

/// Text-queried fusion: q from `query`, k and v from `memory`. No context bias.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t heads, Rng& rng)
      : weights_(reg, name, d, rng), heads_(heads) {}

  Tensor operator()(const Tensor& query, const Tensor& memory, const std::vector<bool>& valid) const {
    if (query.shape() != memory.shape())
      throw DimensionError("cross_attention: " + shape_string(query.shape()) + " vs " + shape_string(memory.shape()));
    return multi_head_attention(query, memory, weights_, heads_, valid, nullptr);
  }

  AttentionWeights& weights() { return weights_; }
  const AttentionWeights& weights() const { return weights_; }

 private:
  AttentionWeights weights_;
  std::size_t heads_ = 1;
};

// ---------------------------------------------------------------------------
// Token-axis MLP and pooling

inline std::vector<double> row_factors(const std::vector<bool>& valid) {
  std::vector<double> f(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) f[i] = valid[i] ? 1.0 : 0.0;
  return f;
}

/// Two-layer MLP across the (fixed, padded) token axis, applied per channel.
class MlpMixer {
 public:
  MlpMixer() = default;
  MlpMixer(ParamRegistry& reg, const std::string& name, std::size_t max_len, Rng& rng)
      : fc1_(reg, name + ".fc1", max_len, max_len, rng), fc2_(reg, name + ".fc2", max_len, max_len, rng),
        max_len_(max_len) {}

  Tensor operator()(const Tensor& x, const std::vector<bool>& valid) const {
    if (x.dim(0) != max_len_)
      throw DimensionError("mlp_mixer: sequence must be padded to " + std::to_string(max_len_) + " rows, got " +
                           std::to_string(x.dim(0)));
    const Tensor tokens_last = transpose(mask_rows(x, row_factors(valid)));
    return transpose(fc2_(gelu(fc1_(tokens_last))));
  }

  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  Linear fc1_, fc2_;
  std::size_t max_len_ = 0;
};

inline constexpr std::size_t kPoolWindow = 3;

/// Average over the in-range, valid positions of a width-3 window centred on
/// each row. Rows whose window holds no valid position output zero.
inline Tensor avg_pool_tokens(const Tensor& x, const std::vector<bool>& valid) {
  detail::require_rank(x, 2, "avg_pool_tokens");
  const std::size_t L = x.dim(0), d = x.dim(1);
  if (valid.size() != L) throw DimensionError("avg_pool_tokens: mask length mismatch");
  std::vector<double> out(L * d, 0.0);
  std::vector<double> inv_count(L, 0.0);
  const auto xd = x.data();
  const std::ptrdiff_t half = kPoolWindow / 2;
  for (std::size_t i = 0; i < L; ++i) {
    std::size_t count = 0;
    for (std::ptrdiff_t o = -half; o <= half; ++o) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(i) + o;
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(L) || !valid[s]) continue;
      ++count;
      for (std::size_t c = 0; c < d; ++c) out[i * d + c] += xd[s * d + c];
    }
    if (count == 0) continue;
    inv_count[i] = 1.0 / static_cast<double>(count);
    for (std::size_t c = 0; c < d; ++c) out[i * d + c] /= static_cast<double>(count);
  }
  return detail::make_result({L, d}, std::move(out), {x},
                             [L, d, half, valid, inv_count = std::move(inv_count)](detail::TensorImpl& self) {
                               auto& px = self.parent(0);
                               for (std::size_t i = 0; i < L; ++i) {
                                 if (inv_count[i] == 0.0) continue;
                                 for (std::ptrdiff_t o = -half; o <= half; ++o) {
                                   const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(i) + o;
                                   if (s < 0 || s >= static_cast<std::ptrdiff_t>(L) || !valid[s]) continue;
                                   for (std::size_t c = 0; c < d; ++c)
                                     px.grad[s * d + c] += self.grad[i * d + c] * inv_count[i];
                                 }
                               }
                             });
}

/// Max over the in-range, valid positions of a width-3 window.
inline Tensor max_pool_tokens(const Tensor& x, const std::vector<bool>& valid) {
  detail::require_rank(x, 2, "max_pool_tokens");
  const std::size_t L = x.dim(0), d = x.dim(1);
  if (valid.size() != L) throw DimensionError("max_pool_tokens: mask length mismatch");
  std::vector<double> out(L * d, 0.0);
  std::vector<std::ptrdiff_t> arg(L * d, -1);
  const auto xd = x.data();
  const std::ptrdiff_t half = kPoolWindow / 2;
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      for (std::ptrdiff_t o = -half; o <= half; ++o) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(i) + o;
        if (s < 0 || s >= static_cast<std::ptrdiff_t>(L) || !valid[s]) continue;
        const double v = xd[s * d + c];
        if (arg[i * d + c] < 0 || v > out[i * d + c]) {
          out[i * d + c] = v;
          arg[i * d + c] = s;
        }
      }
    }
  }
  return detail::make_result({L, d}, std::move(out), {x}, [d, arg = std::move(arg)](detail::TensorImpl& self) {
    auto& px = self.parent(0);
    for (std::size_t k = 0; k < arg.size(); ++k)
      if (arg[k] >= 0) px.grad[arg[k] * d + k % d] += self.grad[k];
  });
}

// ---------------------------------------------------------------------------
// Candidate set, router, mixing

enum class MixerKind { Attention, Mlp, AvgPool, MaxPool };

inline const char* to_string(MixerKind k) {
  switch (k) {
    case MixerKind::Attention: return "attention";
    case MixerKind::Mlp: return "mlp";
    case MixerKind::AvgPool: return "avgpool";
    case MixerKind::MaxPool: return "maxpool";
  }
  return "?";
}

inline const std::vector<MixerKind>& all_mixer_kinds() {
  static const std::vector<MixerKind> kinds{MixerKind::Attention, MixerKind::Mlp, MixerKind::AvgPool,
                                            MixerKind::MaxPool};
  return kinds;
}

/// Ordered candidate token mixers. Each candidate's parameters are shared by
/// every utterance regardless of how the router weights it.
class MixerSet {
 public:
  MixerSet() = default;
  MixerSet(ParamRegistry& reg, const std::string& name, std::vector<MixerKind> candidates, std::size_t d,
           std::size_t heads, std::size_t max_len, Rng& rng)
      : candidates_(std::move(candidates)) {
    if (candidates_.empty()) throw ConfigError("mixer set needs at least one candidate");
    for (auto kind : candidates_) {
      if (kind == MixerKind::Attention && !attention_)
        attention_.emplace(reg, name + ".attention", d, heads, rng);
      if (kind == MixerKind::Mlp && !mlp_) mlp_.emplace(reg, name + ".mlp", max_len, rng);
    }
  }

  std::size_t size() const { return candidates_.size(); }
  const std::vector<MixerKind>& candidates() const { return candidates_; }
  AttentionMixer* attention() { return attention_ ? &*attention_ : nullptr; }
  MlpMixer* mlp() { return mlp_ ? &*mlp_ : nullptr; }

  Tensor evaluate(MixerKind kind, const Tensor& x, const ContextChangeMap* bias, const std::vector<bool>& valid) const {
    switch (kind) {
      case MixerKind::Attention: return (*attention_)(x, bias, valid);
      case MixerKind::Mlp: return (*mlp_)(x, valid);
      case MixerKind::AvgPool: return avg_pool_tokens(x, valid);
      case MixerKind::MaxPool: return max_pool_tokens(x, valid);
    }
    throw ConfigError("unknown mixer kind");
  }

  /// Every candidate on the full sequence, in candidate order. Only the
  /// attention candidate sees the context bias.
  std::vector<Tensor> evaluate_all(const Tensor& x, const ContextChangeMap* bias, const std::vector<bool>& valid) const {
    std::vector<Tensor> outs;
    outs.reserve(candidates_.size());
    for (auto kind : candidates_) outs.push_back(evaluate(kind, x, bias, valid));
    return outs;
  }

 private:
  std::vector<MixerKind> candidates_;
  std::optional<AttentionMixer> attention_;
  std::optional<MlpMixer> mlp_;
};

enum class RouterMode { Identity, Linear };

/// Per-utterance gate over the candidate mixers.
class Router {
 public:
  Router() = default;
  /// Identity router over a single candidate.
  explicit Router(std::size_t candidates) : mode_(RouterMode::Identity), candidates_(candidates) {
    if (candidates != 1) throw ConfigError("identity router requires exactly one candidate mixer");
  }
  Router(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t candidates, Rng& rng)
      : mode_(RouterMode::Linear), candidates_(candidates),
        fc_(reg, name + ".fc", d, candidates, rng, true, ParamGroup::Router) {}

  RouterMode mode() const { return mode_; }
  Linear& fc() { return fc_; }

  /// [L x |candidates|], rows summing to one.
  Tensor weights(const Tensor& x) const {
    if (mode_ == RouterMode::Identity) return Tensor({x.dim(0), std::size_t{1}}, 1.0);
    return softmax_rows(fc_(x));
  }

 private:
  RouterMode mode_ = RouterMode::Identity;
  std::size_t candidates_ = 1;
  Linear fc_;
};

/// out[i] = sum_o weights[i, o] * outputs[o][i].
inline Tensor mix_tokens(const std::vector<Tensor>& outputs, const Tensor& weights) {
  if (outputs.empty()) throw DimensionError("mix_tokens: no candidate outputs");
  if (weights.rank() != 2 || weights.dim(1) != outputs.size() || weights.dim(0) != outputs.front().dim(0))
    throw DimensionError("mix_tokens: weights " + shape_string(weights.shape()) + " do not match " +
                         std::to_string(outputs.size()) + " candidates");
  Tensor acc = mul_colvec(outputs[0], column(weights, 0));
  for (std::size_t o = 1; o < outputs.size(); ++o) acc = add(acc, mul_colvec(outputs[o], column(weights, o)));
  return acc;
}

inline Tensor mix_tokens(const Tensor& x, const MixerSet& set, const Tensor& weights, const ContextChangeMap* bias,
                         const std::vector<bool>& valid) {
  return mix_tokens(set.evaluate_all(x, bias, valid), weights);
}

/// Router-weighted candidate set; with a single attention candidate and an
/// identity router this is plain self-attention.
class TokenMixer {
 public:
  TokenMixer() = default;
  TokenMixer(MixerSet set, Router router) : set_(std::move(set)), router_(std::move(router)) {}

  /// `router_out`, when given, receives the router weights of this call.
  Tensor operator()(const Tensor& x, const ContextChangeMap* bias, const std::vector<bool>& valid,
                    Tensor* router_out = nullptr) const {
    Tensor weights = router_.weights(x);
    if (router_out) *router_out = weights;
    return mix_tokens(x, set_, weights, bias, valid);
  }

  MixerSet& set() { return set_; }
  Router& router() { return router_; }

 private:
  MixerSet set_;
  Router router_;
};

}  // namespace iteach
