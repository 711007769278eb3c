#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "iteach/error.hpp"
#include "iteach/rng.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

/// Optimizer group a parameter belongs to. Router gates train with their own
/// learning rate.
enum class ParamGroup { Model, Router };

struct NamedParam {
  std::string name;
  Tensor value;
  ParamGroup group = ParamGroup::Model;
};

/// Ordered list of trainable tensors. Modules register their parameters at
/// construction; the registry holds shallow handles so optimizers and
/// checkpoints see the very storage the modules compute with.
class ParamRegistry {
 public:
  Tensor add(std::string name, Tensor value, ParamGroup group = ParamGroup::Model) {
    for (const auto& p : params_)
      if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    params_.push_back({std::move(name), value, group});
    return value;
  }

  const std::vector<NamedParam>& all() const { return params_; }
  std::vector<NamedParam>& all() { return params_; }
  std::size_t size() const { return params_.size(); }

  const NamedParam* find(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  /// Deep copy of every parameter's values, in registry order.
  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value.values());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    if (snap.size() != params_.size()) throw DimensionError("snapshot does not match parameter registry");
    for (std::size_t i = 0; i < snap.size(); ++i) {
      if (snap[i].size() != params_[i].value.size())
        throw DimensionError("snapshot entry for '" + params_[i].name + "' has wrong size");
      params_[i].value.values() = snap[i];
    }
  }

 private:
  std::vector<NamedParam> params_;
};

/// Uniform in +-sqrt(1/fan_in).
inline Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

class Linear {
 public:
  Linear() = default;
  Linear(ParamRegistry& reg, const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool bias = true,
         ParamGroup group = ParamGroup::Model)
      : in_(in), out_(out) {
    weight_ = reg.add(name + ".weight", fan_in_uniform({in, out}, in, rng), group);
    if (bias) bias_ = reg.add(name + ".bias", fan_in_uniform({out}, in, rng), group);
  }

  Tensor operator()(const Tensor& x) const {
    auto y = matmul(x, weight_);
    return bias_.defined() ? add_rowvec(y, bias_) : y;
  }

  Tensor& weight() { return weight_; }
  const Tensor& weight() const { return weight_; }
  Tensor& bias() { return bias_; }
  const Tensor& bias() const { return bias_; }
  bool has_bias() const { return bias_.defined(); }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

 private:
  std::size_t in_ = 0, out_ = 0;
  Tensor weight_;
  Tensor bias_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamRegistry& reg, const std::string& name, std::size_t dim) {
    gamma_ = reg.add(name + ".gamma", Tensor({dim}, 1.0));
    beta_ = reg.add(name + ".beta", Tensor({dim}, 0.0));
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }
  Tensor& gamma() { return gamma_; }
  Tensor& beta() { return beta_; }

 private:
  Tensor gamma_;
  Tensor beta_;
};

}  // namespace iteach
