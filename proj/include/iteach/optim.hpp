#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "iteach/error.hpp"
#include "iteach/nn.hpp"

namespace iteach {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

inline constexpr double kModelLearningRate = 5e-4;
inline constexpr double kRouterLearningRate = 5e-3;

/// Adam with decoupled weight decay over a fixed parameter list.
class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<NamedParam> params, AdamWConfig config) : config_(config), params_(std::move(params)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  /// Applies one update from the gradients currently stored on the
  /// parameters. A parameter without a gradient buffer is treated as having a
  /// zero gradient. Any non-finite gradient aborts before touching weights.
  void step() {
    for (const auto& p : params_) {
      for (double g : p.value.grad())
        if (!std::isfinite(g)) throw TrainingDivergedError("non-finite gradient in parameter '" + p.name + "'");
    }
    ++step_;
    const double t = static_cast<double>(step_);
    const double bc1 = 1.0 - std::pow(config_.beta1, t);
    const double bc2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& param = params_[k].value;
      auto w = param.data();
      const auto g = param.grad();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = g.empty() ? 0.0 : g[i];
        w[i] -= config_.lr * config_.weight_decay * w[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
  }

  long step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  const std::vector<NamedParam>& params() const { return params_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::vector<NamedParam> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long step_ = 0;
};

}  // namespace iteach
