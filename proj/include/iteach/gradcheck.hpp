#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "iteach/error.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

inline constexpr double kGradcheckStep = 1e-6;

/// Largest |analytic - numeric| / max(1, |numeric|) over every coordinate of
/// every tensor in `inputs`, with central differences of step h.
///
/// `f` is evaluated once under a tape for the analytic gradient and then
/// twice per coordinate with recording suspended.
inline double gradcheck(const std::function<Tensor()>& f, std::vector<Tensor> inputs, double h = kGradcheckStep) {
  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = f();
    if (y.size() != 1) throw DimensionError("gradcheck: function must be scalar-valued");
    if (!std::isfinite(y.item())) throw EvaluationError("gradcheck: f(x) is not finite");
    tape.backward(y);
  }
  double worst = 0.0;
  NoGradScope no_grad;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.grad().begin(), x.grad().end());
    if (analytic.empty()) analytic.assign(x.size(), 0.0);
    auto values = x.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw EvaluationError("gradcheck: f(x +- h) is not finite");
      const double numeric = (up - down) / (2.0 * h);
      worst = std::max(worst, std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric)));
    }
  }
  return worst;
}

inline double gradcheck(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h = kGradcheckStep) {
  return gradcheck([&] { return f(x); }, std::vector<Tensor>{x}, h);
}

}  // namespace iteach
