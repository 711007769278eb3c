#pragma once

// Reference implementations used only by the tests. Written for clarity, not speed.

#include <cstddef>
#include <vector>

#include "iteach/tensor.hpp"

namespace iteach::oracle {

/// Span mean by direct summation: for i <= j < min(length, i + cap) average
/// rows i..j-1 (row i alone when j == i), mirror to (j, i), zero elsewhere.
inline std::vector<double> span_mean(const Tensor& z, std::size_t length, std::size_t cap) {
  const std::size_t L = z.dim(0), d = z.dim(1);
  std::vector<double> out(L * L * d, 0.0);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = i; j < length && j - i < cap; ++j) {
      const std::size_t end = j == i ? i + 1 : j;
      for (std::size_t c = 0; c < d; ++c) {
        double s = 0.0;
        for (std::size_t r = i; r < end; ++r) s += z(r, c);
        const double v = s / static_cast<double>(end - i);
        out[(i * L + j) * d + c] = v;
        out[(j * L + i) * d + c] = v;
      }
    }
  return out;
}

/// Weighted F1 from a dense confusion matrix over labels 0..k-1.
inline double confusion_waf(const std::vector<int>& preds, const std::vector<int>& golds, int k) {
  std::vector<std::vector<double>> cm(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < golds.size(); ++i) cm[golds[i]][preds[i]] += 1.0;
  double total = 0.0, score = 0.0;
  for (int g = 0; g < k; ++g)
    for (int p = 0; p < k; ++p) total += cm[g][p];
  for (int c = 0; c < k; ++c) {
    double row = 0.0, col = 0.0;
    for (int o = 0; o < k; ++o) {
      row += cm[c][o];
      col += cm[o][c];
    }
    if (row == 0.0) continue;
    const double precision = col > 0.0 ? cm[c][c] / col : 0.0;
    const double recall = cm[c][c] / row;
    const double f1 = precision + recall > 0.0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    score += row / total * f1;
  }
  return score;
}

/// Dimensional WAF: drop zero golds, binarize by sign, then confusion_waf.
inline double dimensional_waf(const std::vector<double>& preds, const std::vector<double>& golds) {
  std::vector<int> p, g;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    if (golds[i] == 0.0) continue;
    p.push_back(preds[i] >= 0.0 ? 1 : 0);
    g.push_back(golds[i] > 0.0 ? 1 : 0);
  }
  return confusion_waf(p, g, 2);
}

}  // namespace iteach::oracle
