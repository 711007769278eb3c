#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iteach/data.hpp"
#include "iteach/error.hpp"
#include "iteach/masking.hpp"
#include "iteach/model.hpp"
#include "iteach/rng.hpp"

namespace iteach {

/// The missing-rate grid every report covers: 0.0, 0.1, ..., 0.7.
inline const std::vector<double>& missing_rate_grid() {
  static const std::vector<double> grid{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  return grid;
}

/// Support-weighted mean of per-class F1 scores.
inline double waf(std::span<const int> preds, std::span<const int> golds) {
  if (preds.size() != golds.size())
    throw DimensionError("waf: " + std::to_string(preds.size()) + " predictions for " + std::to_string(golds.size()) +
                         " golds");
  if (golds.empty()) throw EvaluationError("waf: no samples to score");
  std::map<int, std::size_t> tp, pred_count, gold_count;
  for (std::size_t i = 0; i < golds.size(); ++i) {
    ++gold_count[golds[i]];
    ++pred_count[preds[i]];
    if (preds[i] == golds[i]) ++tp[golds[i]];
  }
  double score = 0.0;
  const double n = static_cast<double>(golds.size());
  for (const auto& [cls, support] : gold_count) {
    const double t = static_cast<double>(tp[cls]);
    const double p = static_cast<double>(pred_count[cls]);
    const double g = static_cast<double>(support);
    // F1 = 2 tp / (predicted + gold); predicted + gold >= support > 0.
    const double f1 = 2.0 * t / (p + g);
    score += (g / n) * f1;
  }
  return score;
}

/// Sign of a dimensional score: negative -> 0, positive -> 1. Exact zero is
/// never classified; callers exclude zero golds before scoring.
inline int dim_to_class(double y) { return y < 0.0 ? 0 : 1; }

/// WAF on sign-derived binary labels, excluding samples whose gold is 0.
inline double waf_dimensional(std::span<const double> pred_values, std::span<const double> gold_values) {
  if (pred_values.size() != gold_values.size()) throw DimensionError("waf_dimensional: length mismatch");
  std::vector<int> p, g;
  for (std::size_t i = 0; i < gold_values.size(); ++i) {
    if (gold_values[i] == 0.0) continue;
    p.push_back(dim_to_class(pred_values[i]));
    g.push_back(dim_to_class(gold_values[i]));
  }
  if (g.empty()) throw EvaluationError("waf_dimensional: every gold label is zero");
  return waf(p, g);
}

/// Per-utterance outputs for the valid rows of one padded forward pass:
/// argmax class (categorical) or the scalar prediction (dimensional).
inline std::vector<double> predict(const Model& model, const Conversation& conv) {
  NoGradScope no_grad;
  const auto stack = model(conv);
  const std::size_t n = stack.logits.dim(1);
  std::vector<double> out(conv.length());
  for (std::size_t i = 0; i < conv.length(); ++i) {
    if (n == 1) {
      out[i] = stack.logits(i, 0);
    } else {
      std::size_t best = 0;
      for (std::size_t c = 1; c < n; ++c)
        if (stack.logits(i, c) > stack.logits(i, best)) best = c;
      out[i] = static_cast<double>(best);
    }
  }
  return out;
}

struct RatePoint {
  double rate = 0.0;
  double waf = 0.0;
  std::optional<double> mae;  // dimensional data only
};

/// Scores model predictions against golds over every utterance of `ds`.
inline RatePoint score_predictions(const Dataset& ds, const std::vector<std::vector<double>>& preds) {
  std::vector<double> pv, gv;
  for (std::size_t k = 0; k < ds.conversations.size(); ++k) {
    pv.insert(pv.end(), preds[k].begin(), preds[k].end());
    gv.insert(gv.end(), ds.conversations[k].labels.begin(), ds.conversations[k].labels.end());
  }
  RatePoint point;
  if (ds.label_kind == LabelKind::Categorical) {
    std::vector<int> p(pv.begin(), pv.end()), g(gv.begin(), gv.end());
    point.waf = waf(p, g);
  } else {
    point.waf = waf_dimensional(pv, gv);
    double abs_err = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) abs_err += std::fabs(pv[i] - gv[i]);
    point.mae = abs_err / static_cast<double>(pv.size());
  }
  return point;
}

/// Masks `ds` once with the given RNG (no masking at rate 0) and scores.
inline RatePoint evaluate_once(const Model& model, const Dataset& ds, double rate, Rng& rng) {
  std::vector<std::vector<double>> preds;
  preds.reserve(ds.conversations.size());
  for (const auto& conv : ds.conversations) {
    if (rate == 0.0) {
      preds.push_back(predict(model, conv));
    } else {
      preds.push_back(predict(model, apply_mask(conv, generate_mask(conv.length(), rate, rng))));
    }
  }
  auto point = score_predictions(ds, preds);
  point.rate = rate;
  return point;
}

/// Frozen-weight evaluation at one missing rate, averaged over the mask seeds
/// seed .. seed + n_repeats - 1. Rate 0 runs once, unmasked.
inline RatePoint evaluate_at_rate(const Model& model, const Dataset& ds, double rate, std::uint64_t seed,
                                  std::size_t n_repeats) {
  if (ds.conversations.empty()) throw EvaluationError("evaluate_at_rate: empty dataset");
  if (n_repeats == 0) throw ConfigError("n_repeats must be >= 1");
  if (rate == 0.0) {
    Rng unused(seed);
    return evaluate_once(model, ds, 0.0, unused);
  }
  RatePoint acc;
  acc.rate = rate;
  double mae_sum = 0.0;
  bool has_mae = false;
  for (std::size_t r = 0; r < n_repeats; ++r) {
    Rng rng(seed + r);
    const auto p = evaluate_once(model, ds, rate, rng);
    acc.waf += p.waf;
    if (p.mae) {
      has_mae = true;
      mae_sum += *p.mae;
    }
  }
  acc.waf /= static_cast<double>(n_repeats);
  if (has_mae) acc.mae = mae_sum / static_cast<double>(n_repeats);
  return acc;
}

enum class Protocol { Ume, Ime };

inline const char* to_string(Protocol p) { return p == Protocol::Ume ? "UME" : "IME"; }

struct EvalReport {
  Protocol protocol = Protocol::Ume;
  std::string framework;
  std::string strategy;
  std::vector<RatePoint> per_rate;
  double average = 0.0;
  double decline = 0.0;
  std::vector<std::uint64_t> seeds;
  std::optional<double> teacher_complete_waf;
  std::string config_hash;

  /// Fills `average` (mean of the rows) and `decline` (first row minus last).
  void finalize() {
    if (per_rate.empty()) throw EvaluationError("report has no rows");
    double s = 0.0;
    for (const auto& p : per_rate) s += p.waf;
    average = s / static_cast<double>(per_rate.size());
    decline = per_rate.front().waf - per_rate.back().waf;
  }

  const RatePoint& at(double rate) const {
    for (const auto& p : per_rate)
      if (std::fabs(p.rate - rate) < 1e-12) return p;
    throw EvaluationError("report has no row for rate " + std::to_string(rate));
  }
};

namespace detail {
inline std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace detail

inline void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  os << "rate,waf,mae\n";
  for (const auto& p : r.per_rate) {
    char rate[16];
    std::snprintf(rate, sizeof rate, "%.1f", p.rate);
    os << rate << ',' << detail::fmt17(p.waf) << ',' << (p.mae ? detail::fmt17(*p.mae) : "") << '\n';
  }
  if (!os) throw EvaluationError("cannot write " + path.string());
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["protocol"] = to_string(r.protocol);
  j["framework"] = r.framework;
  j["strategy"] = r.strategy;
  j["average"] = r.average;
  j["decline"] = r.decline;
  j["rates"] = nlohmann::ordered_json::array();
  for (const auto& p : r.per_rate) j["rates"].push_back(p.rate);
  j["seeds"] = r.seeds;
  if (r.teacher_complete_waf) j["teacher_complete_waf"] = *r.teacher_complete_waf;
  j["config_hash"] = r.config_hash;
  return j;
}

inline void write_report_json(const EvalReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  os << report_json(r).dump(2) << '\n';
  if (!os) throw EvaluationError("cannot write " + path.string());
}

}  // namespace iteach
