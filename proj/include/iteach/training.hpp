#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iteach/data.hpp"
#include "iteach/error.hpp"
#include "iteach/eval.hpp"
#include "iteach/masking.hpp"
#include "iteach/model.hpp"
#include "iteach/optim.hpp"
#include "iteach/rng.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

/// Weights of the layer-wise distance terms, H_1 (nearest the classifier) first.
inline constexpr std::array<double, 3> kDistanceWeights{0.5, 0.1, 0.05};

// ---------------------------------------------------------------------------
// Frameworks and schedules

enum class FrameworkKind { Its, Pre, Ts };

inline const char* to_string(FrameworkKind k) {
  switch (k) {
    case FrameworkKind::Its: return "ITS";
    case FrameworkKind::Pre: return "PRE";
    case FrameworkKind::Ts: return "TS";
  }
  return "?";
}

struct FrameworkSpec {
  FrameworkKind kind = FrameworkKind::Its;
  MixerMode teacher_mode = MixerMode::Transformer;
  MixerMode student_mode = MixerMode::Nas;
  std::size_t teacher_layers = 3;
  std::size_t student_layers = 4;

  /// Simple Transformer teacher, deeper NAS student.
  static FrameworkSpec its() { return {FrameworkKind::Its, MixerMode::Transformer, MixerMode::Nas, 3, 4}; }
  /// One model for complete and incomplete data; only the student slot is used.
  static FrameworkSpec pre() { return {FrameworkKind::Pre, MixerMode::Transformer, MixerMode::Transformer, 0, 3}; }
  /// Conventional direction: deeper NAS teacher, simpler Transformer student.
  static FrameworkSpec ts() { return {FrameworkKind::Ts, MixerMode::Nas, MixerMode::Transformer, 4, 3}; }

  bool has_teacher() const { return kind != FrameworkKind::Pre; }

  std::string label() const {
    if (!has_teacher()) return std::string(to_string(kind)) + "-" + to_string(student_mode);
    return std::string(to_string(kind)) + "-" + to_string(teacher_mode) + "-" + to_string(student_mode);
  }

  void validate() const {
    if (student_layers < 1) throw ConfigError("framework.student_layers must be >= 1");
    if (has_teacher()) {
      if (teacher_layers < 3 || student_layers < 3)
        throw ConfigError("teacher-student frameworks need >= 3 layers on both sides for the distance loss");
    }
  }
};

enum class ScheduleKind { Fixed, Random, Progressive };

inline const char* to_string(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Fixed: return "fixed";
    case ScheduleKind::Random: return "random";
    case ScheduleKind::Progressive: return "progressive";
  }
  return "?";
}

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::Fixed;
  double rate = 0.0;                                            // Fixed
  std::vector<double> rates = missing_rate_grid();              // Random
  double start = 0.0, step = 0.1, cap = kMaxMissingRate;        // Progressive
  std::size_t every = 10;                                       // Progressive

  static ScheduleSpec fixed(double r) {
    ScheduleSpec s;
    s.kind = ScheduleKind::Fixed;
    s.rate = r;
    return s;
  }
  static ScheduleSpec random() {
    ScheduleSpec s;
    s.kind = ScheduleKind::Random;
    return s;
  }
  static ScheduleSpec progressive() {
    ScheduleSpec s;
    s.kind = ScheduleKind::Progressive;
    return s;
  }

  std::string label() const {
    if (kind == ScheduleKind::Fixed) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "fixed%.1f", rate);
      return buf;
    }
    return to_string(kind);
  }

  void validate() const {
    const auto in_range = [](double r) { return r >= 0.0 && r <= kMaxMissingRate + 1e-12; };
    switch (kind) {
      case ScheduleKind::Fixed:
        if (!in_range(rate)) throw ConfigError("schedule.rate must be in [0, 0.7]");
        break;
      case ScheduleKind::Random:
        if (rates.empty()) throw ConfigError("schedule.rates must not be empty");
        for (double r : rates)
          if (!in_range(r)) throw ConfigError("schedule.rates entries must be in [0, 0.7]");
        break;
      case ScheduleKind::Progressive:
        if (!in_range(start) || !in_range(cap) || step < 0 || every < 1)
          throw ConfigError("schedule progressive parameters out of range");
        break;
    }
  }
};

/// Missing rate for a batch drawn in `epoch`. Only Random consumes `rng`.
inline double schedule_rate(const ScheduleSpec& spec, std::size_t epoch, Rng& rng) {
  switch (spec.kind) {
    case ScheduleKind::Fixed: return spec.rate;
    case ScheduleKind::Random: return spec.rates[rng.uniform_int(spec.rates.size())];
    case ScheduleKind::Progressive:
      return std::min(spec.cap, spec.start + spec.step * static_cast<double>(epoch / spec.every));
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Losses

enum class RecRegion { Masked, All };

struct LossBreakdown {
  double l_emo_teacher = 0.0;
  double l_emo_student = 0.0;
  std::array<double, 3> l_rec{0.0, 0.0, 0.0};
  double total = 0.0;
  bool has_teacher = true;

  /// The combined emotion term: mean of teacher and student terms, or the
  /// sole model's term when there is no teacher.
  double emo() const { return has_teacher ? 0.5 * (l_emo_teacher + l_emo_student) : l_emo_student; }

  double reconstructed_total() const {
    return emo() + kDistanceWeights[0] * l_rec[0] + kDistanceWeights[1] * l_rec[1] + kDistanceWeights[2] * l_rec[2];
  }
};

/// Per-model emotion term over a batch:
/// categorical -> (1/L') sum_valid -log p(y); dimensional -> (1/L') sum_valid (y - yhat)^2
/// (or |y - yhat| with l1). L' counts valid utterances across the batch.
inline Tensor emotion_term(std::span<const Tensor> outputs, std::span<const Conversation* const> convs,
                           LabelKind kind, bool l1 = false) {
  if (outputs.size() != convs.size()) throw DimensionError("emotion_term: one output per conversation required");
  std::size_t valid = 0;
  for (const auto* c : convs) valid += c->length();
  if (valid == 0) throw EvaluationError("emotion loss over an empty batch");
  Tensor acc;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const Tensor& out = outputs[k];
    const auto& conv = *convs[k];
    const std::size_t rows = out.dim(0);
    std::vector<double> w(rows, 0.0);
    std::fill_n(w.begin(), conv.length(), 1.0);
    Tensor term;
    if (kind == LabelKind::Categorical) {
      std::vector<int> labels(rows, 0);
      for (std::size_t i = 0; i < conv.length(); ++i) labels[i] = conv.label_class(i);
      term = weighted_nll(out, labels, w);
    } else {
      Tensor target({rows, std::size_t{1}});
      for (std::size_t i = 0; i < conv.length(); ++i) target[i] = conv.labels[i];
      const Tensor diff = mask_rows(sub(out, target), w);
      term = sum(l1 ? abs(diff) : mul(diff, diff));
    }
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, 1.0 / static_cast<double>(valid));
}

/// -(1/2L') sum_valid [log p_t(y) + log p_s(y)] for one conversation.
inline Tensor emo_loss_categorical(const Tensor& logits_t, const Tensor& logits_s, const Conversation& conv) {
  const Conversation* c[] = {&conv};
  const Tensor t[] = {logits_t};
  const Tensor s[] = {logits_s};
  return scale(add(emotion_term(t, c, LabelKind::Categorical), emotion_term(s, c, LabelKind::Categorical)), 0.5);
}

/// (1/2L') sum_valid [(y - yhat_t)^2 + (y - yhat_s)^2] for one conversation.
inline Tensor emo_loss_dimensional(const Tensor& pred_t, const Tensor& pred_s, const Conversation& conv,
                                   bool l1 = false) {
  const Conversation* c[] = {&conv};
  const Tensor t[] = {pred_t};
  const Tensor s[] = {pred_s};
  return scale(add(emotion_term(t, c, LabelKind::Dimensional, l1), emotion_term(s, c, LabelKind::Dimensional, l1)),
               0.5);
}

/// Unweighted layer-wise distance terms for H_1..H_3: mean squared
/// difference over region rows and channels, pooled across the batch.
/// Teacher states enter as constants. An empty region gives exact zeros.
inline std::array<Tensor, 3> distance_loss(std::span<const HiddenStack> student, std::span<const HiddenStack> teacher,
                                           std::span<const std::vector<double>> regions) {
  if (student.size() != teacher.size() || student.size() != regions.size())
    throw DimensionError("distance_loss: batch sizes disagree");
  double region_rows = 0.0;
  for (std::size_t k = 0; k < student.size(); ++k) {
    if (student[k].depth() < 3 || teacher[k].depth() < 3)
      throw DimensionError("distance_loss: hidden stacks need at least 3 layers, got student " +
                           std::to_string(student[k].depth()) + " / teacher " + std::to_string(teacher[k].depth()));
    region_rows += std::accumulate(regions[k].begin(), regions[k].end(), 0.0);
  }
  std::array<Tensor, 3> out;
  for (std::size_t layer = 0; layer < 3; ++layer) {
    if (region_rows == 0.0) {
      out[layer] = Tensor::scalar(0.0);
      continue;
    }
    Tensor acc;
    for (std::size_t k = 0; k < student.size(); ++k) {
      const Tensor& hs = student[k].H[layer];
      const Tensor diff = mask_rows(sub(hs, teacher[k].H[layer].detach()), regions[k]);
      const Tensor term = sum(mul(diff, diff));
      acc = acc.defined() ? add(acc, term) : term;
    }
    const double width = static_cast<double>(student.front().H[layer].dim(1));
    out[layer] = scale(acc, 1.0 / (region_rows * width));
  }
  return out;
}

/// emo + 0.5 l1 + 0.1 l2 + 0.05 l3, evaluated in that order.
inline Tensor total_loss(const Tensor& emo, const std::array<Tensor, 3>& rec) {
  Tensor t = emo;
  for (std::size_t k = 0; k < 3; ++k) t = add(t, scale(rec[k], kDistanceWeights[k]));
  return t;
}

// ---------------------------------------------------------------------------
// Training system

struct TrainOptions {
  AdamWConfig model_optimizer{kModelLearningRate, 0.9, 0.999, 1e-8, 0.01};
  double router_lr = kRouterLearningRate;
  std::size_t batch_size = 32;
  std::size_t epochs = 100;
  RecRegion rec_region = RecRegion::Masked;
  bool l1_regression = false;
  bool select_best = true;  // keep the best-validation-WAF weights
};

/// Teacher (optional), student and their three optimizer groups: teacher
/// weights, student weights, and every router gate.
class TrainingSystem {
 public:
  TrainingSystem(const FrameworkSpec& fw, const ModelConfig& base, const TrainOptions& opts, std::uint64_t seed)
      : framework_(fw), options_(opts) {
    fw.validate();
    Rng init(seed);
    if (fw.has_teacher()) {
      ModelConfig tc = base;
      tc.layers = fw.teacher_layers;
      tc.mixer_mode = fw.teacher_mode;
      teacher_ = std::make_unique<Model>(tc, init);
    }
    ModelConfig sc = base;
    sc.layers = fw.student_layers;
    sc.mixer_mode = fw.student_mode;
    student_ = std::make_unique<Model>(sc, init);
    build_optimizers();
  }

  const FrameworkSpec& framework() const { return framework_; }
  const TrainOptions& options() const { return options_; }
  Model* teacher() { return teacher_.get(); }
  const Model* teacher() const { return teacher_.get(); }
  Model& student() { return *student_; }
  const Model& student() const { return *student_; }
  LabelKind label_kind() const { return student_->config().n_outputs == 1 ? LabelKind::Dimensional : LabelKind::Categorical; }

  std::vector<std::pair<std::string, const ParamRegistry*>> checkpoint_groups() const {
    std::vector<std::pair<std::string, const ParamRegistry*>> g;
    if (teacher_) g.emplace_back("teacher", &teacher_->params());
    g.emplace_back(teacher_ ? "student" : "model", &student_->params());
    return g;
  }

  void load(const std::vector<CheckpointEntry>& entries) {
    if (teacher_) apply_checkpoint(entries, "teacher", teacher_->params());
    apply_checkpoint(entries, teacher_ ? "student" : "model", student_->params());
  }

  std::vector<std::vector<double>> snapshot() const {
    auto out = student_->params().snapshot();
    if (teacher_) {
      auto t = teacher_->params().snapshot();
      out.insert(out.end(), t.begin(), t.end());
    }
    return out;
  }

  void restore(const std::vector<std::vector<double>>& snap) {
    const std::size_t ns = student_->params().size();
    student_->params().restore({snap.begin(), snap.begin() + static_cast<std::ptrdiff_t>(ns)});
    if (teacher_) teacher_->params().restore({snap.begin() + static_cast<std::ptrdiff_t>(ns), snap.end()});
  }

  /// One joint teacher-student step: the teacher sees the complete batch, the
  /// student a masked copy. With `include_rec` false the distance terms are
  /// still reported but left out of the optimized loss.
  LossBreakdown step_teacher_student(std::span<const Conversation> batch, double rate, Rng& rng,
                                     bool include_rec = true) {
    if (!teacher_) throw ConfigError("framework " + framework_.label() + " has no teacher");
    Tape tape;
    TapeScope scope(tape);
    std::vector<HiddenStack> ts, ss;
    std::vector<Tensor> lt, ls;
    std::vector<std::vector<double>> regions;
    std::vector<const Conversation*> convs;
    for (const auto& conv : batch) {
      const auto mask = generate_mask(conv.length(), rate, rng);
      const Conversation masked = apply_mask(conv, mask);
      ts.push_back((*teacher_)(conv));
      ss.push_back((*student_)(masked));
      lt.push_back(ts.back().logits);
      ls.push_back(ss.back().logits);
      std::vector<double> region(student_->config().max_len, 0.0);
      for (std::size_t i = 0; i < conv.length(); ++i)
        region[i] = (options_.rec_region == RecRegion::All || mask.any_dropped(i)) ? 1.0 : 0.0;
      regions.push_back(std::move(region));
      convs.push_back(&conv);
    }
    const auto kind = label_kind();
    const Tensor emo_t = emotion_term(lt, convs, kind, options_.l1_regression);
    const Tensor emo_s = emotion_term(ls, convs, kind, options_.l1_regression);
    const Tensor emo = scale(add(emo_t, emo_s), 0.5);
    const auto rec = distance_loss(ss, ts, regions);
    const Tensor total = include_rec ? total_loss(emo, rec) : emo;

    LossBreakdown out;
    out.l_emo_teacher = emo_t.item();
    out.l_emo_student = emo_s.item();
    for (std::size_t k = 0; k < 3; ++k) out.l_rec[k] = rec[k].item();
    out.total = total.item();
    tape.backward(total);
    apply_updates();
    return out;
  }

  /// Single-model step on a masked batch with the emotion loss only.
  LossBreakdown step_single(std::span<const Conversation> batch, double rate, Rng& rng) {
    Tape tape;
    TapeScope scope(tape);
    std::vector<Tensor> outs;
    std::vector<const Conversation*> convs;
    for (const auto& conv : batch) {
      const Conversation masked = apply_mask(conv, generate_mask(conv.length(), rate, rng));
      outs.push_back((*student_)(masked).logits);
      convs.push_back(&conv);
    }
    const Tensor loss = emotion_term(outs, convs, label_kind(), options_.l1_regression);
    LossBreakdown out;
    out.has_teacher = false;
    out.l_emo_student = loss.item();
    out.total = out.l_emo_student;
    tape.backward(loss);
    apply_updates();
    return out;
  }

  LossBreakdown step(std::span<const Conversation> batch, double rate, Rng& rng) {
    return framework_.has_teacher() ? step_teacher_student(batch, rate, rng) : step_single(batch, rate, rng);
  }

 private:
  void build_optimizers() {
    std::vector<NamedParam> teacher_params, student_params, router_params;
    const auto sort = [&](const ParamRegistry& reg, const std::string& prefix, std::vector<NamedParam>& model_group) {
      for (const auto& p : reg.all()) {
        NamedParam q = p;
        q.name = prefix + "." + p.name;
        (p.group == ParamGroup::Router ? router_params : model_group).push_back(q);
      }
    };
    if (teacher_) sort(teacher_->params(), "teacher", teacher_params);
    sort(student_->params(), teacher_ ? "student" : "model", student_params);
    AdamWConfig router_cfg = options_.model_optimizer;
    router_cfg.lr = options_.router_lr;
    teacher_opt_ = AdamW(std::move(teacher_params), options_.model_optimizer);
    student_opt_ = AdamW(std::move(student_params), options_.model_optimizer);
    router_opt_ = AdamW(std::move(router_params), router_cfg);
  }

  void apply_updates() {
    // Check all groups first so a divergence leaves every weight untouched.
    for (AdamW* opt : {&teacher_opt_, &student_opt_, &router_opt_})
      for (const auto& p : opt->params())
        for (double g : p.value.grad())
          if (!std::isfinite(g)) throw TrainingDivergedError("non-finite gradient in parameter '" + p.name + "'");
    for (AdamW* opt : {&teacher_opt_, &student_opt_, &router_opt_}) {
      opt->step();
      opt->zero_grad();
    }
  }

  FrameworkSpec framework_;
  TrainOptions options_;
  std::unique_ptr<Model> teacher_;
  std::unique_ptr<Model> student_;
  AdamW teacher_opt_, student_opt_, router_opt_;
};

// ---------------------------------------------------------------------------
// Epoch loop

struct EpochLog {
  std::size_t epoch = 0;
  double rate = 0.0;  // mean batch missing rate of the epoch
  LossBreakdown loss;  // batch means
  double val_waf = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_waf = std::numeric_limits<double>::quiet_NaN();
};

inline constexpr std::uint64_t kValidationSeedSalt = 0x5eed'0f'0a11ULL;

/// Trains for opts.epochs over `train`, shuffling conversations each epoch and
/// drawing the batch missing rate from `schedule`. After each epoch the
/// student is scored on `val` masked at the epoch's schedule rate with a fixed
/// mask seed; with select_best the best-scoring weights are restored at the end.
inline TrainResult train(TrainingSystem& sys, const Dataset& train_set, const Dataset& val_set,
                         const ScheduleSpec& schedule, std::uint64_t seed,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  schedule.validate();
  const auto& opts = sys.options();
  if (train_set.conversations.empty()) throw ConfigError("training split is empty");
  if (opts.batch_size < 1) throw ConfigError("training.batch_size must be >= 1");
  Rng rng(Rng::mix(seed));
  Rng schedule_rng = rng.split();
  Rng val_rate_rng = rng.split();
  TrainResult result;
  std::vector<std::vector<double>> best;
  std::vector<std::size_t> order(train_set.conversations.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    EpochLog log;
    log.epoch = epoch;
    log.loss.has_teacher = sys.framework().has_teacher();
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      std::vector<Conversation> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + opts.batch_size); ++i)
        batch.push_back(train_set.conversations[order[i]]);
      const double rate = schedule_rate(schedule, epoch, schedule_rng);
      const auto b = sys.step(batch, rate, rng);
      log.rate += rate;
      log.loss.l_emo_teacher += b.l_emo_teacher;
      log.loss.l_emo_student += b.l_emo_student;
      for (std::size_t k = 0; k < 3; ++k) log.loss.l_rec[k] += b.l_rec[k];
      log.loss.total += b.total;
      ++batches;
    }
    const double nb = static_cast<double>(batches);
    log.rate /= nb;
    log.loss.l_emo_teacher /= nb;
    log.loss.l_emo_student /= nb;
    for (auto& v : log.loss.l_rec) v /= nb;
    log.loss.total /= nb;

    if (!val_set.conversations.empty()) {
      const double val_rate = schedule_rate(schedule, epoch, val_rate_rng);
      log.val_waf = evaluate_at_rate(sys.student(), val_set, val_rate, seed ^ kValidationSeedSalt, 1).waf;
      if (opts.select_best && (best.empty() || log.val_waf > result.best_val_waf)) {
        result.best_val_waf = log.val_waf;
        result.best_epoch = epoch;
        best = sys.snapshot();
      }
    }
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (opts.select_best && !best.empty()) sys.restore(best);
  return result;
}

/// Epoch log CSV: one header line, then one line per epoch.
inline std::string epoch_log_header() {
  return "epoch,rate,l_emo_teacher,l_emo_student,l_rec_1,l_rec_2,l_rec_3,total,val_waf";
}

inline std::string epoch_log_line(const EpochLog& e) {
  std::string s = std::to_string(e.epoch);
  for (double v : {e.rate, e.loss.l_emo_teacher, e.loss.l_emo_student, e.loss.l_rec[0], e.loss.l_rec[1],
                   e.loss.l_rec[2], e.loss.total, e.val_waf})
    s += "," + detail::fmt17(v);
  return s;
}

}  // namespace iteach
