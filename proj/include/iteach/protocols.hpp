#pragma once

#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <string>
#include <vector>

#include "iteach/data.hpp"
#include "iteach/eval.hpp"
#include "iteach/model.hpp"
#include "iteach/training.hpp"

namespace iteach {

/// Everything needed to train one framework under one schedule.
struct RunSpec {
  ModelConfig model;  // input widths and output size are taken from the data
  FrameworkSpec framework = FrameworkSpec::its();
  ScheduleSpec schedule;
  TrainOptions training;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 1000;
  std::size_t n_repeats = 5;
  std::string config_hash;
};

/// `base` with input widths and output size set from `ds`.
inline ModelConfig model_config_for(const Dataset& ds, ModelConfig base) {
  base.input_dims = ds.dims;
  base.n_outputs = ds.n_outputs();
  return base;
}

struct RunOutcome {
  std::unique_ptr<TrainingSystem> system;
  TrainResult training;
  EvalReport report;
};

/// Scores a trained system at every grid rate on frozen weights. The student
/// (or sole model) is evaluated; a teacher is also scored on complete data.
inline EvalReport evaluate_ume(const TrainingSystem& sys, const Dataset& test, const RunSpec& spec) {
  EvalReport r;
  r.protocol = Protocol::Ume;
  r.framework = spec.framework.label();
  r.strategy = spec.schedule.label();
  r.config_hash = spec.config_hash;
  for (std::size_t k = 0; k < spec.n_repeats; ++k) r.seeds.push_back(spec.eval_seed + k);
  for (double rate : missing_rate_grid())
    r.per_rate.push_back(evaluate_at_rate(sys.student(), test, rate, spec.eval_seed, spec.n_repeats));
  if (sys.teacher()) r.teacher_complete_waf = evaluate_at_rate(*sys.teacher(), test, 0.0, spec.eval_seed, 1).waf;
  r.finalize();
  return r;
}

inline std::unique_ptr<TrainingSystem> make_system(const RunSpec& spec, const Dataset& ds) {
  return std::make_unique<TrainingSystem>(spec.framework, model_config_for(ds, spec.model), spec.training, spec.seed);
}

/// One model trained under spec.schedule, then evaluated across all rates.
inline RunOutcome run_ume(const RunSpec& spec, const DatasetSplits& splits,
                          const std::function<void(const EpochLog&)>& on_epoch = {}) {
  RunOutcome out;
  out.system = make_system(spec, splits.train);
  out.training = train(*out.system, splits.train, splits.val, spec.schedule, spec.seed, on_epoch);
  out.report = evaluate_ume(*out.system, splits.test, spec);
  return out;
}

struct ImeOutcome {
  std::vector<RunOutcome> runs;  // one per grid rate
  EvalReport report;
};

/// A fresh model per grid rate, trained with Fixed(rate) and evaluated at the
/// same rate. Run k uses seed + k, so the rate-0 run matches a Fixed(0) UME
/// run with the same seed. With `parallel` the runs share nothing but the
/// read-only splits.
inline ImeOutcome run_ime(const RunSpec& spec, const DatasetSplits& splits, bool parallel = false) {
  const auto& grid = missing_rate_grid();
  auto one = [&](std::size_t k) {
    RunSpec s = spec;
    s.schedule = ScheduleSpec::fixed(grid[k]);
    s.seed = spec.seed + k;
    RunOutcome run;
    run.system = make_system(s, splits.train);
    run.training = train(*run.system, splits.train, splits.val, s.schedule, s.seed);
    run.report.per_rate.push_back(evaluate_at_rate(run.system->student(), splits.test, grid[k], s.eval_seed, s.n_repeats));
    return run;
  };
  ImeOutcome out;
  if (parallel) {
    std::vector<std::future<RunOutcome>> jobs;
    for (std::size_t k = 0; k < grid.size(); ++k) jobs.push_back(std::async(std::launch::async, one, k));
    for (auto& j : jobs) out.runs.push_back(j.get());
  } else {
    for (std::size_t k = 0; k < grid.size(); ++k) out.runs.push_back(one(k));
  }
  auto& r = out.report;
  r.protocol = Protocol::Ime;
  r.framework = spec.framework.label();
  r.strategy = "fixed-per-rate";
  r.config_hash = spec.config_hash;
  for (std::size_t k = 0; k < spec.n_repeats; ++k) r.seeds.push_back(spec.eval_seed + k);
  for (const auto& run : out.runs) r.per_rate.push_back(run.report.per_rate.front());
  r.finalize();
  return out;
}

}  // namespace iteach
