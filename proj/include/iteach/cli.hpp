#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "iteach/config.hpp"
#include "iteach/data.hpp"
#include "iteach/eval.hpp"
#include "iteach/gradcheck_suite.hpp"
#include "iteach/model.hpp"
#include "iteach/protocols.hpp"
#include "iteach/training.hpp"

namespace iteach::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitFailure = 2;

namespace fs = std::filesystem;

/// Flag overrides shared by the config-driven subcommands.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> epochs;
};

/// Config file, then ITEACH_SEED, then command-line flags.
inline RunConfig effective_config(const Overrides& o) {
  RunConfig c = parse_run_config(read_json_file(o.config));
  if (const char* env = std::getenv("ITEACH_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      c.seed = std::stoull(env, &used);
      if (env[used] != '\0') throw std::invalid_argument(env);
    } catch (const std::exception&) {
      throw ConfigError(std::string("ITEACH_SEED must be an unsigned integer, got '") + env + "'");
    }
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.output_dir = *o.out;
  if (o.epochs) c.run.training.epochs = *o.epochs;
  c.run.seed = c.seed;
  c.run.config_hash = config_hash(c);
  return c;
}

inline void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seed, "Override the configured seed (also settable via ITEACH_SEED)");
  cmd->add_option("--out", o.out, "Override the configured output directory");
  cmd->add_option("--epochs", o.epochs, "Override training.epochs");
}

inline fs::path prepare_output(const RunConfig& c) {
  const fs::path dir = c.output_dir;
  fs::create_directories(dir);
  std::ofstream os(dir / "effective_config.json", std::ios::binary);
  os << to_json(c).dump(2) << '\n';
  return dir;
}

inline DatasetSplits load_splits(const RunConfig& c) {
  if (c.data.manifest.empty()) throw ConfigError("missing required field 'data.manifest'");
  return split(load_dataset(c.data.manifest), c.data.split, c.data.split_seed);
}

inline void write_epoch_log(const fs::path& path, const TrainResult& r) {
  std::ofstream os(path, std::ios::binary);
  os << epoch_log_header() << '\n';
  for (const auto& e : r.epochs) os << epoch_log_line(e) << '\n';
}

inline std::string report_stem(const EvalReport& r) {
  return std::string("report_") + to_string(r.protocol) + "_" + r.framework + "_" + r.strategy;
}

inline void write_report(const fs::path& dir, const EvalReport& r, std::ostream& out) {
  write_report_csv(r, dir / (report_stem(r) + ".csv"));
  write_report_json(r, dir / (report_stem(r) + ".json"));
  out << to_string(r.protocol) << " " << r.framework << " " << r.strategy << ": average " << detail::fmt17(r.average)
      << ", decline " << detail::fmt17(r.decline) << '\n';
}

inline int cmd_gen_synth(const std::string& spec_path, const std::string& out_dir, std::ostream& out) {
  const SynthSpec spec = parse_synth_spec(read_json_file(spec_path));
  const auto synth = generate_synthetic(spec);
  save_dataset(synth.dataset, out_dir);
  out << "wrote " << synth.dataset.conversations.size() << " conversations to " << out_dir << '\n';
  return kExitOk;
}

inline int cmd_train(const Overrides& o, std::ostream& out) {
  const RunConfig c = effective_config(o);
  const auto splits = load_splits(c);
  const fs::path dir = prepare_output(c);
  auto sys = make_system(c.run, splits.train);
  const auto result = train(*sys, splits.train, splits.val, c.run.schedule, c.run.seed, [&](const EpochLog& e) {
    out << "epoch " << e.epoch << " rate " << e.rate << " loss " << e.loss.total << " val_waf " << e.val_waf << '\n';
  });
  write_epoch_log(dir / "epochs.csv", result);
  save_checkpoint(dir / "checkpoint.bin", sys->checkpoint_groups());
  out << "best epoch " << result.best_epoch << ", checkpoint " << (dir / "checkpoint.bin").string() << '\n';
  return kExitOk;
}

inline int cmd_eval_ume(const Overrides& o, const std::string& checkpoint, std::ostream& out) {
  const RunConfig c = effective_config(o);
  const auto splits = load_splits(c);
  const fs::path dir = prepare_output(c);
  auto sys = make_system(c.run, splits.train);
  sys->load(read_checkpoint(checkpoint));
  write_report(dir, evaluate_ume(*sys, splits.test, c.run), out);
  return kExitOk;
}

inline int cmd_eval_ime(const Overrides& o, bool parallel, std::ostream& out) {
  const RunConfig c = effective_config(o);
  const auto splits = load_splits(c);
  const fs::path dir = prepare_output(c);
  const auto ime = run_ime(c.run, splits, parallel);
  const auto& grid = missing_rate_grid();
  for (std::size_t k = 0; k < ime.runs.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "ime_rate%.1f", grid[k]);
    const fs::path sub = dir / name;
    fs::create_directories(sub);
    write_epoch_log(sub / "epochs.csv", ime.runs[k].training);
    save_checkpoint(sub / "checkpoint.bin", ime.runs[k].system->checkpoint_groups());
  }
  write_report(dir, ime.report, out);
  return kExitOk;
}

inline int cmd_gradcheck(std::ostream& out) {
  bool ok = true;
  for (const auto& c : run_gradcheck_suite()) {
    char line[128];
    std::snprintf(line, sizeof line, "%-22s max_rel_err %.3e  %s (%.2fs)", c.name.c_str(), c.max_rel_error,
                  c.passed() ? "PASS" : "FAIL", c.seconds);
    out << line << '\n';
    ok = ok && c.passed();
  }
  return ok ? kExitOk : kExitFailure;
}

/// Per model and modality, the bias map as CSV rows i,j,channel,value over
/// the true length, plus the router weights of every layer.
inline int cmd_dump_ecce(const Overrides& o, const std::string& checkpoint, const std::string& conv_id,
                         std::ostream& out) {
  const RunConfig c = effective_config(o);
  if (c.data.manifest.empty()) throw ConfigError("missing required field 'data.manifest'");
  const Dataset ds = load_dataset(c.data.manifest);
  const auto it = std::find_if(ds.conversations.begin(), ds.conversations.end(),
                               [&](const Conversation& conv) { return conv.id == conv_id; });
  if (it == ds.conversations.end()) throw ConfigError("no conversation with id '" + conv_id + "'");
  const fs::path dir = prepare_output(c) / "ecce";
  fs::create_directories(dir);
  auto sys = make_system(c.run, ds);
  sys->load(read_checkpoint(checkpoint));
  std::vector<std::pair<std::string, const Model*>> models;
  if (sys->teacher()) models.emplace_back("teacher", sys->teacher());
  models.emplace_back(sys->teacher() ? "student" : "model", &sys->student());
  NoGradScope no_grad;
  std::size_t files = 0;
  for (const auto& [name, model] : models) {
    const auto stack = (*model)(*it);
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const auto& map = stack.context[m];
      std::ofstream os(dir / (conv_id + "_" + name + "_" + kModalityKeys[m] + ".csv"), std::ios::binary);
      os << "i,j,channel,value\n";
      for (std::size_t i = 0; i < map.length; ++i)
        for (std::size_t j = 0; j < map.length; ++j)
          for (std::size_t h = 0; h < map.heads.size(); ++h)
            os << i << ',' << j << ',' << h << ',' << detail::fmt17(map.heads[h](i, j)) << '\n';
      ++files;
    }
    write_router_csv(stack, model->config(), it->length(), dir / (conv_id + "_" + name + "_router.csv"));
    ++files;
  }
  out << "wrote " << files << " files to " << dir.string() << '\n';
  return kExitOk;
}

/// Runs one subcommand. Validation problems exit 1, runtime failures exit 2.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Incomplete multimodal emotion recognition: training, evaluation and diagnostics"};
  app.require_subcommand(1);

  std::string spec_path, synth_out;
  auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic dataset");
  gen->add_option("--spec", spec_path, "Synthetic dataset spec (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", synth_out, "Output directory for the manifest and feature files")->required();

  Overrides train_o, ume_o, ime_o, dump_o;
  auto* tr = app.add_subcommand("train", "Train the configured framework and strategy");
  add_overrides(tr, train_o);

  std::string ume_ckpt;
  auto* ume = app.add_subcommand("eval-ume", "Evaluate one frozen checkpoint at every missing rate");
  add_overrides(ume, ume_o);
  ume->add_option("--checkpoint", ume_ckpt, "Checkpoint written by train")->required()->check(CLI::ExistingFile);

  bool parallel = false;
  auto* ime = app.add_subcommand("eval-ime", "Train and evaluate one model per missing rate");
  add_overrides(ime, ime_o);
  ime->add_flag("--parallel", parallel, "Run the per-rate trainings concurrently");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op and a toy model");

  std::string dump_ckpt, dump_conv;
  auto* dump = app.add_subcommand("dump-ecce", "Write the context bias maps and router weights of one conversation as CSV");
  add_overrides(dump, dump_o);
  dump->add_option("--checkpoint", dump_ckpt, "Checkpoint written by train")->required()->check(CLI::ExistingFile);
  dump->add_option("--conversation", dump_conv, "Conversation id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  try {
    if (*gen) return cmd_gen_synth(spec_path, synth_out, out);
    if (*tr) return cmd_train(train_o, out);
    if (*ume) return cmd_eval_ume(ume_o, ume_ckpt, out);
    if (*ime) return cmd_eval_ime(ime_o, parallel, out);
    if (*gc) return cmd_gradcheck(out);
    if (*dump) return cmd_dump_ecce(dump_o, dump_ckpt, dump_conv, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const LoadError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitInvalid;
}

}  // namespace iteach::cli
