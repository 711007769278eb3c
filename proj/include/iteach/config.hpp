#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iteach/data.hpp"
#include "iteach/error.hpp"
#include "iteach/model.hpp"
#include "iteach/protocols.hpp"
#include "iteach/training.hpp"

namespace iteach {

inline constexpr int kConfigVersion = 1;

struct DataConfig {
  std::string manifest;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 0;
};

/// A whole run: data, model, framework, schedule, optimizer and evaluation
/// settings plus the output directory.
struct RunConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  DataConfig data;
  RunSpec run;
};

namespace detail {

/// Walks one JSON object, remembering which keys were read so leftovers can
/// be reported as unknown. Errors carry the dotted path of the field.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void read(const std::string& key, T& out, bool required = false) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw ConfigError("missing required field '" + field(key) + "'");
      return;
    }
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("field '" + field(key) + "' has the wrong type: " + j_.at(key).dump());
    }
  }

  std::optional<FieldReader> object(const std::string& key, bool required = false) {
    seen_.insert(key);
    if (!j_.contains(key)) {
      if (required) throw ConfigError("missing required field '" + field(key) + "'");
      return std::nullopt;
    }
    return FieldReader(j_.at(key), field(key));
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown field '" + field(key) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
E parse_enum(const std::string& field, const std::string& value,
             const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [name, e] : options)
    if (name == value) return e;
  std::string allowed;
  for (const auto& [name, _] : options) allowed += (allowed.empty() ? "" : "|") + name;
  throw ConfigError("field '" + field + "' must be one of " + allowed + ", got '" + value + "'");
}

inline const std::vector<std::pair<std::string, MixerMode>>& mixer_mode_names() {
  static const std::vector<std::pair<std::string, MixerMode>> v{{"transformer", MixerMode::Transformer},
                                                                {"nas", MixerMode::Nas}};
  return v;
}

inline const std::vector<std::pair<std::string, MixerKind>>& mixer_kind_names() {
  static const std::vector<std::pair<std::string, MixerKind>> v{{"attention", MixerKind::Attention},
                                                                {"mlp", MixerKind::Mlp},
                                                                {"avgpool", MixerKind::AvgPool},
                                                                {"maxpool", MixerKind::MaxPool}};
  return v;
}

inline const std::vector<std::pair<std::string, FrameworkKind>>& framework_names() {
  static const std::vector<std::pair<std::string, FrameworkKind>> v{
      {"ITS", FrameworkKind::Its}, {"PRE", FrameworkKind::Pre}, {"TS", FrameworkKind::Ts}};
  return v;
}

inline const std::vector<std::pair<std::string, ScheduleKind>>& schedule_names() {
  static const std::vector<std::pair<std::string, ScheduleKind>> v{
      {"fixed", ScheduleKind::Fixed}, {"random", ScheduleKind::Random}, {"progressive", ScheduleKind::Progressive}};
  return v;
}

inline const std::vector<std::pair<std::string, RecRegion>>& rec_region_names() {
  static const std::vector<std::pair<std::string, RecRegion>> v{{"masked", RecRegion::Masked}, {"all", RecRegion::All}};
  return v;
}

inline const std::vector<std::pair<std::string, LabelKind>>& label_kind_names() {
  static const std::vector<std::pair<std::string, LabelKind>> v{{"categorical", LabelKind::Categorical},
                                                                {"dimensional", LabelKind::Dimensional}};
  return v;
}

template <class E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& options) {
  for (const auto& [name, v] : options)
    if (v == e) return name;
  return "?";
}

template <class E>
void read_enum(FieldReader& r, const std::string& key, E& out, const std::vector<std::pair<std::string, E>>& options) {
  const bool present = r.has(key);
  std::string s;
  r.read(key, s);
  if (present) out = parse_enum(r.field(key), s, options);
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::FieldReader;
  using detail::read_enum;
  RunConfig c;
  FieldReader root(j, "");
  root.read("version", c.version, true);
  if (c.version != kConfigVersion)
    throw ConfigError("field 'version' must be " + std::to_string(kConfigVersion) + ", got " + std::to_string(c.version));
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);

  if (auto d = root.object("data")) {
    d->read("manifest", c.data.manifest);
    std::vector<double> split;
    d->read("split", split);
    if (!split.empty()) {
      if (split.size() != 3) throw ConfigError("field 'data.split' needs 3 fractions");
      c.data.split = {split[0], split[1], split[2]};
    }
    d->read("split_seed", c.data.split_seed);
    d->finish();
  }

  auto& m = c.run.model;
  {
    auto r = root.object("model", true);
    r->read("d_model", m.d_model, true);
    r->read("heads", m.heads);
    r->read("ffn_ratio", m.ffn_ratio);
    r->read("max_len", m.max_len);
    r->read("ecce_window", m.ecce_window);
    r->read("ecce_max_span", m.ecce_max_span);
    r->read("ecce_dz", m.ecce_dz);
    std::vector<std::string> cands;
    r->read("candidates", cands);
    if (!cands.empty()) {
      m.candidates.clear();
      for (std::size_t i = 0; i < cands.size(); ++i)
        m.candidates.push_back(
            detail::parse_enum(r->field("candidates") + "[" + std::to_string(i) + "]", cands[i], detail::mixer_kind_names()));
    }
    r->finish();
  }

  auto& fw = c.run.framework;
  if (auto r = root.object("framework")) {
    FrameworkKind kind = fw.kind;
    read_enum(*r, "kind", kind, detail::framework_names());
    fw = kind == FrameworkKind::Its ? FrameworkSpec::its()
         : kind == FrameworkKind::Pre ? FrameworkSpec::pre()
                                      : FrameworkSpec::ts();
    read_enum(*r, "teacher_mode", fw.teacher_mode, detail::mixer_mode_names());
    read_enum(*r, "student_mode", fw.student_mode, detail::mixer_mode_names());
    r->read("teacher_layers", fw.teacher_layers);
    r->read("student_layers", fw.student_layers);
    r->finish();
  }

  auto& sc = c.run.schedule;
  if (auto r = root.object("schedule")) {
    read_enum(*r, "kind", sc.kind, detail::schedule_names());
    r->read("rate", sc.rate);
    r->read("rates", sc.rates);
    r->read("start", sc.start);
    r->read("step", sc.step);
    r->read("every", sc.every);
    r->read("cap", sc.cap);
    r->finish();
  }

  auto& t = c.run.training;
  if (auto r = root.object("training")) {
    r->read("batch_size", t.batch_size);
    r->read("epochs", t.epochs);
    r->read("lr", t.model_optimizer.lr);
    r->read("router_lr", t.router_lr);
    r->read("beta1", t.model_optimizer.beta1);
    r->read("beta2", t.model_optimizer.beta2);
    r->read("eps", t.model_optimizer.eps);
    r->read("weight_decay", t.model_optimizer.weight_decay);
    read_enum(*r, "rec_region", t.rec_region, detail::rec_region_names());
    r->read("l1_regression", t.l1_regression);
    r->read("select_best", t.select_best);
    r->finish();
  }

  if (auto r = root.object("eval")) {
    r->read("n_repeats", c.run.n_repeats);
    r->read("seed", c.run.eval_seed);
    r->finish();
  }
  root.finish();

  c.run.seed = c.seed;
  fw.validate();
  sc.validate();
  if (t.batch_size < 1) throw ConfigError("field 'training.batch_size' must be >= 1");
  if (c.run.n_repeats < 1) throw ConfigError("field 'eval.n_repeats' must be >= 1");
  if (m.d_model < 1) throw ConfigError("field 'model.d_model' must be >= 1");
  if (m.heads < 1 || m.d_model % m.heads != 0)
    throw ConfigError("field 'model.heads' must divide model.d_model");
  return c;
}

/// The effective configuration with every default spelled out.
inline nlohmann::ordered_json to_json(const RunConfig& c) {
  using nlohmann::ordered_json;
  const auto& m = c.run.model;
  const auto& fw = c.run.framework;
  const auto& sc = c.run.schedule;
  const auto& t = c.run.training;
  ordered_json j;
  j["version"] = c.version;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["data"] = {{"manifest", c.data.manifest}, {"split", c.data.split}, {"split_seed", c.data.split_seed}};
  std::vector<std::string> cands;
  for (auto k : m.candidates) cands.push_back(detail::enum_name(k, detail::mixer_kind_names()));
  j["model"] = {{"d_model", m.d_model},         {"heads", m.heads},
                {"ffn_ratio", m.ffn_ratio},     {"max_len", m.max_len},
                {"ecce_window", m.ecce_window}, {"ecce_max_span", m.ecce_max_span},
                {"ecce_dz", m.ecce_dz},         {"candidates", cands}};
  j["framework"] = {{"kind", detail::enum_name(fw.kind, detail::framework_names())},
                    {"teacher_mode", detail::enum_name(fw.teacher_mode, detail::mixer_mode_names())},
                    {"student_mode", detail::enum_name(fw.student_mode, detail::mixer_mode_names())},
                    {"teacher_layers", fw.teacher_layers},
                    {"student_layers", fw.student_layers}};
  j["schedule"] = {{"kind", detail::enum_name(sc.kind, detail::schedule_names())},
                   {"rate", sc.rate},
                   {"rates", sc.rates},
                   {"start", sc.start},
                   {"step", sc.step},
                   {"every", sc.every},
                   {"cap", sc.cap}};
  j["training"] = {{"batch_size", t.batch_size},
                   {"epochs", t.epochs},
                   {"lr", t.model_optimizer.lr},
                   {"router_lr", t.router_lr},
                   {"beta1", t.model_optimizer.beta1},
                   {"beta2", t.model_optimizer.beta2},
                   {"eps", t.model_optimizer.eps},
                   {"weight_decay", t.model_optimizer.weight_decay},
                   {"rec_region", detail::enum_name(t.rec_region, detail::rec_region_names())},
                   {"l1_regression", t.l1_regression},
                   {"select_best", t.select_best}};
  j["eval"] = {{"n_repeats", c.run.n_repeats}, {"seed", c.run.eval_seed}};
  return j;
}

/// 64-bit FNV-1a as 16 hex digits.
inline std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string config_hash(const RunConfig& c) { return fnv1a_hex(to_json(c).dump()); }

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON: " + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  RunConfig c = parse_run_config(read_json_file(path));
  c.run.config_hash = config_hash(c);
  return c;
}

inline SynthSpec parse_synth_spec(const nlohmann::json& j) {
  using detail::FieldReader;
  SynthSpec s;
  FieldReader r(j, "");
  int version = kConfigVersion;
  r.read("version", version);
  if (version != kConfigVersion) throw ConfigError("field 'version' must be " + std::to_string(kConfigVersion));
  r.read("n_conversations", s.n_conversations);
  r.read("n_classes", s.n_classes);
  r.read("min_length", s.min_length);
  r.read("max_length", s.max_length);
  r.read("segment_p", s.segment_p);
  r.read("mean_scale", s.mean_scale);
  r.read("noise", s.noise);
  r.read("seed", s.seed);
  detail::read_enum(r, "label_kind", s.label_kind, detail::label_kind_names());
  for (const char* key : {"dims", "strength"}) {
    if (auto o = r.object(key)) {
      for (std::size_t m = 0; m < kNumModalities; ++m) {
        if (std::string(key) == "dims")
          o->read(kModalityKeys[m], s.dims[m]);
        else
          o->read(kModalityKeys[m], s.strength[m]);
      }
      o->finish();
    }
  }
  r.finish();
  s.validate();
  return s;
}

}  // namespace iteach
