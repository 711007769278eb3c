#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iteach/error.hpp"
#include "iteach/rng.hpp"

namespace iteach {

enum Modality : std::size_t { kText = 0, kAudio = 1, kVisual = 2 };
inline constexpr std::size_t kNumModalities = 3;
inline constexpr std::array<const char*, kNumModalities> kModalityKeys{"t", "a", "v"};

enum class LabelKind { Categorical, Dimensional };

inline const char* to_string(LabelKind k) { return k == LabelKind::Categorical ? "categorical" : "dimensional"; }

/// Row-major feature matrix owned by value.
struct FeatureMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  FeatureMatrix() = default;
  FeatureMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  bool operator==(const FeatureMatrix&) const = default;
};

/// One dialogue: per-utterance features for text, audio and visual in
/// speaking order, and one label per utterance (class index stored as an
/// integral double for categorical data, a score in [-3, 3] for dimensional).
struct Conversation {
  std::string id;
  std::array<FeatureMatrix, kNumModalities> features;
  std::vector<double> labels;

  std::size_t length() const { return labels.size(); }
  int label_class(std::size_t i) const { return static_cast<int>(labels[i]); }
  bool operator==(const Conversation&) const = default;
};

struct Dataset {
  LabelKind label_kind = LabelKind::Categorical;
  std::size_t n_classes = 4;
  std::array<std::size_t, kNumModalities> dims{};
  std::vector<Conversation> conversations;

  /// Output width of a classifier head for this label kind.
  std::size_t n_outputs() const { return label_kind == LabelKind::Categorical ? n_classes : 1; }
  bool operator==(const Dataset&) const = default;
};

/// Throws LoadError naming the conversation and field on any violation.
inline void validate_conversation(const Conversation& c, const Dataset& ds) {
  const auto fail = [&](const std::string& field, const std::string& what) {
    throw LoadError("conversation '" + c.id + "', " + field + ": " + what);
  };
  if (c.length() == 0) fail("labels", "conversation is empty");
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const auto& f = c.features[m];
    const std::string field = std::string("features.") + kModalityKeys[m];
    if (f.rows != c.length()) fail(field, std::to_string(f.rows) + " rows for " + std::to_string(c.length()) + " labels");
    if (f.cols != ds.dims[m]) fail(field, "width " + std::to_string(f.cols) + ", expected " + std::to_string(ds.dims[m]));
    if (f.values.size() != f.rows * f.cols) fail(field, "value count disagrees with shape");
    for (double v : f.values)
      if (!std::isfinite(v)) fail(field, "non-finite value");
  }
  for (double y : c.labels) {
    if (!std::isfinite(y)) fail("labels", "non-finite label");
    if (ds.label_kind == LabelKind::Categorical) {
      if (y != std::floor(y) || y < 0 || y >= static_cast<double>(ds.n_classes))
        fail("labels", "class " + std::to_string(y) + " outside [0, " + std::to_string(ds.n_classes) + ")");
    } else if (y < -3.0 || y > 3.0) {
      fail("labels", "score " + std::to_string(y) + " outside [-3, 3]");
    }
  }
}

// ---------------------------------------------------------------------------
// Synthetic regime-switching conversations

struct SynthSpec {
  std::size_t n_conversations = 200;
  std::size_t n_classes = 4;
  std::array<std::size_t, kNumModalities> dims{32, 32, 32};
  std::size_t min_length = 8;
  std::size_t max_length = 24;
  double segment_p = 0.25;  // geometric segment-length parameter
  double mean_scale = 1.0;
  double noise = 1.0;
  std::array<double, kNumModalities> strength{1.0, 1.0, 1.0};
  LabelKind label_kind = LabelKind::Categorical;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_conversations < 1) throw ConfigError("n_conversations must be >= 1");
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      if (dims[m] < 1) throw ConfigError(std::string("dims.") + kModalityKeys[m] + " must be >= 1");
      if (strength[m] < 0) throw ConfigError(std::string("strength.") + kModalityKeys[m] + " must be >= 0");
    }
    if (min_length < 2 || max_length < min_length) throw ConfigError("need 2 <= min_length <= max_length");
    if (!(segment_p > 0 && segment_p <= 1)) throw ConfigError("segment_p must be in (0, 1]");
    if (!(mean_scale > 0)) throw ConfigError("mean_scale must be > 0");
    if (!(noise >= 0)) throw ConfigError("noise must be >= 0");
  }
};

/// Score assigned to class c when generating dimensional labels.
inline double dimensional_level(std::size_t c, std::size_t n_classes) {
  return -3.0 + 6.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(n_classes);
}

struct SynthDataset {
  Dataset dataset;
  /// planted[class][modality]: the exact noiseless feature row of a class.
  std::vector<std::array<std::vector<double>, kNumModalities>> planted;
};

/// Conversations made of locally stable emotion segments. Each segment has
/// length >= 2 and a class different from the previous segment; utterance
/// features are the class's planted row for that modality plus Gaussian
/// noise. All stored values are float32-representable so the on-disk format
/// round-trips exactly.
inline SynthDataset generate_synthetic(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SynthDataset out;
  auto& ds = out.dataset;
  ds.label_kind = spec.label_kind;
  ds.n_classes = spec.n_classes;
  ds.dims = spec.dims;
  out.planted.resize(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      auto& row = out.planted[c][m];
      row.resize(spec.dims[m]);
      for (auto& v : row) v = static_cast<float>(spec.strength[m] * spec.mean_scale * rng.normal());
    }
  const std::size_t width = std::to_string(spec.n_conversations - 1).size();
  for (std::size_t n = 0; n < spec.n_conversations; ++n) {
    Conversation conv;
    std::ostringstream id;
    id << "conv_" << std::setw(static_cast<int>(std::max<std::size_t>(width, 4))) << std::setfill('0') << n;
    conv.id = id.str();
    const std::size_t L = spec.min_length + rng.uniform_int(spec.max_length - spec.min_length + 1);
    std::vector<std::size_t> classes;
    classes.reserve(L);
    std::size_t prev = spec.n_classes;
    while (classes.size() < L) {
      const std::size_t remaining = L - classes.size();
      std::size_t seg = std::clamp<std::size_t>(rng.geometric(spec.segment_p), 2, spec.max_length);
      seg = std::min(seg, remaining);
      if (remaining - seg < 2) seg = remaining;
      std::size_t cls = rng.uniform_int(prev == spec.n_classes ? spec.n_classes : spec.n_classes - 1);
      if (prev != spec.n_classes && cls >= prev) ++cls;
      classes.insert(classes.end(), seg, cls);
      prev = cls;
    }
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      auto& f = conv.features[m];
      f = FeatureMatrix(L, spec.dims[m]);
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < spec.dims[m]; ++j) {
          const double noise = spec.noise > 0 ? spec.noise * rng.normal() : 0.0;
          f(i, j) = static_cast<float>(out.planted[classes[i]][m][j] + noise);
        }
    }
    conv.labels.resize(L);
    for (std::size_t i = 0; i < L; ++i)
      conv.labels[i] = spec.label_kind == LabelKind::Categorical ? static_cast<double>(classes[i])
                                                                 : dimensional_level(classes[i], spec.n_classes);
    ds.conversations.push_back(std::move(conv));
  }
  return out;
}

// ---------------------------------------------------------------------------
// On-disk format: JSON manifest + raw little-endian float32 feature files +
// one label per line text files.

inline constexpr int kManifestVersion = 1;

namespace detail {

inline void write_f32_le(std::ostream& os, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  const unsigned char bytes[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                                  static_cast<unsigned char>(bits >> 16), static_cast<unsigned char>(bits >> 24)};
  os.write(reinterpret_cast<const char*>(bytes), 4);
}

inline std::string format_label(double y, LabelKind kind) {
  if (kind == LabelKind::Categorical) return std::to_string(static_cast<long long>(y));
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", y);
  return buf;
}

}  // namespace detail

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["version"] = kManifestVersion;
  manifest["label_kind"] = to_string(ds.label_kind);
  manifest["n_classes"] = ds.n_classes;
  manifest["dims"] = {{"t", ds.dims[kText]}, {"a", ds.dims[kAudio]}, {"v", ds.dims[kVisual]}};
  manifest["conversations"] = nlohmann::ordered_json::array();
  for (const auto& c : ds.conversations) {
    nlohmann::ordered_json entry;
    entry["id"] = c.id;
    entry["length"] = c.length();
    entry["label_file"] = c.id + ".labels.txt";
    {
      std::ofstream lf(dir / (c.id + ".labels.txt"), std::ios::binary);
      for (double y : c.labels) lf << detail::format_label(y, ds.label_kind) << '\n';
      if (!lf) throw LoadError("cannot write labels for '" + c.id + "'");
    }
    nlohmann::ordered_json files;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const std::string name = c.id + "." + kModalityKeys[m] + ".f32";
      std::ofstream ff(dir / name, std::ios::binary);
      for (double v : c.features[m].values) detail::write_f32_le(ff, v);
      if (!ff) throw LoadError("cannot write features for '" + c.id + "'");
      files[kModalityKeys[m]] = name;
    }
    entry["feature_files"] = files;
    manifest["conversations"].push_back(entry);
  }
  std::ofstream mf(dir / "manifest.json", std::ios::binary);
  mf << manifest.dump(2) << '\n';
  if (!mf) throw LoadError("cannot write manifest in " + dir.string());
}

/// Reads a manifest and its per-conversation files. Conversations come back
/// sorted by id.
inline Dataset load_dataset(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  using nlohmann::json;
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("cannot open manifest " + manifest_path.string());
  json m;
  try {
    in >> m;
  } catch (const json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  const fs::path base = manifest_path.parent_path();
  Dataset ds;
  try {
    if (m.at("version").get<int>() != kManifestVersion)
      throw LoadError("unsupported manifest version " + m.at("version").dump());
    const auto kind = m.at("label_kind").get<std::string>();
    if (kind == "categorical")
      ds.label_kind = LabelKind::Categorical;
    else if (kind == "dimensional")
      ds.label_kind = LabelKind::Dimensional;
    else
      throw LoadError("manifest label_kind must be 'categorical' or 'dimensional', got '" + kind + "'");
    ds.n_classes = m.value("n_classes", ds.label_kind == LabelKind::Categorical ? 0 : 2);
    for (std::size_t k = 0; k < kNumModalities; ++k) ds.dims[k] = m.at("dims").at(kModalityKeys[k]).get<std::size_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("manifest header: ") + e.what());
  }
  if (ds.label_kind == LabelKind::Categorical && ds.n_classes < 2)
    throw LoadError("categorical manifest needs n_classes >= 2");

  for (const auto& entry : m.at("conversations")) {
    Conversation c;
    std::size_t length = 0;
    std::string label_file;
    std::array<std::string, kNumModalities> feature_files;
    try {
      c.id = entry.at("id").get<std::string>();
    } catch (const json::exception& e) {
      throw LoadError(std::string("conversation entry without id: ") + e.what());
    }
    try {
      length = entry.at("length").get<std::size_t>();
      label_file = entry.at("label_file").get<std::string>();
      for (std::size_t k = 0; k < kNumModalities; ++k)
        feature_files[k] = entry.at("feature_files").at(kModalityKeys[k]).get<std::string>();
    } catch (const json::exception& e) {
      throw LoadError("conversation '" + c.id + "': " + e.what());
    }

    std::ifstream lf(base / label_file);
    if (!lf) throw LoadError("conversation '" + c.id + "', labels: missing file " + (base / label_file).string());
    std::string line;
    while (std::getline(lf, line)) {
      if (line.empty()) continue;
      try {
        std::size_t used = 0;
        c.labels.push_back(std::stod(line, &used));
        if (line.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(line);
      } catch (const std::exception&) {
        throw LoadError("conversation '" + c.id + "', labels: cannot parse '" + line + "'");
      }
    }
    if (c.labels.size() != length)
      throw LoadError("conversation '" + c.id + "', labels: " + std::to_string(c.labels.size()) +
                      " labels for declared length " + std::to_string(length));

    for (std::size_t k = 0; k < kNumModalities; ++k) {
      const fs::path path = base / feature_files[k];
      const std::string field = std::string("features.") + kModalityKeys[k];
      std::error_code ec;
      const auto bytes = fs::file_size(path, ec);
      if (ec) throw LoadError("conversation '" + c.id + "', " + field + ": missing file " + path.string());
      const std::uintmax_t expected = static_cast<std::uintmax_t>(length) * ds.dims[k] * 4;
      if (bytes != expected)
        throw LoadError("conversation '" + c.id + "', " + field + ": file holds " + std::to_string(bytes) +
                        " bytes, declared shape " + std::to_string(length) + "x" + std::to_string(ds.dims[k]) +
                        " needs " + std::to_string(expected));
      std::ifstream ff(path, std::ios::binary);
      std::vector<unsigned char> raw(static_cast<std::size_t>(bytes));
      ff.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
      auto& f = c.features[k];
      f = FeatureMatrix(length, ds.dims[k]);
      for (std::size_t i = 0; i < f.values.size(); ++i) {
        const std::uint32_t bits = std::uint32_t{raw[4 * i]} | (std::uint32_t{raw[4 * i + 1]} << 8) |
                                   (std::uint32_t{raw[4 * i + 2]} << 16) | (std::uint32_t{raw[4 * i + 3]} << 24);
        f.values[i] = static_cast<double>(std::bit_cast<float>(bits));
      }
    }
    validate_conversation(c, ds);
    ds.conversations.push_back(std::move(c));
  }
  std::stable_sort(ds.conversations.begin(), ds.conversations.end(),
                   [](const Conversation& a, const Conversation& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < ds.conversations.size(); ++i)
    if (ds.conversations[i].id == ds.conversations[i - 1].id)
      throw LoadError("conversation '" + ds.conversations[i].id + "' appears twice");
  return ds;
}

// ---------------------------------------------------------------------------

struct DatasetSplits {
  Dataset train, val, test;
};

/// Conversation-level shuffle split. Each part keeps the source order.
inline DatasetSplits split(const Dataset& ds, std::array<double, 3> fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (f < 0) throw ConfigError("split fractions must be non-negative");
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::fabs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  const std::size_t n = ds.conversations.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));
  std::vector<int> part(n, 2);
  for (std::size_t i = 0; i < n_train; ++i) part[order[i]] = 0;
  for (std::size_t i = n_train; i < n_train + n_val; ++i) part[order[i]] = 1;
  DatasetSplits out;
  for (Dataset* d : {&out.train, &out.val, &out.test}) {
    d->label_kind = ds.label_kind;
    d->n_classes = ds.n_classes;
    d->dims = ds.dims;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Dataset* dst = part[i] == 0 ? &out.train : (part[i] == 1 ? &out.val : &out.test);
    dst->conversations.push_back(ds.conversations[i]);
  }
  return out;
}

}  // namespace iteach
