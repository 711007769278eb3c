#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iteach/data.hpp"
#include "iteach/ecce.hpp"
#include "iteach/error.hpp"
#include "iteach/mixers.hpp"
#include "iteach/nn.hpp"
#include "iteach/tensor.hpp"

namespace iteach {

/// Transformer: identity router over self-attention only.
/// Nas: linear router over the full candidate set.
enum class MixerMode { Transformer, Nas };

inline const char* to_string(MixerMode m) { return m == MixerMode::Transformer ? "transformer" : "nas"; }

struct ModelConfig {
  std::size_t d_model = 128;
  double ffn_ratio = 4.0;
  std::size_t heads = 8;
  std::size_t layers = 3;
  std::size_t max_len = 24;
  std::array<std::size_t, kNumModalities> input_dims{};
  std::size_t n_outputs = 4;
  MixerMode mixer_mode = MixerMode::Transformer;
  std::vector<MixerKind> candidates = all_mixer_kinds();  // used in Nas mode
  std::size_t ecce_window = 7;
  std::size_t ecce_max_span = 30;
  std::size_t ecce_dz = 0;  // 0 means d_model

  std::size_t ffn_hidden() const { return static_cast<std::size_t>(ffn_ratio * static_cast<double>(d_model)); }
  std::size_t local_width() const { return ecce_dz ? ecce_dz : d_model; }

  void validate() const {
    if (d_model < 1) throw ConfigError("model.d_model must be >= 1");
    if (heads < 1 || d_model % heads != 0)
      throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.heads (" +
                        std::to_string(heads) + ")");
    if (layers < 1) throw ConfigError("model.layers must be >= 1");
    if (max_len < 1) throw ConfigError("model.max_len must be >= 1");
    if (ffn_hidden() < 1) throw ConfigError("model.ffn_ratio too small");
    if (n_outputs < 1) throw ConfigError("model output width must be >= 1");
    for (std::size_t m = 0; m < kNumModalities; ++m)
      if (input_dims[m] < 1) throw ConfigError(std::string("input width for modality ") + kModalityKeys[m] + " is 0");
    if (mixer_mode == MixerMode::Nas && candidates.empty()) throw ConfigError("NAS mode needs candidate mixers");
    EcceParams{ecce_window, ecce_max_span, d_model, local_width(), heads}.validate();
  }
};

/// A conversation padded to the model's fixed length.
struct PaddedInput {
  std::array<Tensor, kNumModalities> x;
  std::vector<bool> valid;
  std::size_t length = 0;
};

inline PaddedInput pad_conversation(const Conversation& conv, std::size_t max_len) {
  const std::size_t L = conv.length();
  if (L == 0 || L > max_len)
    throw DimensionError("conversation '" + conv.id + "' has length " + std::to_string(L) + ", model accepts 1.." +
                         std::to_string(max_len));
  PaddedInput in;
  in.length = L;
  in.valid.assign(max_len, false);
  std::fill_n(in.valid.begin(), L, true);
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    const auto& f = conv.features[m];
    Tensor t({max_len, f.cols});
    std::copy(f.values.begin(), f.values.end(), t.values().begin());
    in.x[m] = t;
  }
  return in;
}

/// Pre-norm residual block: x + mixer(norm(x)), then + ffn(norm(.)).
class ItEachEncoder {
 public:
  ItEachEncoder() = default;
  ItEachEncoder(ParamRegistry& reg, const std::string& name, const ModelConfig& cfg, Rng& rng)
      : norm1_(reg, name + ".norm1", cfg.d_model), norm2_(reg, name + ".norm2", cfg.d_model) {
    if (cfg.mixer_mode == MixerMode::Transformer) {
      mixer_ = TokenMixer(MixerSet(reg, name + ".mixer", {MixerKind::Attention}, cfg.d_model, cfg.heads, cfg.max_len, rng),
                          Router(1));
    } else {
      MixerSet set(reg, name + ".mixer", cfg.candidates, cfg.d_model, cfg.heads, cfg.max_len, rng);
      mixer_ = TokenMixer(std::move(set), Router(reg, name + ".router", cfg.d_model, cfg.candidates.size(), rng));
    }
    ffn1_ = Linear(reg, name + ".ffn1", cfg.d_model, cfg.ffn_hidden(), rng);
    ffn2_ = Linear(reg, name + ".ffn2", cfg.ffn_hidden(), cfg.d_model, rng);
  }

  Tensor operator()(const Tensor& x, const ContextChangeMap* bias, const std::vector<bool>& valid,
                    Tensor* router_out = nullptr) const {
    const auto rows = row_factors(valid);
    const Tensor y = mask_rows(add(x, mixer_(norm1_(x), bias, valid, router_out)), rows);
    return mask_rows(add(y, ffn2_(gelu(ffn1_(norm2_(y))))), rows);
  }

  TokenMixer& mixer() { return mixer_; }
  LayerNorm& norm1() { return norm1_; }
  LayerNorm& norm2() { return norm2_; }
  Linear& ffn1() { return ffn1_; }
  Linear& ffn2() { return ffn2_; }

 private:
  LayerNorm norm1_, norm2_;
  TokenMixer mixer_;
  Linear ffn1_, ffn2_;
};

struct LayerOutput {
  Tensor fused;  // H for this layer
  std::array<Tensor, kNumModalities> streams;
  std::array<Tensor, kNumModalities> router_weights;
};

/// Per-modality encoders followed by two text-queried cross-attention rounds
/// (audio, then visual), each residual-added to the text stream.
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParamRegistry& reg, const std::string& name, const ModelConfig& cfg, Rng& rng) {
    for (std::size_t m = 0; m < kNumModalities; ++m)
      encoders_[m] = ItEachEncoder(reg, name + ".enc_" + kModalityKeys[m], cfg, rng);
    cross_audio_ = CrossAttention(reg, name + ".cross_a", cfg.d_model, cfg.heads, rng);
    cross_visual_ = CrossAttention(reg, name + ".cross_v", cfg.d_model, cfg.heads, rng);
  }

  LayerOutput operator()(const std::array<Tensor, kNumModalities>& x,
                         const std::array<const ContextChangeMap*, kNumModalities>& bias,
                         const std::vector<bool>& valid) const {
    LayerOutput out;
    std::array<Tensor, kNumModalities> enc;
    for (std::size_t m = 0; m < kNumModalities; ++m) enc[m] = encoders_[m](x[m], bias[m], valid, &out.router_weights[m]);
    const auto rows = row_factors(valid);
    const Tensor t1 = mask_rows(add(enc[kText], cross_audio_(enc[kText], enc[kAudio], valid)), rows);
    out.fused = mask_rows(add(t1, cross_visual_(t1, enc[kVisual], valid)), rows);
    out.streams = {out.fused, enc[kAudio], enc[kVisual]};
    return out;
  }

  ItEachEncoder& encoder(std::size_t m) { return encoders_[m]; }
  CrossAttention& cross_audio() { return cross_audio_; }
  CrossAttention& cross_visual() { return cross_visual_; }

 private:
  std::array<ItEachEncoder, kNumModalities> encoders_;
  CrossAttention cross_audio_, cross_visual_;
};

/// Fused hidden states of every layer, ordered so H[0] is the last layer (the
/// classifier input), plus per-utterance logits.
struct HiddenStack {
  std::vector<Tensor> H;
  Tensor logits;
  std::array<ContextChangeMap, kNumModalities> context;
  /// router_weights[layer][modality], layer in forward order.
  std::vector<std::array<Tensor, kNumModalities>> router_weights;

  std::size_t depth() const { return H.size(); }
};

class Model {
 public:
  Model(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const EcceParams ep{cfg_.ecce_window, cfg_.ecce_max_span, cfg_.d_model, cfg_.local_width(), cfg_.heads};
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const std::string key = kModalityKeys[m];
      proj_[m] = Linear(reg_, "proj." + key, cfg_.input_dims[m], cfg_.d_model, rng);
      ecce_[m] = Ecce(reg_, "ecce." + key, ep, rng);
    }
    for (std::size_t l = 0; l < cfg_.layers; ++l)
      layers_.emplace_back(reg_, "layer" + std::to_string(l), cfg_, rng);
    classifier_ = Linear(reg_, "classifier", cfg_.d_model, cfg_.n_outputs, rng);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  HiddenStack operator()(const PaddedInput& in) const {
    if (in.valid.size() != cfg_.max_len)
      throw DimensionError("model expects inputs padded to " + std::to_string(cfg_.max_len) + " rows");
    const auto rows = row_factors(in.valid);
    HiddenStack out;
    std::array<Tensor, kNumModalities> streams;
    std::array<const ContextChangeMap*, kNumModalities> bias{};
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      streams[m] = mask_rows(proj_[m](in.x[m]), rows);
      out.context[m] = ecce_[m](streams[m], in.length);
      bias[m] = &out.context[m];
    }
    for (const auto& layer : layers_) {
      auto lo = layer(streams, bias, in.valid);
      out.H.push_back(lo.fused);
      out.router_weights.push_back(lo.router_weights);
      streams = lo.streams;
    }
    std::reverse(out.H.begin(), out.H.end());
    out.logits = classifier_(out.H.front());
    return out;
  }

  HiddenStack operator()(const Conversation& conv) const { return (*this)(pad_conversation(conv, cfg_.max_len)); }

  const ModelConfig& config() const { return cfg_; }
  ParamRegistry& params() { return reg_; }
  const ParamRegistry& params() const { return reg_; }
  Linear& projection(std::size_t m) { return proj_[m]; }
  Ecce& ecce(std::size_t m) { return ecce_[m]; }
  EncoderLayer& layer(std::size_t l) { return layers_.at(l); }
  Linear& classifier() { return classifier_; }

 private:
  ModelConfig cfg_;
  ParamRegistry reg_;
  std::array<Linear, kNumModalities> proj_;
  std::array<Ecce, kNumModalities> ecce_;
  std::vector<EncoderLayer> layers_;
  Linear classifier_;
};

/// CSV rows: layer,modality,utterance,candidate,weight for the first
/// `length` utterances. Transformer-mode layers report a single attention column.
inline void write_router_csv(const HiddenStack& stack, const ModelConfig& cfg, std::size_t length,
                             const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  os << "layer,modality,utterance,candidate,weight\n";
  char buf[40];
  for (std::size_t l = 0; l < stack.router_weights.size(); ++l)
    for (std::size_t m = 0; m < kNumModalities; ++m) {
      const Tensor& w = stack.router_weights[l][m];
      for (std::size_t i = 0; i < std::min(length, w.dim(0)); ++i)
        for (std::size_t o = 0; o < w.dim(1); ++o) {
          const MixerKind kind = cfg.mixer_mode == MixerMode::Nas ? cfg.candidates[o] : MixerKind::Attention;
          std::snprintf(buf, sizeof buf, "%.17g", w(i, o));
          os << l << ',' << kModalityKeys[m] << ',' << i << ',' << to_string(kind) << ',' << buf << '\n';
        }
    }
  if (!os) throw LoadError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------
// Checkpoints: "ITEACHCK" | u32 version | u64 count | entries, each
// u32 name_len | name | u32 rank | u64 dims[rank] | f64 values. All integers
// and floats little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {

template <typename T>
void put_le(std::ostream& os, T v) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  auto bits = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) os.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& is) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = is.get();
    if (c == EOF) throw LoadError("checkpoint truncated");
    bits |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

inline constexpr char kCheckpointMagic[8] = {'I', 'T', 'E', 'A', 'C', 'H', 'C', 'K'};

}  // namespace detail

/// Writes every parameter of each (prefix, registry) pair as "prefix.name".
inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, const ParamRegistry*>>& groups) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw LoadError("cannot write checkpoint " + path.string());
  os.write(detail::kCheckpointMagic, sizeof detail::kCheckpointMagic);
  detail::put_le<std::uint32_t>(os, kCheckpointVersion);
  std::uint64_t count = 0;
  for (const auto& g : groups) count += g.second->size();
  detail::put_le<std::uint64_t>(os, count);
  for (const auto& [prefix, reg] : groups) {
    for (const auto& p : reg->all()) {
      const std::string name = prefix + "." + p.name;
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
      for (auto d : p.value.shape()) detail::put_le<std::uint64_t>(os, d);
      for (double v : p.value.data()) detail::put_le<double>(os, v);
    }
  }
  if (!os) throw LoadError("failed writing checkpoint " + path.string());
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || !std::equal(magic, magic + 8, detail::kCheckpointMagic))
    throw LoadError(path.string() + " is not a checkpoint");
  const auto version = detail::get_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
  const auto count = detail::get_le<std::uint64_t>(is);
  std::vector<CheckpointEntry> entries;
  for (std::uint64_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto len = detail::get_le<std::uint32_t>(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    const auto rank = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(detail::get_le<std::uint64_t>(is));
    e.values.resize(shape_size(e.shape));
    for (auto& v : e.values) v = detail::get_le<double>(is);
    entries.push_back(std::move(e));
  }
  return entries;
}

/// Copies every "prefix.name" entry into the registry. Missing entries and
/// shape disagreements are load errors.
inline void apply_checkpoint(const std::vector<CheckpointEntry>& entries, const std::string& prefix,
                             ParamRegistry& reg) {
  for (auto& p : reg.all()) {
    const std::string name = prefix + "." + p.name;
    auto it = std::find_if(entries.begin(), entries.end(), [&](const CheckpointEntry& e) { return e.name == name; });
    if (it == entries.end()) throw LoadError("checkpoint has no parameter '" + name + "'");
    if (it->shape != p.value.shape())
      throw LoadError("checkpoint parameter '" + name + "' has shape " + shape_string(it->shape) + ", model expects " +
                      shape_string(p.value.shape()));
    p.value.values() = it->values;
  }
}

}  // namespace iteach
