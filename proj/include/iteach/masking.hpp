#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "iteach/data.hpp"
#include "iteach/error.hpp"
#include "iteach/rng.hpp"

namespace iteach {

inline constexpr double kMaxMissingRate = 0.7;

/// Which (utterance, modality) slots survive. Rows at or beyond `length` are
/// padding and keep nothing.
struct MaskPattern {
  std::vector<std::array<bool, kNumModalities>> keep;
  /// The Bernoulli draws before any resurrection, for auditing the sampler.
  std::vector<std::array<bool, kNumModalities>> keep_before_resurrection;
  std::size_t length = 0;
  double rate = 0.0;

  std::size_t rows() const { return keep.size(); }
  bool any_dropped(std::size_t i) const { return !(keep[i][0] && keep[i][1] && keep[i][2]); }
};

/// Drops each valid slot independently with probability `rate`; an utterance
/// left with no modality gets one back, chosen uniformly.
inline MaskPattern generate_mask(std::size_t length, double rate, Rng& rng, std::size_t padded_rows = 0) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("missing rate " + std::to_string(rate) + " outside [0, 1]");
  const std::size_t rows = std::max(length, padded_rows);
  MaskPattern mask;
  mask.length = length;
  mask.rate = rate;
  mask.keep.assign(rows, {false, false, false});
  mask.keep_before_resurrection.assign(rows, {false, false, false});
  for (std::size_t i = 0; i < length; ++i) {
    auto& row = mask.keep[i];
    for (std::size_t m = 0; m < kNumModalities; ++m) row[m] = rate == 0.0 ? true : !rng.bernoulli(rate);
    mask.keep_before_resurrection[i] = row;
    if (!row[0] && !row[1] && !row[2]) row[rng.uniform_int(kNumModalities)] = true;
  }
  return mask;
}

/// Value copy of `conv` with every dropped slot's feature row zeroed.
inline Conversation apply_mask(const Conversation& conv, const MaskPattern& mask) {
  if (mask.length != conv.length())
    throw DimensionError("mask for " + std::to_string(mask.length) + " utterances applied to conversation '" +
                         conv.id + "' of length " + std::to_string(conv.length()));
  Conversation out = conv;
  for (std::size_t m = 0; m < kNumModalities; ++m) {
    auto& f = out.features[m];
    for (std::size_t i = 0; i < conv.length(); ++i)
      if (!mask.keep[i][m])
        for (std::size_t j = 0; j < f.cols; ++j) f(i, j) = 0.0;
  }
  return out;
}

/// CSV rows: utterance,modality,kept
inline void write_mask_csv(const MaskPattern& mask, const std::filesystem::path& path) {
  std::ofstream os(path);
  os << "utterance,modality,kept\n";
  for (std::size_t i = 0; i < mask.rows(); ++i)
    for (std::size_t m = 0; m < kNumModalities; ++m)
      os << i << ',' << kModalityKeys[m] << ',' << (mask.keep[i][m] ? 1 : 0) << '\n';
}

}  // namespace iteach
