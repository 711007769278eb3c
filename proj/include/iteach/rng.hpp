#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace iteach {

/// Seeded random source with platform-independent draws.
///
/// The standard distributions are implementation-defined, so only the
/// mt19937_64 engine is taken from <random>; every derived draw is computed
/// here so byte-identical outputs survive a change of standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling removes modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second variate is discarded so the
  /// stream position depends only on the number of calls.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Geometric number of trials until first success, support {1, 2, ...}.
  std::uint64_t geometric(double p) {
    std::uint64_t k = 1;
    while (!bernoulli(p)) ++k;
    return k;
  }

  /// Independent child stream; used to give threads and sub-tasks their own
  /// generators without sharing state.
  Rng split() { return Rng(mix(engine_())); }

  template <typename It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = uniform_int(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace iteach
