#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace npss {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

/// Seeded generator with label-addressed substreams.
///
/// Only the raw 64-bit engine output (std::mt19937_64, whose sequence is fixed by the
/// standard) is consumed; uniform and normal conversions are done here rather than with
/// std::*_distribution so draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::string_view label = {})
      : seed_(mix(seed, label)), engine_(seed_) {}

  /// Independent substream; depends only on this stream's seed and the label, not on draws made so far.
  Rng split(std::string_view label) const { return Rng(seed_, label); }
  Rng split(std::string_view label, std::uint64_t index) const {
    return Rng(detail::splitmix64(seed_ ^ detail::splitmix64(index + 1)), label);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 bits of precision.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi].
  int uniform_int(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    // rejection sampling keeps the distribution exact
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return lo + static_cast<int>(x % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (two uniforms per draw, no caching).
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  static std::uint64_t mix(std::uint64_t seed, std::string_view label) {
    if (label.empty()) return detail::splitmix64(seed);
    return detail::splitmix64(detail::splitmix64(seed) ^ detail::fnv1a(label));
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace npss
