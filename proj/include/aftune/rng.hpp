#pragma once

#include <cmath>
#include <cstdint>

namespace aftune {

/// Purpose tags that keep random streams for different consumers disjoint.
enum class RngPurpose : std::uint64_t {
  init = 1,
  data = 2,
  dataset = 3,
  audit = 4,
  nondeterminism = 5,
  attack = 6,
  replay_noise = 7,
  scenario = 8,
  test = 9,
};

/// Counter-based generator keyed by (seed, purpose, a, b). The stream for a key
/// depends only on the key, so e.g. the batch for step t can be regenerated
/// without replaying steps 0..t-1. Distributions are implemented here rather
/// than with <random> because the standard distributions are not portable.
class CounterRng {
 public:
  CounterRng(std::uint64_t seed, RngPurpose purpose, std::uint64_t a = 0, std::uint64_t b = 0)
      : key_(mix(mix(mix(seed ^ 0x243f6a8885a308d3ULL) ^ static_cast<std::uint64_t>(purpose)) ^ a) ^
             mix(b + 0x9e3779b97f4a7c15ULL)) {}

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ULL * ++counter_); }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Uses rejection to avoid modulo bias.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace aftune
