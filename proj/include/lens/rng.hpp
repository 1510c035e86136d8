#pragma once

#include <cstdint>

namespace lens {

/// Counter-based 64-bit generator.
///
/// Output n of stream `key` is splitmix64_mix(key + (n + 1) * 0x9E3779B97F4A7C15),
/// i.e. SplitMix64 with the state exposed as (key, counter). Any draw can be
/// recomputed from (key, counter) alone, so streams are reproducible across
/// platforms and independent of scheduling.
class CounterRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit CounterRng(std::uint64_t key = 0, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() { return mix(key_ + (++counter_) * kGolden); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; caches the second variate.
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Independent child stream; children with distinct tags do not overlap the parent.
  CounterRng fork(std::uint64_t tag) const { return CounterRng(mix(key_ ^ mix(tag + kGolden))); }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Seed for ensemble member `member` of a run: run_seed + member * 0x9E3779B9.
constexpr std::uint64_t member_seed(std::uint64_t run_seed, std::uint64_t member) {
  return run_seed + member * 0x9E3779B9ULL;
}

}  // namespace lens
