#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>

namespace scns {

/// Counter-based 64-bit generator. Output n of stream s under seed k is
/// mix(key(k, s) + n * golden), where mix is the SplitMix64 finalizer, so any
/// position of any stream can be reproduced without replaying the stream.
///
/// Satisfies UniformRandomBitGenerator and can drive <random> distributions.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(derive_key(seed, stream)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() { return mix(key_ + (counter_++) * kGolden); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be positive.
  std::size_t index(std::size_t n) {
    // Lemire's nearly-divisionless bounded draw.
    const std::uint64_t range = n;
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * range;
    auto low = static_cast<std::uint64_t>(m);
    if (low < range) {
      const std::uint64_t threshold = (0 - range) % range;
      while (low < threshold) {
        m = static_cast<unsigned __int128>((*this)()) * range;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::size_t>(m >> 64);
  }

  double normal() { return std::normal_distribution<double>{}(*this); }

  /// Independent generator for a child stream; the parent is not advanced.
  CounterRng split(std::uint64_t child) const {
    return CounterRng(seed_, stream_ * 0x100000001b3ULL + child + 1);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t position() const { return counter_; }

 private:
  static constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t derive_key(std::uint64_t seed,
                                            std::uint64_t stream) {
    return mix(seed ^ 0x6a09e667f3bcc909ULL) ^ mix(stream + kGolden);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Beta(a, b) draw via the ratio of two gamma variates.
inline double sample_beta(double a, double b, CounterRng& rng) {
  const double x = std::gamma_distribution<double>(a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b, 1.0)(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

}  // namespace scns
