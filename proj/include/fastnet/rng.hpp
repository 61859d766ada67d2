#pragma once

// Deterministic random number generation.
//
// The generator is SplitMix64 (Steele, Lea, Flood: "Fast splittable
// pseudorandom number generators", OOPSLA 2014). It was chosen because it
// is tiny, passes BigCrush when used as a 64-bit generator, and is trivially
// splittable: independent streams are derived by hashing (seed, key) pairs,
// so per-record / per-epoch streams never depend on iteration order or
// thread scheduling.
//
// The raw 64-bit stream is bit-exact across platforms. Gaussian samples go
// through std::log/std::cos/std::sqrt and therefore inherit the platform
// libm's rounding in the last ulp; within one platform they are bit-stable.

#include <cmath>
#include <cstdint>

namespace fastnet {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), n >= 1. Rejection sampling, no modulo bias.
  std::uint64_t next_below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  bool next_bool() { return (next_u64() >> 63) != 0; }

  // Standard normal via Box-Muller. Two uniforms per sample; the second
  // variate of each pair is discarded to keep the generator stateless
  // beyond `state_`.
  double next_normal() {
    const double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    const double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
  }

  // Derived stream keyed by (seed, a, b). Independent of this generator's
  // current position, so the same key always yields the same stream.
  Rng split(std::uint64_t a, std::uint64_t b = 0) const {
    std::uint64_t h = scramble(seed_ ^ scramble(a + 0x510E527FADE682D1ULL));
    h = scramble(h ^ scramble(b + 0x9B05688C2B3E6C1FULL));
    return Rng(h);
  }

 private:
  static std::uint64_t scramble(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
};

}  // namespace fastnet
