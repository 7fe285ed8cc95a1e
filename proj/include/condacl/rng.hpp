#pragma once

#include <cmath>
#include <cstdint>

namespace condacl {

/// SplitMix64 stream. Child streams are derived by mixing (seed, index) so
/// per-sample generators are independent of call order on the parent.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ull;
    return mix(state_);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [a, b).
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  /// Uniform in the open interval (0, 1); never returns 0.
  double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  /// Standard normal via Box-Muller. One draw consumes two words.
  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  /// Integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  /// Deterministic child stream for (seed, index).
  Rng child(uint64_t index) const {
    uint64_t s = mix(seed_ + (index + 1) * 0x9E3779B97F4A7C15ull);
    return Rng(mix(s ^ 0xD1B54A32D192ED03ull));
  }

  uint64_t seed() const { return seed_; }

  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  uint64_t seed_;
  uint64_t state_;
};

}  // namespace condacl
