#pragma once

#include <cmath>
#include <cstdint>

namespace dwp {

// Splittable counter-based PRNG built on splitmix64. Every stochastic
// operation draws from an explicitly passed stream; there is no global RNG.
// derive() creates a statistically independent child stream, so a master
// seed plus a stream id reproduces any part of a run in isolation.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : seed_(seed), state_(seed) {}

  // Child stream keyed by (this stream's seed, salt); deterministic and
  // independent of how far this stream has advanced.
  RngStream derive(std::uint64_t salt) const {
    return RngStream(mix(seed_ ^ mix(salt + 0x9E3779B97F4A7C15ULL)));
  }

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // Uniform in the open interval (0, 1).
  double next_uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  // Uniform in [lo, hi).
  double next_uniform(double lo, double hi) {
    return lo + (hi - lo) * next_uniform();
  }

  // Standard normal via Box-Muller (portable, unlike std distributions).
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = next_uniform();
    double u2 = next_uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace dwp
