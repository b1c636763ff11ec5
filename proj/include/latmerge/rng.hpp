#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace latmerge {

// Counter-based SplitMix64: draw k is mix(seed + (k+1)·gamma), so the stream
// is a pure function of (seed, position). Children are seeded by mixing the
// parent seed with a task index. Integer and uniform draws are bit-exact on
// every platform; normal() goes through libm log/cos.
class SeededStream {
 public:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit SeededStream(std::uint64_t seed) : seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return pos_; }

  std::uint64_t next_u64() {
    ++pos_;
    return mix(seed_ + pos_ * kGamma);
  }

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; consumes two draws per call.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  SeededStream split(std::uint64_t index) const {
    return SeededStream(mix(seed_ ^ mix(index + kGamma)));
  }

  static std::uint64_t derive(std::uint64_t seed, std::uint64_t index) {
    return mix(seed ^ mix(index + kGamma));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t pos_ = 0;
};

}  // namespace latmerge
