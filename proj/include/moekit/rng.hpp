#pragma once

#include <cmath>
#include <cstdint>

namespace moekit {

// SplitMix64 finalizer. Used as a counter-based generator: output k of a
// stream is mix64(key + (k+1) * GOLDEN). Gives bit-identical sequences on
// any platform with IEEE-754 doubles, independent of call interleaving.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Derives an independent stream key from a user seed and a stream id.
// Double mixing keeps nearby seeds/ids from producing correlated streams.
inline std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
  return mix64(seed ^ mix64(stream ^ 0xA0761D6478BD642FULL));
}

class Rng {
 public:
  explicit Rng(std::uint64_t key) : key_(key) {}
  Rng(std::uint64_t seed, std::uint64_t stream) : key_(derive_key(seed, stream)) {}

  std::uint64_t next_u64() { return mix64(key_ + (++counter_) * 0x9E3779B97F4A7C15ULL); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, bound) via rejection; bound > 0.
  std::uint64_t next_below(std::uint64_t bound) {
    std::uint64_t threshold = (0ULL - bound) % bound;
    for (;;) {
      std::uint64_t x = next_u64();
      if (x >= threshold) return x % bound;
    }
  }

  // Standard normal via Box-Muller; consumes two uniforms per pair.
  double next_normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - next_unit();  // (0, 1], keeps log finite
    double u2 = next_unit();
    double rad = std::sqrt(-2.0 * std::log(u1));
    double ang = 6.283185307179586476925286766559 * u2;
    spare_ = rad * std::sin(ang);
    have_spare_ = true;
    return rad * std::cos(ang);
  }

  float next_normal_f() { return static_cast<float>(next_normal()); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace moekit
