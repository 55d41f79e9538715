#pragma once

#include <cstdint>
#include <vector>

namespace crab {

// SplitMix64. Used instead of <random> distributions so that draws are
// identical across standard library implementations.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

 private:
  std::uint64_t state_;
};

// Seed for the i-th derived stream (restart i, baseline i, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 mix(seed ^ (0xD1B54A32D192ED03ULL * (stream + 1)));
  return mix.next();
}

inline std::vector<double> uniform_vector(std::size_t n, std::uint64_t seed,
                                          double lo = 0.0, double hi = 1.0) {
  SplitMix64 rng(seed);
  std::vector<double> out(n);
  for (auto& x : out) x = rng.uniform(lo, hi);
  return out;
}

}  // namespace crab
