#pragma once

#include <cmath>
#include <cstdint>

namespace repdet {

// SplitMix64 with a split() operation for per-module substreams.
// Fixed algorithm so seeded runs reproduce bit-for-bit across platforms
// and standard-library versions (std distributions are not portable).
class SplitMix64 {
 public:
  explicit SplitMix64(uint64_t seed = 0x9E3779B97F4A7C15ull) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Child stream decorrelated from the parent's continuation.
  SplitMix64 split() { return SplitMix64(next_u64() ^ 0x5851F42D4C957F2Dull); }

  // [0,1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0,n)
  int uniform_int(int n) { return n > 0 ? int(next_u64() % uint64_t(n)) : 0; }

  // Box-Muller; recomputed per call (no cached spare) to keep state trivial.
  double normal() {
    double u1 = 1.0 - uniform();  // (0,1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t state_;
};

}  // namespace repdet
