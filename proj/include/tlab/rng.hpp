#pragma once

#include "tlab/common.hpp"

#include <cmath>
#include <cstdint>

namespace tlab {

// ---------------------------------------------------------------------------
// Counter-based deterministic RNG.
//
// Every consumer owns an independent stream identified by (seed, purpose
// string, integer subkeys).  Draw i of a stream depends only on the stream key
// and i, so results are reproducible bit-for-bit regardless of evaluation
// order, thread count, or platform.  We deliberately avoid <random>
// distributions: their output is implementation-defined, which would break
// cross-platform determinism.  The generator core is SplitMix64.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

class Prng {
 public:
  Prng() : key_(0) {}
  Prng(uint64_t seed, const std::string& purpose) : key_(mix_(seed, purpose)) {}

  /// Child stream: same seed material plus extra subkeys.  Forking never
  /// advances the parent, so fork order is irrelevant.
  Prng fork(const std::string& purpose) const {
    Prng c;
    c.key_ = splitmix64(key_ ^ fnv1a64(purpose));
    return c;
  }
  Prng fork(const std::string& purpose, uint64_t a) const {
    Prng c;
    c.key_ = splitmix64(splitmix64(key_ ^ fnv1a64(purpose)) + a);
    return c;
  }
  Prng fork(const std::string& purpose, uint64_t a, uint64_t b) const {
    return fork(purpose, a).fork("sub", b);
  }

  uint64_t next_u64() { return splitmix64(key_ + 0x9e3779b97f4a7c15ull * (++counter_)); }

  /// Uniform in [0, 1).
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  /// Uniform integer in [0, n).  n must be positive.
  long next_below(long n) { return long(next_u64() % uint64_t(n)); }

  /// Standard normal via Box-Muller (one value per call; cached pair unused to
  /// keep the stream strictly counter-based).
  double normal() {
    double u1 = next_double(), u2 = next_double();
    if (u1 <= 0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  /// Rademacher sign (+1 / -1 with equal probability).
  int sign() { return (next_u64() & 1) ? 1 : -1; }

  /// Fisher-Yates shuffle of indices [0, n).
  std::vector<int> permutation(long n) {
    std::vector<int> p(static_cast<size_t>(n));
    for (long i = 0; i < n; ++i) p[size_t(i)] = int(i);
    for (long i = n - 1; i > 0; --i) {
      long j = next_below(i + 1);
      std::swap(p[size_t(i)], p[size_t(j)]);
    }
    return p;
  }

  uint64_t key() const { return key_; }

 private:
  static uint64_t mix_(uint64_t seed, const std::string& purpose) {
    return splitmix64(splitmix64(seed) ^ fnv1a64(purpose));
  }
  uint64_t key_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace tlab
