// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>

namespace changedet {

// Deterministic splittable generator (splitmix64 core). All randomness in the
// toolkit flows through this so results are bit-reproducible across platforms,
// unlike std:: distributions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // standard normal via Box-Muller (consumes two draws per pair, caches one)
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // independent stream derived from this seed and a tag; advancing the child
  // does not disturb the parent
  Rng fork(uint64_t tag) const {
    Rng child(state_ ^ (0x9e3779b97f4a7c15ull * (tag + 0x632be59bd9b4e019ull)));
    child.next_u64();
    return child;
  }

 private:
  uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace changedet
