// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace sentinel {

// Deterministic xoshiro256** stream seeded through splitmix64. All sampling
// helpers are implemented by hand so the same seed yields the same sequence
// on every platform and standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& w : s_) w = splitmix(x);
    have_gauss_ = false;
  }

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() {
    const uint64_t result = rotl(s_[1] * 5, 7) * 9;
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0; rejection keeps it unbiased.
  uint64_t below(uint64_t n) {
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      const uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Standard normal via Box-Muller, second value cached.
  double gaussian() {
    if (have_gauss_) {
      have_gauss_ = false;
      return cached_gauss_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_gauss_ = r * std::sin(a);
    have_gauss_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Independent child stream; (seed, stream) pairs never collide in practice.
  Rng fork(uint64_t stream) const {
    uint64_t x = seed_;
    uint64_t a = splitmix(x);
    uint64_t y = stream + 0x9e3779b97f4a7c15ULL;
    uint64_t b = splitmix(y);
    return Rng(a ^ rotl(b, 23));
  }

  // Fisher-Yates shuffle of [0, n) index vector.
  std::vector<size_t> permutation(size_t n) {
    std::vector<size_t> p(n);
    for (size_t i = 0; i < n; ++i) p[i] = i;
    for (size_t i = n; i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

  // k distinct indices from [0, n), in selection order.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    std::vector<size_t> p = permutation(n);
    p.resize(k < n ? k : n);
    return p;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static uint64_t splitmix(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  uint64_t seed_;
  uint64_t s_[4];
  bool have_gauss_;
  double cached_gauss_ = 0.0;
};

}  // namespace sentinel
