#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "setflow/common.hpp"

namespace setflow {

namespace detail {
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t s = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  return splitmix64(s);
}
}  // namespace detail

// Deterministic counter-free generator. All sampling routines are hand-rolled
// on top of splitmix64 so outputs do not depend on the standard library's
// distribution implementations. Substreams derived via fork() are independent
// of how much the parent has been consumed.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), state_(detail::mix(seed, 0x5EEDF00DULL)) {}

  uint64_t next_u64() { return detail::splitmix64(state_); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller with a cached spare.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586477 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Knuth's product-of-uniforms method, split for large rates so the
  // e^{-lambda} threshold stays representable.
  long poisson(double lambda) {
    require(lambda >= 0.0, "poisson: rate must be >= 0");
    if (lambda == 0.0) return 0;
    if (lambda > 500.0) return poisson(lambda / 2) + poisson(lambda / 2);
    const double limit = std::exp(-lambda);
    long k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  double rademacher() { return (next_u64() >> 63) ? 1.0 : -1.0; }

  // Uniform integer in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    require(n > 0, "below: n must be > 0");
    const uint64_t threshold = (~uint64_t{0} - n + 1) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct indices from [0, n), order arbitrary but deterministic.
  std::vector<size_t> sample_without_replacement(size_t n, size_t k) {
    require(k <= n, "sample_without_replacement: k > n");
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    for (size_t i = 0; i < k; ++i) {
      size_t j = i + static_cast<size_t>(below(n - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  // Independent substream; (seed, tag) fully determines it.
  Rng fork(uint64_t tag) const { return Rng(detail::mix(seed_, tag + 1)); }
  Rng fork(uint64_t tag, uint64_t tag2) const {
    return Rng(detail::mix(detail::mix(seed_, tag + 1), tag2 + 1));
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace setflow
