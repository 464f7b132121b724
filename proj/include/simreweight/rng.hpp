#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace simreweight::rng {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t mix(uint64_t a, uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

inline double to_unit(uint64_t x) {
  // 53-bit mantissa in [0, 1)
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Stateless counter-based stream: every draw is a pure function of
// (seed, stream, counter), so generation order never matters.
class Counter {
 public:
  explicit Counter(uint64_t seed) : seed_(splitmix64(seed ^ 0x5bd1e995u)) {}

  double uniform(uint64_t stream, uint64_t counter) const {
    return to_unit(raw(stream, counter));
  }

  double uniform(uint64_t stream, uint64_t counter, double lo, double hi) const {
    return lo + (hi - lo) * uniform(stream, counter);
  }

  // Inclusive integer range.
  int64_t uniform_int(uint64_t stream, uint64_t counter, int64_t lo, int64_t hi) const {
    if (hi <= lo) return lo;
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(raw(stream, counter) % span);
  }

  double normal(uint64_t stream, uint64_t counter, double mean = 0.0, double sd = 1.0) const {
    // Box-Muller on two counter draws; clamp avoids log(0).
    double u1 = uniform(stream, 2 * counter);
    double u2 = uniform(stream, 2 * counter + 1);
    if (u1 < 1e-300) u1 = 1e-300;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    return mean + sd * z;
  }

  // Knuth's product method; fine for the small rates used here.
  int poisson(uint64_t stream, double lambda) const {
    if (lambda <= 0.0) return 0;
    const double limit = std::exp(-lambda);
    double p = 1.0;
    int k = 0;
    uint64_t c = 0;
    do {
      p *= uniform(stream, c++);
      ++k;
    } while (p > limit && k < 10000);
    return k - 1;
  }

  uint64_t raw(uint64_t stream, uint64_t counter) const {
    return splitmix64(seed_ ^ splitmix64(stream ^ splitmix64(counter)));
  }

 private:
  uint64_t seed_;
};

// Sequential stream with explicit draw algorithms so results do not depend
// on the standard library's distribution implementations.
class Sequence {
 public:
  explicit Sequence(uint64_t seed) : state_(splitmix64(seed ^ 0x2545f4914f6cdd1dULL)) {}

  uint64_t next_raw() {
    state_ = splitmix64(state_);
    return state_;
  }

  double uniform() { return to_unit(next_raw()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal(double mean = 0.0, double sd = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    return mean + sd * z;
  }

  // Uniform index in [0, n).
  size_t index(size_t n) { return n == 0 ? 0 : static_cast<size_t>(next_raw() % n); }

  // Fisher-Yates; explicit so shuffles are reproducible everywhere.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

}  // namespace simreweight::rng
