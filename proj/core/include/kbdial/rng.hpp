#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace kbdial {

// Deterministic RNG threaded explicitly through every stochastic routine
// (parameter init, dropout, KB entity masking, shuffling, data synthesis).
// Distributions are built on the raw 64-bit stream rather than
// <random> distribution objects, so a given seed produces the same values
// on any standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(uniform() * static_cast<double>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (int64_t i = static_cast<int64_t>(v.size()) - 1; i > 0; --i) {
      int64_t j = uniform_int(i + 1);
      std::swap(v[i], v[j]);
    }
  }

  template <class T>
  const T& pick(const std::vector<T>& v) {
    return v[static_cast<size_t>(uniform_int(static_cast<int64_t>(v.size())))];
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace kbdial
