#pragma once

#include <cstdint>

#include "dclstm/tensor.hpp"

// Deterministic random source. The <random> distribution classes are
// implementation-defined, so the draw recipes here are spelled out at the bit
// level; a seed reproduces the same stream on any conforming stdlib.

namespace dclstm {

inline uint64_t splitmix64(uint64_t x) {
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return splitmix64(state_);
  }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi], inclusive, via rejection.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: empty range");
    const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<int64_t>(next_u64());  // full 64-bit range
    const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % range);
  }

  template <typename T>
  void fill_uniform(Tensor<T>& t, T lo, T hi) {
    for (int64_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<T>(uniform(static_cast<double>(lo), static_cast<double>(hi)));
  }

 private:
  uint64_t state_;
};

}  // namespace dclstm
