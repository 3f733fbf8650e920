#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace lvsnet {

// Seed-addressable RNG. Every stochastic step in the project (weight init,
// dropout masks, augmentation subsampling, shuffles) draws from one of these
// so runs are reproducible from a single config seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Distinct stream for a named purpose, decorrelated from the base seed.
  static Rng stream(std::uint64_t seed, std::uint64_t salt) {
    return Rng(seed * 0x9e3779b97f4a7c15ULL + salt);
  }

  std::mt19937_64& engine() { return engine_; }

  double uniform(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    return d(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    std::uniform_int_distribution<int> d(lo, hi);
    return d(engine_);
  }

  template <class It>
  void shuffle(It first, It last) {
    std::shuffle(first, last, engine_);
  }

  // k distinct indices from [0, n), ascending. Used for pool subsampling.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    shuffle(idx.begin(), idx.end());
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace lvsnet
