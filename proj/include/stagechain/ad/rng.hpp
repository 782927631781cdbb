#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace stagechain::ad {

// Seeded generator used everywhere randomness is needed.
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. Conversions to doubles are done here rather than through
// <random> distributions (whose algorithms are implementation-defined):
//   uniform()  = (next_u64() >> 11) * 2^-53
//   normal()   = Box-Muller on two uniforms, second value cached
//   below(n)   = rejection sampling on next_u64() against the largest
//                multiple of n
// so a given seed yields the same stream on every conforming platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t below(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent child seed, e.g. one per adapter, from a parent seed.
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t salt);

}  // namespace stagechain::ad
