#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "sadi/errors.hpp"

namespace sadi {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Deterministic RNG. std::mt19937_64 has a specified sequence; all
// distribution conversions are implemented here so that draws are identical
// across standard libraries (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

  uint64_t seed() const { return seed_; }

  uint64_t next_u64() { return gen_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller. The first uniform is shifted into (0,1]
  // so log never sees zero.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = double((next_u64() >> 11) + 1) * 0x1.0p-53;
    const double u2 = double(next_u64() >> 11) * 0x1.0p-53;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  // Uniform integer on [lo, hi], both inclusive. Rejection sampling keeps the
  // distribution exact.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw ArgError("uniform_int: empty range");
    const uint64_t n = uint64_t(hi - lo) + 1;
    if (n == 0) return int64_t(next_u64());  // full 64-bit range
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + int64_t(x % n);
  }

  // Fisher-Yates; std::shuffle is implementation-defined, this is not.
  template <typename T>
  void shuffle(std::vector<T>& a) {
    for (size_t i = a.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(0, int64_t(i) - 1));
      std::swap(a[i - 1], a[j]);
    }
  }

  // Independent child stream. Children with distinct ids never share state
  // with the parent or each other.
  Rng fork(uint64_t stream) const { return Rng(splitmix64(seed_ ^ splitmix64(stream + 0x51ED2701ull))); }

 private:
  uint64_t seed_;
  std::mt19937_64 gen_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sadi
