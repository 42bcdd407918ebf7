#pragma once
// Seeded random streams. Distributions are hand-rolled (Box-Muller, 53-bit
// uniforms, rejection-sampled integers) so results are identical across
// standard libraries; only the mt19937_64 engine itself comes from <random>,
// and its output sequence is fixed by the standard.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace dosegen {

// splitmix64 finalizer; good avalanche for seed derivation.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Fold an ordered list of tags into one stream seed.
inline uint64_t derive_seed(uint64_t seed) { return mix64(seed); }
template <class... Rest>
uint64_t derive_seed(uint64_t seed, uint64_t tag, Rest... rest) {
  return derive_seed(mix64(seed) ^ tag, rest...);
}

inline uint64_t hash_str(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a, then mixed
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
  return mix64(h);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t bits() { return eng_(); }

  // [0, 1), 53-bit resolution
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive bounds, unbiased via rejection
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
    if (range == 0) return static_cast<int64_t>(eng_());  // full 64-bit span
    uint64_t reject_below = (0 - range) % range;          // 2^64 mod range
    uint64_t x;
    do { x = eng_(); } while (x < reject_below);
    return lo + static_cast<int64_t>(x % range);
  }

  bool coin(double p = 0.5) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do { u1 = uniform(); } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void fill_normal(T* dst, size_t n) {
    for (size_t i = 0; i < n; i++) dst[i] = static_cast<T>(normal());
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dosegen
