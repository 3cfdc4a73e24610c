#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace protogate {

// Deterministic seeded randomness. Engines are std::mt19937_64 (fully
// specified by the standard); the sampling on top is in-repo because the
// stdlib distribution algorithms are implementation-defined and streams
// here must reproduce bit-for-bit.

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derives a child seed from a root seed, a stream label, and integer path
// components (repeat, fold, config index, ...). Order-sensitive.
inline uint64_t derive_seed(uint64_t root, std::string_view label,
                            std::initializer_list<uint64_t> path = {}) {
  uint64_t s = root ^ 0x6a09e667f3bcc909ULL;
  splitmix64(s);
  s ^= fnv1a64(label);
  splitmix64(s);
  for (uint64_t p : path) {
    s ^= p + 0x9e3779b97f4a7c15ULL;
    splitmix64(s);
  }
  uint64_t probe = s;
  return splitmix64(probe);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0, 1).
  double next_uniform() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  uint64_t next_index(uint64_t n) {
    const uint64_t bound = n == 0 ? 0 : (~uint64_t{0}) - (~uint64_t{0}) % n;
    uint64_t x;
    do {
      x = gen_();
    } while (x >= bound);
    return x % n;
  }

  // Standard normal via Box-Muller; one spare value cached.
  double next_gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = next_uniform();  // need u1 in (0, 1]
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(next_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace protogate
