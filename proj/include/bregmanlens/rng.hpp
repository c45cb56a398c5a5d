#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace blns {

// 64-bit FNV-1a. Used for seed derivation, batch fingerprints, checkpoint and
// manifest checksums.
inline uint64_t fnv1a64_bytes(const void* data, size_t n,
                              uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  return fnv1a64_bytes(s.data(), s.size(), h);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG. The engine is std::mt19937_64 (output sequence fixed by
// the standard); distributions are hand-rolled because stdlib distribution
// algorithms are implementation-defined and would break the bit-exactness
// guarantees on checkpoints and CSV outputs.
class Rng {
 public:
  explicit Rng(uint64_t seed) : base_seed_(seed), engine_(splitmix64(seed)) {}

  uint64_t base_seed() const { return base_seed_; }

  // Independent stream for a named sub-task of this seed.
  Rng fork(std::string_view tag) const {
    return Rng(splitmix64(base_seed_ ^ fnv1a64(tag)));
  }

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform01() { return double(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). Rejection sampling keeps the draw unbiased.
  uint64_t uniform_below(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via Box-Muller, spare value cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  uint64_t base_seed_;
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace blns
