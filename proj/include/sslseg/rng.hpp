#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace sslseg {

// SplitMix64 step; used both as a seed expander and to combine stream ids
// into independent seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Derives a stream seed from a base seed and up to three stream coordinates.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a = 0,
                              std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t s = base;
  std::uint64_t out = splitmix64(s);
  s ^= a * 0x9E3779B97F4A7C15ull + 0x632BE59BD9B4E019ull;
  out ^= splitmix64(s);
  s ^= b * 0xC2B2AE3D27D4EB4Full + 0x9E3779B97F4A7C15ull;
  out ^= splitmix64(s);
  s ^= c * 0x165667B19E3779F9ull + 0x27D4EB2F165667C5ull;
  out ^= splitmix64(s);
  return out;
}

// Deterministic RNG. The mt19937_64 core is fully specified by the standard;
// uniform/normal are derived here explicitly (std distributions are
// implementation-defined and would break cross-platform reproducibility).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(expand(seed)) {}

  std::uint64_t u64() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n) via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = u64();
    while (x >= limit) x = u64();
    return x % n;
  }

  // Standard normal via Box-Muller; the paired value is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::mt19937_64 expand(std::uint64_t seed) {
    std::uint64_t s = seed;
    return std::mt19937_64(splitmix64(s));
  }

  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace sslseg
