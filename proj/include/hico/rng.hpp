#pragma once

// Portable seeded randomness. Every random draw in the library goes through
// SplitMix64 so streams are identical across compilers and platforms
// (std:: distributions are implementation-defined and are never used).
//
// Test vectors (seed 0, first three outputs):
//   0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace hico {

class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t r = next();
    while (r >= limit) r = next();
    return r % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Subsystem seed = hash of (parent seed, subsystem name, index).
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
  SplitMix64 mix(seed ^ fnv1a(name));
  mix.next();
  SplitMix64 second(mix.next() ^ (index * 0xD1B54A32D192ED03ULL));
  return second.next();
}

template <typename It>
void shuffle(It first, It last, SplitMix64& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const std::uint64_t j = rng.below(i);
    using std::swap;
    swap(first[i - 1], first[j]);
  }
}

}  // namespace hico
