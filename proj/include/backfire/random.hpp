#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

namespace backfire {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a over a purpose tag, so independent streams drawn from the same base
// seed never share state.
inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(base ^ tag_hash(purpose)) + index);
}

inline double uniform01(Rng& rng) {
  return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  auto idx = iota_indices(n);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

// Beta(a, b) via the ratio of two gamma variates.
inline double sample_beta(Rng& rng, double a, double b) {
  const double x = std::gamma_distribution<double>(a, 1.0)(rng);
  const double y = std::gamma_distribution<double>(b, 1.0)(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

// Counts derived from fractions absorb binary representation error
// (0.2 * 10 is 2.0000000000000004) before rounding.
inline constexpr double kCountSlack = 1e-9;

// Round half up: the rounding rule for every count taken from a fraction.
inline std::size_t round_half_up(double v) {
  return static_cast<std::size_t>(std::floor(v + 0.5 + kCountSlack));
}

inline std::size_t ceil_count(double v) {
  return static_cast<std::size_t>(std::ceil(v - kCountSlack));
}

}  // namespace backfire
