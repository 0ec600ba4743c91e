#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace udanas {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Named substream of a root seed: derive_seed(seed, "gumbel", iteration).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                                 std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : stream) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(root ^ h) + index);
}

inline Rng make_rng(std::uint64_t root, std::string_view stream, std::uint64_t index = 0) {
  return Rng(derive_seed(root, stream, index));
}

/// Uniform in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform in (0, 1); never returns an endpoint.
inline double uniform_open01(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Integer uniform in [0, n).
inline int uniform_index(Rng& rng, int n) {
  return static_cast<int>(uniform01(rng) * static_cast<double>(n));
}

/// Standard Gumbel(0, 1) draw.
inline double gumbel(Rng& rng) { return -std::log(-std::log(uniform_open01(rng))); }

inline double standard_normal(Rng& rng) {
  // Box-Muller; one value per call keeps the stream layout simple.
  const double u1 = uniform_open01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

}  // namespace udanas
