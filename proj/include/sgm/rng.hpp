#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace sgm {

using Rng = std::mt19937_64;

// splitmix64 finalizer; used to derive independent child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index) {
  return mix_seed(mix_seed(parent) ^ (index * 0xd1b54a32d192ed03ULL + 1));
}

/// Uniform in [0, 1) from exactly one engine draw.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n) from exactly one engine draw.
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) { return rng() % n; }

/// Standard normal via Box-Muller; always consumes exactly two engine draws.
inline double standard_normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace sgm
