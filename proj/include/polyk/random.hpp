#pragma once

// Reproducible random streams.
//
// A run has one 64-bit master seed. The stream for sample `s` under label `L`
// is an mt19937_64 seeded with
//     mix(mix(seed) ^ fnv1a(L) + (s + 1) * 0x9E3779B97F4A7C15)
// where `mix` is the SplitMix64 finalizer. Streams for different samples are
// independent of evaluation order, so parallel and sequential runs draw the
// same per-sample values.

#include <cstdint>
#include <random>
#include <string_view>

namespace polyk {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64_mix(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline Rng substream(std::uint64_t seed, std::string_view label, std::uint64_t index) {
  const std::uint64_t base = splitmix64_mix(seed) ^ fnv1a(label);
  return Rng(splitmix64_mix(base + (index + 1) * 0x9E3779B97F4A7C15ULL));
}

inline double standard_normal(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  return n(rng);
}

inline double uniform01(Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return u(rng);
}

}  // namespace polyk
