// SPDX-License-Identifier: Apache-2.0
//
// Counter-based random streams. A stream is identified by a key derived from
// (seed, ids...) and every draw is a pure function of (key, index), so any
// element of any stream can be regenerated without replaying the others.

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <string_view>

namespace dart {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Stable 64-bit hash of a name, for keying streams by string.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  }
  return h;
}

class NoiseStream {
 public:
  constexpr NoiseStream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids) : key_(mix64(seed)) {
    for (std::uint64_t id : ids) {
      key_ = mix64(key_ ^ mix64(id + 0x632BE59BD9B4E019ULL));
    }
  }

  constexpr std::uint64_t key() const { return key_; }

  std::uint64_t bits(std::uint64_t index) const { return mix64(key_ ^ mix64(index * 0xD1B54A32D192ED03ULL + 1)); }

  // Uniform on [0, 1).
  double uniform(std::uint64_t index) const { return static_cast<double>(bits(index) >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller on the pair (2i, 2i+1), cosine branch.
  double gaussian(std::uint64_t index) const {
    const double u1 = 1.0 - uniform(2 * index);  // (0, 1]
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t below(std::uint64_t index, std::uint64_t n) const {
    return static_cast<std::uint64_t>(uniform(index) * static_cast<double>(n));
  }

 private:
  std::uint64_t key_;
};

}  // namespace dart
