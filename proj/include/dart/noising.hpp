// SPDX-License-Identifier: Apache-2.0
//
// Independent forward corruption x_t = sqrt(gamma_t) x_0 + sqrt(1 - gamma_t) eps_t
// and the v-prediction targets built on top of it.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "dart/rng.hpp"
#include "dart/schedule.hpp"
#include "dart/tensor.hpp"

namespace dart {

class LevelError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

template <typename S>
struct Trajectory {
  Tensor<S> x0;                 // [K, C]
  std::vector<Tensor<S>> x;     // x[t-1], t = 1..T
  std::vector<Tensor<S>> eps;   // eps[t-1]

  int levels() const { return static_cast<int>(x.size()); }
  // Level 0 is the clean data.
  const Tensor<S>& level(int t) const { return t == 0 ? x0 : x.at(static_cast<std::size_t>(t - 1)); }
};

// Noise for (seed, sample, level) lives in its own stream; element i of the
// flattened [K, C] block is draw i of that stream.
inline NoiseStream level_stream(std::uint64_t seed, std::uint64_t sample_id, int t) {
  return NoiseStream(seed, {sample_id, static_cast<std::uint64_t>(t)});
}

template <typename S>
Tensor<S> gaussian_like(const Shape& shape, const NoiseStream& stream, std::uint64_t offset = 0) {
  Tensor<S> out(shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = static_cast<S>(stream.gaussian(offset + i));
  }
  return out;
}

// sqrt(gamma) x0 + sqrt(1 - gamma) eps; gamma == 1 returns x0 unchanged.
template <typename S>
Tensor<S> noise_to_level(const Tensor<S>& x0, double gamma, const Tensor<S>& eps);

template <typename S>
Trajectory<S> corrupt(const Tensor<S>& x0, const GammaSchedule& g, std::uint64_t seed, std::uint64_t sample_id = 0);

template <typename S>
struct VTarget {
  S alpha{};  // sqrt(gamma_t)
  S sigma{};  // sqrt(1 - gamma_t)
  Tensor<S> v;
};

// v_t = (alpha_t x_t - x_0) / sigma_t. Throws LevelError when gamma_t == 1.
template <typename S>
VTarget<S> v_target(const Trajectory<S>& traj, const GammaSchedule& g, int t);

// alpha x_t - sigma v
template <typename S>
Tensor<S> reconstruct_x0(const Tensor<S>& x_t, const Tensor<S>& v, S alpha, S sigma);

}  // namespace dart
