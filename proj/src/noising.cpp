// SPDX-License-Identifier: Apache-2.0

#include "dart/noising.hpp"

#include <cmath>
#include <string>

namespace dart {

template <typename S>
Tensor<S> noise_to_level(const Tensor<S>& x0, double gamma, const Tensor<S>& eps) {
  if (x0.shape != eps.shape) {
    throw DimensionError("noise_to_level: shape mismatch");
  }
  if (gamma == 1.0) {
    return x0;
  }
  const S a = static_cast<S>(std::sqrt(gamma));
  const S s = static_cast<S>(std::sqrt(1.0 - gamma));
  Tensor<S> out(x0.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = a * x0.data[i] + s * eps.data[i];
  }
  return out;
}

template <typename S>
Trajectory<S> corrupt(const Tensor<S>& x0, const GammaSchedule& g, std::uint64_t seed, std::uint64_t sample_id) {
  if (x0.rank() != 2) {
    throw DimensionError("corrupt: x0 must be [K, C], got " + shape_string(x0.shape));
  }
  Trajectory<S> traj;
  traj.x0 = x0;
  for (int t = 1; t <= g.T; ++t) {
    Tensor<S> eps = gaussian_like<S>(x0.shape, level_stream(seed, sample_id, t));
    traj.x.push_back(noise_to_level(x0, g.gamma_at(t), eps));
    traj.eps.push_back(std::move(eps));
  }
  return traj;
}

template <typename S>
VTarget<S> v_target(const Trajectory<S>& traj, const GammaSchedule& g, int t) {
  const double gamma = g.gamma_at(t);
  if (gamma >= 1.0) {
    throw LevelError("v_target: sigma is zero at level t=" + std::to_string(t));
  }
  VTarget<S> out;
  out.alpha = static_cast<S>(std::sqrt(gamma));
  out.sigma = static_cast<S>(std::sqrt(1.0 - gamma));
  const Tensor<S>& xt = traj.level(t);
  out.v = Tensor<S>(xt.shape);
  for (std::size_t i = 0; i < xt.data.size(); ++i) {
    out.v.data[i] = (out.alpha * xt.data[i] - traj.x0.data[i]) / out.sigma;
  }
  return out;
}

template <typename S>
Tensor<S> reconstruct_x0(const Tensor<S>& x_t, const Tensor<S>& v, S alpha, S sigma) {
  if (x_t.shape != v.shape) {
    throw DimensionError("reconstruct_x0: shape mismatch");
  }
  Tensor<S> out(x_t.shape);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = alpha * x_t.data[i] - sigma * v.data[i];
  }
  return out;
}

#define DART_NOISING(S)                                                                          \
  template Tensor<S> noise_to_level(const Tensor<S>&, double, const Tensor<S>&);                 \
  template Trajectory<S> corrupt(const Tensor<S>&, const GammaSchedule&, std::uint64_t, std::uint64_t); \
  template VTarget<S> v_target(const Trajectory<S>&, const GammaSchedule&, int);                 \
  template Tensor<S> reconstruct_x0(const Tensor<S>&, const Tensor<S>&, S, S);

DART_NOISING(float)
DART_NOISING(double)

}  // namespace dart
