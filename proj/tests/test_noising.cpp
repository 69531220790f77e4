// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dart/noising.hpp"

using namespace dart;

TEST(Corrupt, BoundaryLevels) {
  const auto x0 = gaussian_like<double>({3, 2}, NoiseStream(1, {}));
  const auto eps = gaussian_like<double>({3, 2}, NoiseStream(2, {}));
  EXPECT_EQ(noise_to_level(x0, 1.0, eps).data, x0.data);
  const auto g = GammaSchedule::from_gamma({0.7, 0.0});
  const auto tr = corrupt(x0, g, 5);
  EXPECT_EQ(tr.level(0).data, x0.data);
  EXPECT_EQ(tr.x[1].data, tr.eps[1].data);
}

TEST(Corrupt, StoredNoiseReproducesLevels) {
  const auto g = markov_to_gamma(cosine_markov(6));
  const auto x0 = gaussian_like<float>({4, 3}, NoiseStream(1, {}));
  const auto tr = corrupt(x0, g, 9, 3);
  for (int t = 1; t <= g.T; ++t) {
    const float a = static_cast<float>(std::sqrt(g.gamma_at(t)));
    const float s = static_cast<float>(std::sqrt(1 - g.gamma_at(t)));
    for (std::size_t i = 0; i < x0.data.size(); ++i) {
      EXPECT_EQ(tr.level(t).data[i], a * x0.data[i] + s * tr.eps[t - 1].data[i]);
    }
  }
  EXPECT_EQ(corrupt(x0, g, 9, 3).x[2].data, tr.x[2].data);
  EXPECT_NE(corrupt(x0, g, 10, 3).x[2].data, tr.x[2].data);
}

TEST(Corrupt, MarginalMomentsAndIndependence) {
  const auto g = markov_to_gamma(cosine_markov(4));
  const std::int64_t N = 100000;
  Tensor<double> x0({N, 1});
  for (std::int64_t i = 0; i < N; ++i) {
    x0.data[i] = NoiseStream(77, {}).gaussian(i);
  }
  const auto tr = corrupt(x0, g, 3);
  std::vector<std::vector<double>> r(g.T, std::vector<double>(N));
  for (int t = 1; t <= g.T; ++t) {
    const double a = std::sqrt(g.gamma_at(t));
    double m = 0, v = 0;
    for (std::int64_t i = 0; i < N; ++i) {
      r[t - 1][i] = tr.level(t).data[i] - a * x0.data[i];
      m += r[t - 1][i];
      v += r[t - 1][i] * r[t - 1][i];
    }
    m /= N;
    v = v / N - m * m;
    const double var = 1 - g.gamma_at(t);
    EXPECT_LT(std::abs(m), 3 * std::sqrt(var / N) + 1e-12);
    EXPECT_LT(std::abs(v - var), 3 * var * std::sqrt(2.0 / N) + 1e-12);
  }
  for (int t = 0; t < g.T; ++t) {
    for (int s = t + 1; s < g.T; ++s) {
      double c = 0, vt = 0, vs = 0;
      for (std::int64_t i = 0; i < N; ++i) {
        c += r[t][i] * r[s][i];
        vt += r[t][i] * r[t][i];
        vs += r[s][i] * r[s][i];
      }
      const double corr = c / std::sqrt(vt * vs);
      EXPECT_LT(std::abs(corr), 3 / std::sqrt(static_cast<double>(N)));
    }
  }
}

TEST(VTarget, ReconstructionIsExact) {
  const auto g = markov_to_gamma(cosine_markov(8));
  const auto x0 = gaussian_like<float>({16, 4}, NoiseStream(1, {}));
  const auto tr = corrupt(x0, g, 2);
  for (int t = 1; t <= g.T; ++t) {
    const auto v = v_target(tr, g, t);
    const auto rec = reconstruct_x0(tr.level(t), v.v, v.alpha, v.sigma);
    for (std::size_t i = 0; i < rec.data.size(); ++i) {
      EXPECT_NEAR(rec.data[i], x0.data[i], 1e-6);
    }
  }
}

TEST(VTarget, PureNoiseLevel) {
  const auto g = GammaSchedule::from_gamma({0.0});
  const auto x0 = gaussian_like<double>({2, 2}, NoiseStream(1, {}));
  const auto v = v_target(corrupt(x0, g, 1), g, 1);
  EXPECT_EQ(v.alpha, 0.0);
  EXPECT_EQ(v.sigma, 1.0);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(v.v.data[i], -x0.data[i]);
  }
}

TEST(VTarget, EquivalentNoiseForm) {
  const auto g = GammaSchedule::from_gamma({0.5});
  const auto x0 = gaussian_like<double>({8, 3}, NoiseStream(4, {}));
  const auto tr = corrupt(x0, g, 1);
  const auto v = v_target(tr, g, 1);
  for (std::size_t i = 0; i < x0.data.size(); ++i) {
    EXPECT_NEAR(v.v.data[i], std::sqrt(0.5) * tr.eps[0].data[i] - std::sqrt(0.5) * x0.data[i], 1e-6);
  }
}

TEST(VTarget, CleanLevelThrows) {
  const auto g = GammaSchedule::from_gamma({0.5});
  const auto tr = corrupt(gaussian_like<double>({1, 1}, NoiseStream(1, {})), g, 1);
  EXPECT_THROW(v_target(tr, g, 0), LevelError);
}
