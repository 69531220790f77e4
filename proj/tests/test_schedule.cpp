// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dart/rng.hpp"
#include "dart/schedule.hpp"

using namespace dart;

TEST(CosineMarkov, FourLevels) {
  const auto m = cosine_markov(4);
  const std::vector<double> expect{0.92388, 0.70711, 0.38268, 0.0};
  for (int t = 0; t < 4; ++t) {
    EXPECT_NEAR(m.alpha_bar[t], expect[t], 1e-5);
  }
  EXPECT_EQ(m.alpha_bar[3], 0.0);
}

TEST(CosineMarkov, Endpoints) {
  EXPECT_EQ(cosine_markov(1).alpha_bar, std::vector<double>{0.0});
  const auto m2 = cosine_markov(2);
  EXPECT_NEAR(m2.alpha_bar[0], std::sqrt(0.5), 1e-12);
  EXPECT_EQ(m2.alpha_bar[1], 0.0);
  EXPECT_THROW(cosine_markov(0), std::invalid_argument);
}

TEST(MarkovToGamma, FourLevelCosine) {
  const auto m = cosine_markov(4);
  const auto g = markov_to_gamma(m);
  // Independent closed form: eta_bar from the Markov SNR, differences, then gamma.
  std::vector<double> eb(5, 0.0);
  for (int t = 1; t <= 4; ++t) {
    const double a = std::cos(std::numbers::pi / 2 * t / 4.0);
    eb[t - 1] = t == 4 ? 0.0 : a / (1 - a);
  }
  for (int t = 0; t < 4; ++t) {
    const double eta = eb[t] - eb[t + 1];
    EXPECT_NEAR(g.gamma[t], eta / (1 + eta), 1e-12);
  }
  EXPECT_NEAR(g.gamma[0], 0.90674, 1e-5);
  EXPECT_NEAR(g.gamma[1], 0.64212, 1e-5);
  EXPECT_NEAR(g.gamma[2], 0.38268, 1e-5);
  EXPECT_EQ(g.gamma[3], 0.0);
  EXPECT_NEAR(g.gamma[2], m.alpha_bar[2], 1e-15);
  EXPECT_EQ(g.gamma_at(0), 1.0);
}

TEST(MarkovToGamma, RoundTripOnRandomSchedules) {
  for (std::uint64_t trial = 0; trial < 200; ++trial) {
    NoiseStream s(trial, {});
    const int T = 1 + static_cast<int>(s.below(0, 20));
    std::vector<double> u(T);
    double acc = 0;
    for (int i = 0; i < T; ++i) {
      acc += 0.05 + s.uniform(i + 1);
      u[i] = acc;
    }
    MarkovSchedule m{T, {}};
    for (int i = 0; i < T; ++i) {
      m.alpha_bar.push_back(std::exp(-u[i]));
    }
    if (s.uniform(99) < 0.5) {
      m.alpha_bar.back() = 0.0;
    }
    const auto g = markov_to_gamma(m);
    for (int t = 1; t <= T; ++t) {
      double tot = 0;
      for (int k = t; k <= T; ++k) {
        tot += g.gamma_at(k) / (1 - g.gamma_at(k));
      }
      const double snr = m.alpha_bar_at(t) / (1 - m.alpha_bar_at(t));
      EXPECT_LT(std::abs(tot - snr), 1e-9 * std::max(1.0, snr));
    }
    const auto back = gamma_to_markov(g);
    for (int t = 0; t < T; ++t) {
      EXPECT_NEAR(back.alpha_bar[t], m.alpha_bar[t], 1e-12);
    }
    for (int t = 1; t < T; ++t) {
      EXPECT_GE(g.omega[t - 1], g.omega[t]);
    }
    if (m.alpha_bar.back() == 0.0) {
      EXPECT_EQ(g.gamma.back(), 0.0);
    }
  }
}

TEST(MarkovToGamma, NonMonotoneScheduleThrows) {
  MarkovSchedule m{3, {0.9, 0.95, 0.1}};
  EXPECT_THROW(markov_to_gamma(m), InvalidScheduleError);
  MarkovSchedule one{1, {1.0}};
  EXPECT_THROW(markov_to_gamma(one), InvalidScheduleError);
}

TEST(SnrWeights, Examples) {
  const auto g = markov_to_gamma(cosine_markov(4));
  const auto w = snr_weights(g);
  const double a1 = std::cos(std::numbers::pi / 8);
  EXPECT_NEAR(w[0], a1 / (1 - a1), 1e-9);
  EXPECT_NEAR(w[0], 12.137, 1e-3);
  EXPECT_EQ(w[3], 0.0);
  const auto u = GammaSchedule::from_gamma({0.5, 0.5, 0.5});
  EXPECT_EQ(snr_weights(u), (std::vector<double>{3, 2, 1}));
}

TEST(SnrWeights, PlusOneSwitch) {
  const auto g = GammaSchedule::from_gamma({0.5, 0.5, 0.5}, LossWeighting::snr_plus_one);
  EXPECT_EQ(g.omega, (std::vector<double>{4, 3, 2}));
  EXPECT_EQ(parse_weighting("snr+1"), LossWeighting::snr_plus_one);
  EXPECT_THROW(parse_weighting("elbo"), std::invalid_argument);
}

TEST(YProcess, RhoValues) {
  const auto g = markov_to_gamma(cosine_markov(4));
  const auto c = y_process_build(g);
  EXPECT_EQ(c.top, 3);
  const double eb = g.eta_bar[2];
  EXPECT_NEAR(eb, 0.61991, 1e-5);
  EXPECT_NEAR(c.rho_at(3), 1 / std::sqrt(eb * eb + eb), 1e-12);
  EXPECT_NEAR(c.rho_at(3), 0.99791, 1e-5);
  const auto one = y_process_build(GammaSchedule::from_gamma({0.5}));
  EXPECT_NEAR(one.rho_at(1), 1 / std::sqrt(2.0), 1e-15);
  for (double v : c.transition_var) {
    EXPECT_GT(v, 0.0);
  }
}

TEST(YProcess, InteriorZeroSnrThrows) {
  EXPECT_THROW(y_process_build(GammaSchedule::from_gamma({0.5, 0.0, 0.5})), DegenerateLevelError);
}

TEST(YProcess, MonteCarloChecks) {
  for (int T : {4, 16}) {
    const auto cert = y_process_build(markov_to_gamma(cosine_markov(T)));
    const auto rep = y_markov_check(cert, 200000, 7);
    ASSERT_EQ(static_cast<int>(rep.levels.size()), cert.top);
    for (const auto& l : rep.levels) {
      EXPECT_LT(l.recovery_max_error, 1e-9) << "t=" << l.t;
      EXPECT_LT(std::abs(l.var_y - 1.0), 3 * l.var_y_se + 1e-12) << "t=" << l.t;
      EXPECT_LT(std::abs(l.snr_estimate - l.snr_expected), 3 * l.snr_se) << "t=" << l.t;
      if (l.t < cert.top) {
        EXPECT_LT(l.var_gap_in_se, 3.0) << "t=" << l.t;
        EXPECT_LT(l.mean_gap_in_se, 3.0) << "t=" << l.t;
      }
    }
  }
}

TEST(YProcess, SnrMaximality) {
  const auto g = markov_to_gamma(cosine_markov(8));
  for (int t = 1; t <= 7; ++t) {
    std::vector<double> opt;
    for (int s = t; s <= 8; ++s) {
      opt.push_back(std::sqrt(g.gamma_at(s)) / (1 - g.gamma_at(s)));
    }
    EXPECT_NEAR(combination_snr(g, t, opt), g.eta_bar_at(t), 1e-9 * g.eta_bar_at(t));
    NoiseStream s(3, {static_cast<std::uint64_t>(t)});
    for (int k = 0; k < 1000; ++k) {
      std::vector<double> alt(opt.size());
      for (std::size_t i = 0; i < alt.size(); ++i) {
        alt[i] = s.gaussian(k * 64 + i);
      }
      EXPECT_LE(combination_snr(g, t, alt), g.eta_bar_at(t) + 1e-9);
    }
  }
}

TEST(ScheduleTable, FieldNames) {
  const auto m = cosine_markov(4);
  const auto j = schedule_table(m, markov_to_gamma(m));
  ASSERT_EQ(j.size(), 4u);
  for (const char* k : {"t", "alpha_bar", "gamma", "eta", "eta_bar", "omega", "rho"}) {
    EXPECT_TRUE(j[0].contains(k)) << k;
  }
  EXPECT_TRUE(j[3]["rho"].is_null());
}
