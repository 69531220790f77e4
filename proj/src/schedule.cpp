// SPDX-License-Identifier: Apache-2.0

#include "dart/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dart/rng.hpp"

namespace dart {

LossWeighting parse_weighting(const std::string& name) {
  if (name == "snr") {
    return LossWeighting::snr;
  }
  if (name == "snr+1" || name == "snr_plus_one") {
    return LossWeighting::snr_plus_one;
  }
  throw std::invalid_argument("unknown loss weighting '" + name + "'");
}

std::string to_string(LossWeighting w) { return w == LossWeighting::snr ? "snr" : "snr+1"; }

double MarkovSchedule::alpha_bar_at(int t) const {
  if (t == 0) {
    return 1.0;
  }
  return alpha_bar.at(static_cast<std::size_t>(t - 1));
}

double MarkovSchedule::snr_at(int t) const {
  const double a = alpha_bar_at(t);
  return a / (1.0 - a);
}

void MarkovSchedule::validate() const {
  if (T < 1 || static_cast<int>(alpha_bar.size()) != T) {
    throw InvalidScheduleError("markov schedule: expected " + std::to_string(T) + " levels");
  }
  if (!(alpha_bar.front() < 1.0)) {
    throw InvalidScheduleError("markov schedule: alpha_bar_1 must be < 1");
  }
  if (alpha_bar.back() < 0.0) {
    throw InvalidScheduleError("markov schedule: alpha_bar_T must be >= 0");
  }
  for (int t = 1; t < T; ++t) {
    if (!(alpha_bar[static_cast<std::size_t>(t)] < alpha_bar[static_cast<std::size_t>(t - 1)])) {
      throw InvalidScheduleError("markov schedule: alpha_bar not strictly decreasing at t=" + std::to_string(t + 1));
    }
  }
}

MarkovSchedule cosine_markov(int T) {
  if (T < 1) {
    throw std::invalid_argument("cosine schedule needs T >= 1");
  }
  MarkovSchedule m;
  m.T = T;
  m.alpha_bar.resize(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    m.alpha_bar[static_cast<std::size_t>(t - 1)] = std::cos(std::numbers::pi / 2.0 * t / T);
  }
  // cos(pi/2) is 6e-17 in floating point; the terminal level is pure noise.
  m.alpha_bar.back() = 0.0;
  return m;
}

double GammaSchedule::gamma_at(int t) const { return t == 0 ? 1.0 : gamma.at(static_cast<std::size_t>(t - 1)); }
double GammaSchedule::eta_at(int t) const { return eta.at(static_cast<std::size_t>(t - 1)); }
double GammaSchedule::eta_bar_at(int t) const { return eta_bar.at(static_cast<std::size_t>(t - 1)); }
double GammaSchedule::omega_at(int t) const { return omega.at(static_cast<std::size_t>(t - 1)); }

GammaSchedule GammaSchedule::from_gamma(std::vector<double> gamma, LossWeighting weighting) {
  GammaSchedule g;
  g.T = static_cast<int>(gamma.size());
  if (g.T < 1) {
    throw InvalidScheduleError("gamma schedule needs at least one level");
  }
  for (double v : gamma) {
    if (!(v >= 0.0 && v < 1.0)) {
      throw InvalidScheduleError("gamma values must lie in [0, 1)");
    }
  }
  g.gamma = std::move(gamma);
  g.weighting = weighting;
  const auto n = static_cast<std::size_t>(g.T);
  g.eta.resize(n);
  g.eta_bar.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.eta[i] = g.gamma[i] / (1.0 - g.gamma[i]);
  }
  double acc = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    acc += g.eta[i];
    g.eta_bar[i] = acc;
  }
  g.omega.resize(n);
  g.omega_tilde.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    g.omega[i] = g.eta_bar[i] + (weighting == LossWeighting::snr_plus_one ? 1.0 : 0.0);
    g.omega_tilde[i] = i == 0 ? 0.0 : g.omega[i] / g.eta[i - 1];
  }
  return g;
}

GammaSchedule markov_to_gamma(const MarkovSchedule& m, LossWeighting weighting) {
  m.validate();
  const auto n = static_cast<std::size_t>(m.T);
  std::vector<double> eta_bar(n);
  for (std::size_t i = 0; i < n; ++i) {
    eta_bar[i] = m.alpha_bar[i] / (1.0 - m.alpha_bar[i]);
  }
  std::vector<double> gamma(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double next = i + 1 < n ? eta_bar[i + 1] : 0.0;
    const double eta = eta_bar[i] - next;
    if (eta < 0.0) {
      throw InvalidScheduleError("markov schedule maps to a negative eta at t=" + std::to_string(i + 1));
    }
    gamma[i] = eta / (1.0 + eta);
  }
  return GammaSchedule::from_gamma(std::move(gamma), weighting);
}

MarkovSchedule gamma_to_markov(const GammaSchedule& g) {
  MarkovSchedule m;
  m.T = g.T;
  m.alpha_bar.resize(g.eta_bar.size());
  for (std::size_t i = 0; i < g.eta_bar.size(); ++i) {
    m.alpha_bar[i] = g.eta_bar[i] / (1.0 + g.eta_bar[i]);
  }
  return m;
}

std::vector<double> snr_weights(const GammaSchedule& g) { return g.eta_bar; }

YProcessCertificate y_process_build(const GammaSchedule& g) {
  YProcessCertificate c;
  int top = g.T;
  if (g.eta_bar_at(top) == 0.0) {
    --top;
  }
  for (int t = 1; t <= top; ++t) {
    if (!(g.eta_bar_at(t) > 0.0)) {
      throw DegenerateLevelError("zero SNR at interior level t=" + std::to_string(t));
    }
    if (!(g.gamma_at(t) > 0.0)) {
      throw DegenerateLevelError("gamma is zero at interior level t=" + std::to_string(t) +
                                 "; x_t cannot be recovered from the y-chain");
    }
  }
  c.top = top;
  for (int t = 1; t <= top; ++t) {
    c.gamma.push_back(g.gamma_at(t));
    c.eta.push_back(g.eta_at(t));
    c.eta_bar.push_back(g.eta_bar_at(t));
    const double eb = g.eta_bar_at(t);
    c.rho.push_back(1.0 / std::sqrt(eb * eb + eb));
  }
  for (int t = 1; t <= top; ++t) {
    std::vector<double> row;
    for (int s = t; s <= top; ++s) {
      row.push_back(c.rho_at(t) * std::sqrt(g.gamma_at(s)) / (1.0 - g.gamma_at(s)));
    }
    c.lambda.push_back(std::move(row));
  }
  for (int t = 1; t < top; ++t) {
    const double rt = c.rho_at(t);
    const double rn = c.rho_at(t + 1);
    const double et = g.eta_bar_at(t);
    const double en = g.eta_bar_at(t + 1);
    c.transition_mean.push_back(rn * en / (rt * et));
    c.transition_var.push_back(rn * rn * en * g.eta_at(t) / et);
  }
  return c;
}

double combination_snr(const GammaSchedule& g, int t, const std::vector<double>& coeff) {
  double signal = 0.0;
  double noise = 0.0;
  for (std::size_t i = 0; i < coeff.size(); ++i) {
    const double gs = g.gamma_at(t + static_cast<int>(i));
    signal += coeff[i] * std::sqrt(gs);
    noise += coeff[i] * coeff[i] * (1.0 - gs);
  }
  return signal * signal / noise;
}

namespace {

struct Moments {
  double mean = 0;
  double var = 0;
};

Moments moments(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) {
    m += x;
  }
  m /= static_cast<double>(v.size());
  double s = 0;
  for (double x : v) {
    s += (x - m) * (x - m);
  }
  return {m, s / static_cast<double>(v.size() - 1)};
}

}  // namespace

YMarkovReport y_markov_check(const YProcessCertificate& cert, std::int64_t samples, std::uint64_t seed) {
  if (samples < 2) {
    throw std::invalid_argument("y_markov_check needs at least two samples");
  }
  const int top = cert.top;
  const auto n = static_cast<std::size_t>(samples);
  const NoiseStream x0_stream(seed, {0});
  std::vector<double> x0(n);
  for (std::size_t i = 0; i < n; ++i) {
    x0[i] = x0_stream.gaussian(i);
  }
  // xs[t-1][i] holds x_t, ys[t-1][i] holds y_t.
  std::vector<std::vector<double>> xs(static_cast<std::size_t>(top), std::vector<double>(n));
  std::vector<std::vector<double>> ys(static_cast<std::size_t>(top), std::vector<double>(n));
  for (int t = 1; t <= top; ++t) {
    const NoiseStream eps(seed, {1, static_cast<std::uint64_t>(t)});
    const double gt = cert.gamma[static_cast<std::size_t>(t - 1)];
    auto& x = xs[static_cast<std::size_t>(t - 1)];
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = std::sqrt(gt) * x0[i] + std::sqrt(1.0 - gt) * eps.gaussian(i);
    }
  }
  for (int t = 1; t <= top; ++t) {
    const auto& lam = cert.lambda[static_cast<std::size_t>(t - 1)];
    auto& y = ys[static_cast<std::size_t>(t - 1)];
    for (int s = t; s <= top; ++s) {
      const double l = lam[static_cast<std::size_t>(s - t)];
      const auto& x = xs[static_cast<std::size_t>(s - 1)];
      for (std::size_t i = 0; i < n; ++i) {
        y[i] += l * x[i];
      }
    }
  }

  YMarkovReport report;
  report.samples = samples;
  const double N = static_cast<double>(samples);
  constexpr std::size_t kBatches = 20;
  for (int t = 1; t <= top; ++t) {
    YLevelReport lv;
    lv.t = t;
    const auto& y = ys[static_cast<std::size_t>(t - 1)];
    const double rho_t = cert.rho_at(t);
    const double gt = cert.gamma[static_cast<std::size_t>(t - 1)];

    const Moments my = moments(y);
    lv.var_y = my.var;
    lv.var_y_se = my.var * std::sqrt(2.0 / (N - 1.0));

    // Batch-means SNR: regress y on x0, SNR = b^2 Var(x0) / Var(residual).
    std::vector<double> batch_snr;
    const std::size_t per = n / kBatches;
    for (std::size_t b = 0; b < kBatches && per > 2; ++b) {
      double sxy = 0, sxx = 0, sx = 0, sy = 0;
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        sxy += x0[i] * y[i];
        sxx += x0[i] * x0[i];
        sx += x0[i];
        sy += y[i];
      }
      const double np = static_cast<double>(per);
      const double cov = sxy / np - (sx / np) * (sy / np);
      const double vx = sxx / np - (sx / np) * (sx / np);
      const double slope = cov / vx;
      double rss = 0;
      for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
        const double r = (y[i] - sy / np) - slope * (x0[i] - sx / np);
        rss += r * r;
      }
      batch_snr.push_back(slope * slope * vx / (rss / (np - 2.0)));
    }
    const Moments ms = moments(batch_snr);
    lv.snr_estimate = ms.mean;
    lv.snr_se = std::sqrt(ms.var / static_cast<double>(batch_snr.size()));
    lv.snr_expected = cert.eta_bar[static_cast<std::size_t>(t - 1)];

    // Recovery of x_t from the chain.
    const double back = (1.0 - gt) / std::sqrt(gt);
    const auto& xt = xs[static_cast<std::size_t>(t - 1)];
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double u = y[i] / rho_t;
      if (t < top) {
        u -= ys[static_cast<std::size_t>(t)][i] / cert.rho_at(t + 1);
      }
      worst = std::max(worst, std::abs(u * back - xt[i]));
    }
    lv.recovery_max_error = worst;

    if (t < top) {
      const double a = cert.transition_mean[static_cast<std::size_t>(t - 1)];
      const double sd = std::sqrt(cert.transition_var[static_cast<std::size_t>(t - 1)]);
      const NoiseStream fresh(seed, {2, static_cast<std::uint64_t>(t)});
      std::vector<double> hat(n);
      for (std::size_t i = 0; i < n; ++i) {
        hat[i] = a * y[i] + sd * fresh.gaussian(i);
      }
      const Moments mh = moments(hat);
      const Moments md = moments(ys[static_cast<std::size_t>(t)]);
      lv.var_direct = md.var;
      lv.var_transition = mh.var;
      lv.mean_direct = md.mean;
      lv.mean_transition = mh.mean;
      const double var_se = std::sqrt(2.0 / (N - 1.0)) * std::hypot(md.var, mh.var);
      const double mean_se = std::sqrt((md.var + mh.var) / N);
      lv.var_gap_in_se = std::abs(md.var - mh.var) / var_se;
      lv.mean_gap_in_se = std::abs(md.mean - mh.mean) / mean_se;
    }
    report.levels.push_back(lv);
  }
  return report;
}

nlohmann::json schedule_table(const MarkovSchedule& m, const GammaSchedule& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (int t = 1; t <= g.T; ++t) {
    const double eb = g.eta_bar_at(t);
    nlohmann::json row = {{"t", t},
                          {"alpha_bar", m.alpha_bar_at(t)},
                          {"gamma", g.gamma_at(t)},
                          {"eta", g.eta_at(t)},
                          {"eta_bar", eb},
                          {"omega", g.omega_at(t)}};
    row["rho"] = eb > 0.0 ? nlohmann::json(1.0 / std::sqrt(eb * eb + eb)) : nlohmann::json(nullptr);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace dart
