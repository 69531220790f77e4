// SPDX-License-Identifier: Apache-2.0
//
// Noise-schedule calculus.
//
// A Markovian schedule is described by its cumulative signal fractions
// alpha_bar[t]. The independent-noising schedule gamma[t] is tied to it by
//
//   alpha_bar_t / (1 - alpha_bar_t) = sum_{s >= t} gamma_s / (1 - gamma_s)
//
// which is the SNR of the best linear combination of x_t..x_T. Everything
// here is computed in double precision once and read as constants.
//
// Level indices are 1-based in the public accessors (t = 1..T) to match the
// usual notation; storage is 0-based.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace dart {

class InvalidScheduleError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegenerateLevelError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

enum class LossWeighting { snr, snr_plus_one };

LossWeighting parse_weighting(const std::string& name);
std::string to_string(LossWeighting w);

struct MarkovSchedule {
  int T = 0;
  std::vector<double> alpha_bar;  // alpha_bar[t-1] for t = 1..T

  double alpha_bar_at(int t) const;  // t = 0 gives 1
  double snr_at(int t) const;        // alpha_bar / (1 - alpha_bar)
  // Throws InvalidScheduleError unless strictly decreasing, alpha_bar_1 < 1 and alpha_bar_T >= 0.
  void validate() const;
};

MarkovSchedule cosine_markov(int T);

struct GammaSchedule {
  int T = 0;
  std::vector<double> gamma;        // gamma_t
  std::vector<double> eta;          // gamma_t / (1 - gamma_t)
  std::vector<double> eta_bar;      // sum_{s=t}^T eta_s
  std::vector<double> omega;        // loss weights under `weighting`
  std::vector<double> omega_tilde;  // omega_t * (1 - gamma_{t-1}) / gamma_{t-1}; zero at t = 1
  LossWeighting weighting = LossWeighting::snr;

  // gamma_0 is the clean-data boundary and equals 1.
  double gamma_at(int t) const;
  double eta_at(int t) const;
  double eta_bar_at(int t) const;
  double omega_at(int t) const;

  // Builds every derived field from raw gamma values in [0, 1).
  static GammaSchedule from_gamma(std::vector<double> gamma, LossWeighting weighting = LossWeighting::snr);
};

// Inverse of the bijection: eta_bar_t = alpha_bar_t / (1 - alpha_bar_t), eta_t = eta_bar_t - eta_bar_{t+1}.
GammaSchedule markov_to_gamma(const MarkovSchedule& m, LossWeighting weighting = LossWeighting::snr);
MarkovSchedule gamma_to_markov(const GammaSchedule& g);

// SNR weights omega_t = eta_bar_t.
std::vector<double> snr_weights(const GammaSchedule& g);

// Coefficients of the auxiliary Markov chain y_t = rho_t * sum_{s>=t} sqrt(gamma_s)/(1-gamma_s) x_s.
// Only levels with eta_bar_t > 0 are covered: levels 1..top.
struct YProcessCertificate {
  int top = 0;                            // highest covered level
  std::vector<double> gamma;              // copied for levels 1..top
  std::vector<double> eta;
  std::vector<double> eta_bar;
  std::vector<double> rho;                // 1 / sqrt(eta_bar^2 + eta_bar)
  std::vector<std::vector<double>> lambda;  // lambda[t-1][s-t] for s = t..top
  std::vector<double> transition_mean;    // rho_{t+1} eta_bar_{t+1} / (rho_t eta_bar_t), t = 1..top-1
  std::vector<double> transition_var;     // rho_{t+1}^2 eta_bar_{t+1} eta_t / eta_bar_t, t = 1..top-1

  double rho_at(int t) const { return rho[static_cast<std::size_t>(t - 1)]; }
};

YProcessCertificate y_process_build(const GammaSchedule& g);

// SNR of sum_s coeff[s-t] x_s for x_s = sqrt(gamma_s) x_0 + sqrt(1-gamma_s) eps_s, s = t..t+coeff.size()-1.
double combination_snr(const GammaSchedule& g, int t, const std::vector<double>& coeff);

struct YLevelReport {
  int t = 0;
  double var_direct = 0;
  double var_transition = 0;
  double mean_direct = 0;
  double mean_transition = 0;
  double var_gap_in_se = 0;    // |var_direct - var_transition| / standard error of the difference
  double mean_gap_in_se = 0;
  double snr_estimate = 0;     // Monte-Carlo SNR of y_t
  double snr_expected = 0;     // eta_bar_t
  double snr_se = 0;           // batch-means standard error
  double var_y = 0;            // Var(y_t), expected 1
  double var_y_se = 0;
  double recovery_max_error = 0;
};

struct YMarkovReport {
  std::int64_t samples = 0;
  std::vector<YLevelReport> levels;
};

// Monte-Carlo check of the y-chain: moments of the transition versus direct
// construction, per-level SNR, and exact recovery of x_t from (y_t, y_{t+1}).
YMarkovReport y_markov_check(const YProcessCertificate& cert, std::int64_t samples, std::uint64_t seed);

// One row per level: {t, alpha_bar, gamma, eta, eta_bar, omega, rho}; rho is null where eta_bar_t = 0.
nlohmann::json schedule_table(const MarkovSchedule& m, const GammaSchedule& g);

}  // namespace dart
