// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "dart/harness.hpp"
#include "dart/noising.hpp"

namespace dart {

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) {
    throw DimensionError("wasserstein1: empty sample set");
  }
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double prev = std::min(a.front(), b.front());
  double total = 0;
  while (i < a.size() || j < b.size()) {
    double x;
    if (j == b.size() || (i < a.size() && a[i] <= b[j])) {
      x = a[i];
    } else {
      x = b[j];
    }
    total += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (x - prev);
    prev = x;
    while (i < a.size() && a[i] == x) {
      ++i;
    }
    while (j < b.size() && b[j] == x) {
      ++j;
    }
  }
  return total;
}

double eval_swd(const Tensor<double>& a, const Tensor<double>& b, int projections, std::uint64_t seed) {
  if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[1]) {
    throw DimensionError("eval_swd: expected [n, d] sets of equal dimension, got " + shape_string(a.shape) +
                         " and " + shape_string(b.shape));
  }
  if (a.shape[0] == 0 || b.shape[0] == 0 || projections < 1) {
    throw DimensionError("eval_swd: empty sample set or no projections");
  }
  const auto d = a.shape[1];
  const NoiseStream s(seed, {0x7377ULL});
  double total = 0;
  std::vector<double> dir(static_cast<std::size_t>(d));
  for (int l = 0; l < projections; ++l) {
    double norm = 0;
    for (std::int64_t k = 0; k < d; ++k) {
      dir[static_cast<std::size_t>(k)] = s.gaussian(static_cast<std::uint64_t>(l * d + k));
      norm += dir[static_cast<std::size_t>(k)] * dir[static_cast<std::size_t>(k)];
    }
    norm = std::sqrt(norm);
    auto project = [&](const Tensor<double>& m) {
      std::vector<double> p(static_cast<std::size_t>(m.shape[0]));
      for (std::int64_t i = 0; i < m.shape[0]; ++i) {
        double acc = 0;
        for (std::int64_t k = 0; k < d; ++k) {
          acc += m.at(i, k) * dir[static_cast<std::size_t>(k)];
        }
        p[static_cast<std::size_t>(i)] = acc / norm;
      }
      return p;
    };
    total += wasserstein1(project(a), project(b));
  }
  return total / projections;
}

double histogram_distance(const std::vector<double>& a, const std::vector<double>& b, int bins, double lo,
                          double hi) {
  if (a.empty() || b.empty() || bins < 1 || !(hi > lo)) {
    throw DimensionError("histogram_distance: empty input or bad range");
  }
  auto hist = [&](const std::vector<double>& v) {
    std::vector<double> h(static_cast<std::size_t>(bins), 0.0);
    for (double x : v) {
      const auto k = static_cast<int>(std::floor((x - lo) / (hi - lo) * bins));
      h[static_cast<std::size_t>(std::clamp(k, 0, bins - 1))] += 1.0 / static_cast<double>(v.size());
    }
    return h;
  };
  const auto ha = hist(a), hb = hist(b);
  double d = 0;
  for (int k = 0; k < bins; ++k) {
    d += std::abs(ha[static_cast<std::size_t>(k)] - hb[static_cast<std::size_t>(k)]);
  }
  return d;
}

Tensor<double> sample_matrix(const ModelConfig& cfg, const SampleOutput<float>& out) {
  const auto images = out.images(cfg, cfg.num_resolutions() - 1);
  const auto& r = cfg.resolutions.back();
  const std::int64_t d = static_cast<std::int64_t>(cfg.image_channels) * r.height * r.width;
  Tensor<double> m({static_cast<std::int64_t>(images.size()), d});
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::int64_t k = 0; k < d; ++k) {
      m.at(static_cast<std::int64_t>(i), k) = images[i].data[static_cast<std::size_t>(k)];
    }
  }
  return m;
}

std::vector<double> nearest_mse(const Tensor<double>& samples, const Tensor<double>& train) {
  if (samples.shape.size() != 2 || train.shape.size() != 2 || samples.shape[1] != train.shape[1] ||
      train.shape[0] == 0) {
    throw DimensionError("nearest_mse: expected [n, d] sets of equal dimension");
  }
  const auto d = samples.shape[1];
  std::vector<double> out;
  for (std::int64_t i = 0; i < samples.shape[0]; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < train.shape[0]; ++j) {
      double acc = 0;
      for (std::int64_t k = 0; k < d && acc < best * static_cast<double>(d); ++k) {
        const double e = samples.at(i, k) - train.at(j, k);
        acc += e * e;
      }
      best = std::min(best, acc / static_cast<double>(d));
    }
    out.push_back(best);
  }
  return out;
}

nlohmann::json eval_suite(const Checkpoint& ckpt, const EvalOptions& opt) {
  for (const auto& m : opt.metrics) {
    if (m != "swd" && m != "mse") {
      throw ConfigError("eval: unsupported metric '" + m + "'");
    }
  }
  nlohmann::json report = nlohmann::json::object();
  if (opt.num <= 0) {
    return report;
  }
  const TrainConfig tc = TrainConfig::from_json(ckpt.meta.at("train"));
  const ModelConfig& cfg = tc.model;
  const auto params = checkpoint_parameters(ckpt, "ema");
  std::vector<GammaSchedule> scheds;
  if (cfg.variant != Variant::markov) {
    scheds = make_schedules(cfg, tc.schedule, tc.weighting);
  }
  SampleOptions so = opt.sampling;
  so.num = opt.num;
  so.seed = opt.seed;
  const auto out = sample(params, cfg, scheds, so, opt.markov_steps);
  const Tensor<double> samples = sample_matrix(cfg, out);

  report["variant"] = to_string(cfg.variant);
  report["num"] = opt.num;
  report["seed"] = opt.seed;
  report["data_seed"] = tc.data.seed;
  report["step"] = ckpt.meta.at("step");
  if (cfg.variant == Variant::markov) {
    report["markov_steps"] = opt.markov_steps > 0 ? opt.markov_steps : cfg.markov_levels;
  }
  for (const auto& m : opt.metrics) {
    if (m == "swd") {
      const Dataset held = make_dataset(tc.data, 1);
      report["swd"] = eval_swd(samples, held.matrix(), 128, opt.seed);
    } else {
      const Dataset train = make_dataset(tc.data, 0);
      const auto mse = nearest_mse(samples, train.matrix());
      double mean = 0;
      for (double v : mse) {
        mean += v / static_cast<double>(mse.size());
      }
      report["mse"] = mean;
    }
  }
  return report;
}

nlohmann::json verify_prop1(int T, const std::string& base, std::int64_t N, std::uint64_t seed, PerturbSpec perturb,
                            int alternatives) {
  if (base != "cosine") {
    throw ConfigError("verify: unknown schedule base '" + base + "'");
  }
  if (N < 10000) {
    throw ConfigError("verify: N must be at least 10000");
  }
  const MarkovSchedule m = cosine_markov(T);
  GammaSchedule g = markov_to_gamma(m);
  if (perturb.level >= 1 && perturb.level <= T) {
    auto gamma = g.gamma;
    gamma[static_cast<std::size_t>(perturb.level - 1)] += perturb.delta;
    g = GammaSchedule::from_gamma(gamma, g.weighting);
  }
  nlohmann::json checks = nlohmann::json::object();
  bool all = true;
  auto record = [&](const std::string& name, bool pass, nlohmann::json measured) {
    measured["pass"] = pass;
    checks[name] = std::move(measured);
    all = all && pass;
  };

  double sum_err = 0, inverse_err = 0;
  const MarkovSchedule back = gamma_to_markov(g);
  for (int t = 1; t <= T; ++t) {
    sum_err = std::max(sum_err, std::abs(g.eta_bar_at(t) - m.snr_at(t)));
    inverse_err = std::max(inverse_err, std::abs(back.alpha_bar_at(t) - m.alpha_bar_at(t)));
  }
  record("round_trip", sum_err < 1e-9 && inverse_err < 1e-9,
         {{"max_eta_bar_error", sum_err}, {"max_alpha_bar_error", inverse_err}, {"tolerance", 1e-9}});

  YProcessCertificate cert;
  try {
    cert = y_process_build(g);
  } catch (const std::exception& e) {
    record("y_process", false, {{"error", e.what()}});
    return {{"T", T}, {"base", base}, {"N", N}, {"seed", seed}, {"checks", checks}, {"pass", false}};
  }
  double rho_err = 0;
  for (int t = 1; t <= cert.top; ++t) {
    const double eb = cert.eta_bar[static_cast<std::size_t>(t - 1)];
    rho_err = std::max(rho_err, std::abs(cert.rho_at(t) * cert.rho_at(t) * (eb * eb + eb) - 1.0));
  }
  record("y_process", rho_err < 1e-9, {{"top", cert.top}, {"max_unit_variance_error", rho_err}});

  const YMarkovReport mc = y_markov_check(cert, N, seed);
  double worst_snr = 0, worst_var = 0, worst_gap = 0, worst_recovery = 0;
  for (const auto& l : mc.levels) {
    worst_snr = std::max(worst_snr, std::abs(l.snr_estimate - l.snr_expected) / l.snr_se);
    worst_var = std::max(worst_var, std::abs(l.var_y - 1.0) / std::max(l.var_y_se, 1e-300));
    if (l.t < cert.top) {
      worst_gap = std::max({worst_gap, l.var_gap_in_se, l.mean_gap_in_se});
    }
    worst_recovery = std::max(worst_recovery, l.recovery_max_error);
  }
  record("snr_monte_carlo", worst_snr < 3.0, {{"max_gap_in_se", worst_snr}, {"levels", mc.levels.size()}});
  record("unit_variance", worst_var < 3.0, {{"max_gap_in_se", worst_var}});
  record("markov_transition", worst_gap < 3.0, {{"max_gap_in_se", worst_gap}});
  record("recovery", worst_recovery < 1e-9, {{"max_error", worst_recovery}, {"tolerance", 1e-9}});

  double worst_excess = -std::numeric_limits<double>::infinity();
  double optimum_err = 0;
  for (int t = 1; t < cert.top; ++t) {
    std::vector<double> opt;
    for (int s = t; s <= T; ++s) {
      opt.push_back(std::sqrt(g.gamma_at(s)) / (1 - g.gamma_at(s)));
    }
    const double cap = g.eta_bar_at(t);
    optimum_err = std::max(optimum_err, std::abs(combination_snr(g, t, opt) - cap) / cap);
    const NoiseStream s(seed, {0x736eULL, static_cast<std::uint64_t>(t)});
    for (int k = 0; k < alternatives; ++k) {
      std::vector<double> alt(opt.size());
      for (std::size_t i = 0; i < alt.size(); ++i) {
        alt[i] = s.gaussian(static_cast<std::uint64_t>(k) * opt.size() + i);
      }
      worst_excess = std::max(worst_excess, combination_snr(g, t, alt) - cap);
    }
  }
  const bool vacuous = cert.top < 2;
  record("snr_maximality", vacuous || (worst_excess <= 1e-9 && optimum_err < 1e-9),
         {{"max_excess", vacuous ? nlohmann::json(nullptr) : nlohmann::json(worst_excess)},
          {"optimum_relative_error", optimum_err},
          {"alternatives", alternatives},
          {"vacuous", vacuous}});

  return {{"T", T}, {"base", base}, {"N", N}, {"seed", seed}, {"checks", checks}, {"pass", all}};
}

void write_ppm(const std::string& path, const Tensor<float>& image, double lo, double hi) {
  if (image.shape.size() != 3 || (image.shape[0] != 1 && image.shape[0] != 3)) {
    throw DimensionError("write_ppm: expected [1 or 3, H, W], got " + shape_string(image.shape));
  }
  const auto C = image.shape[0], H = image.shape[1], W = image.shape[2];
  std::ofstream f(path, std::ios::binary);
  if (!f) {
    throw std::runtime_error("write_ppm: cannot open " + path);
  }
  f << "P6\n" << W << " " << H << "\n255\n";
  for (std::int64_t y = 0; y < H; ++y) {
    for (std::int64_t x = 0; x < W; ++x) {
      for (int k = 0; k < 3; ++k) {
        const auto c = C == 1 ? 0 : k;
        const double v = (image.data[static_cast<std::size_t>((c * H + y) * W + x)] - lo) / (hi - lo);
        f.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
      }
    }
  }
}

}  // namespace dart
