// SPDX-License-Identifier: Apache-2.0

#include "dart/losses.hpp"

#include <cmath>

namespace dart {

nlohmann::json LossReport::to_json(std::int64_t step) const {
  return {{"step", step},         {"total", total},           {"denoise", denoise},
          {"flow", flow},         {"cross_entropy", cross_entropy}, {"lambda", lambda},
          {"per_level", per_level}};
}

NoiseStream flow_noise_stream(std::uint64_t seed, std::uint64_t sample_id, int res, int t) {
  return NoiseStream(seed, {0x666cULL, sample_id, static_cast<std::uint64_t>(res), static_cast<std::uint64_t>(t)});
}

NoiseStream flow_time_stream(std::uint64_t seed, std::uint64_t sample_id) {
  return NoiseStream(seed, {0x7461ULL, sample_id});
}

NoiseStream markov_stream(std::uint64_t seed, std::uint64_t sample_id) {
  return NoiseStream(seed, {0x6d6bULL, sample_id});
}

std::uint64_t resolution_seed(std::uint64_t seed, int res) {
  return res == 0 ? seed : mix64(seed ^ mix64(static_cast<std::uint64_t>(res)));
}

namespace {

struct Options {
  bool ar = false;
  bool flow = false;
  bool text = false;
};

void check_schedules(const ModelConfig& cfg, const std::vector<GammaSchedule>& scheds) {
  if (static_cast<int>(scheds.size()) != cfg.num_resolutions()) {
    throw ConfigError("loss: " + std::to_string(scheds.size()) + " schedules for " +
                      std::to_string(cfg.num_resolutions()) + " resolutions");
  }
  for (int r = 0; r < cfg.num_resolutions(); ++r) {
    if (scheds[static_cast<std::size_t>(r)].T != cfg.levels(r)) {
      throw ConfigError("loss: schedule of resolution " + std::to_string(r) + " has T=" +
                        std::to_string(scheds[static_cast<std::size_t>(r)].T) + ", model expects " +
                        std::to_string(cfg.levels(r)));
    }
  }
}

template <typename S>
void check_batch(const ModelConfig& cfg, const std::vector<Sample<S>>& batch) {
  if (batch.empty()) {
    throw DimensionError("loss: empty batch");
  }
  const std::int64_t C = cfg.token_channels();
  for (const auto& s : batch) {
    if (static_cast<int>(s.x0.size()) != cfg.num_resolutions()) {
      throw DimensionError("loss: sample has " + std::to_string(s.x0.size()) + " resolutions");
    }
    for (int r = 0; r < cfg.num_resolutions(); ++r) {
      if (s.x0[static_cast<std::size_t>(r)].shape != Shape{cfg.tokens(r), C}) {
        throw DimensionError("loss: x0 shape " + shape_string(s.x0[static_cast<std::size_t>(r)].shape) +
                             " does not match the model");
      }
    }
    if (s.text.size() != batch.front().text.size()) {
      throw DimensionError("loss: text lengths differ within a batch");
    }
  }
}

template <typename S>
std::int64_t class_id(const ModelConfig& cfg, std::int64_t cls) {
  if (cls < 0) {
    return cfg.num_classes;
  }
  if (cls > cfg.num_classes) {
    throw DimensionError("class id " + std::to_string(cls) + " out of range");
  }
  return cls;
}

template <typename S>
void copy_row(const Tensor<S>& src, std::int64_t r, Tensor<S>& dst, std::int64_t d) {
  std::copy_n(src.data.begin() + r * src.cols(), src.cols(), dst.data.begin() + d * dst.cols());
}

template <typename S>
LossResult sequence_loss(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg,
                         const std::vector<GammaSchedule>& scheds, const std::vector<Sample<S>>& batch,
                         std::uint64_t seed, Options o) {
  check_schedules(cfg, scheds);
  check_batch(cfg, batch);
  const int NR = cfg.num_resolutions();
  const auto B = static_cast<std::int64_t>(batch.size());
  const auto N = static_cast<int>(batch.front().text.size());
  if (N > 0 && (!o.text || cfg.vocab == 0)) {
    throw ConfigError("loss: text prefix given but the objective has no text term");
  }
  const std::int64_t C = cfg.token_channels();
  const Layout lay = make_layout(cfg, N);
  const std::int64_t L = lay.length();

  std::vector<std::vector<Trajectory<S>>> traj(static_cast<std::size_t>(B));
  ModelInput<S> in;
  in.batch = B;
  in.tokens = Tensor<S>({B * L, C});
  in.ids.assign(static_cast<std::size_t>(B * L), -1);
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    for (int r = 0; r < NR; ++r) {
      traj[static_cast<std::size_t>(b)].push_back(
          corrupt(s.x0[static_cast<std::size_t>(r)], scheds[static_cast<std::size_t>(r)], resolution_seed(seed, r), s.id));
    }
    in.classes.push_back(class_id<S>(cfg, s.cls));
    in.ids[static_cast<std::size_t>(b * L)] = cfg.vocab;
    for (int n = 0; n < N; ++n) {
      const auto id = s.text[static_cast<std::size_t>(n)];
      if (id < 0 || id >= cfg.vocab) {
        throw DimensionError("text token " + std::to_string(id) + " outside vocabulary");
      }
      in.ids[static_cast<std::size_t>(b * L + 1 + n)] = id;
    }
    for (const auto& ch : lay.chunks) {
      const auto& src = ch.level == 0 ? s.x0[static_cast<std::size_t>(ch.res)]
                                      : traj[static_cast<std::size_t>(b)][static_cast<std::size_t>(ch.res)].level(ch.level);
      for (std::int64_t k = 0; k < ch.length; ++k) {
        copy_row(src, k, in.tokens, b * L + ch.begin + k);
      }
    }
  }
  const ModelOutput out = forward(g, p, cfg, lay, in, 0, L);

  // Denoising rows, in (sample, resolution, level, token) order.
  std::vector<int> level_base(static_cast<std::size_t>(NR), 0);
  std::int64_t image_tokens = 0;
  for (int r = 1; r < NR; ++r) {
    level_base[static_cast<std::size_t>(r)] = level_base[static_cast<std::size_t>(r - 1)] + cfg.levels(r - 1);
  }
  for (int r = 0; r < NR; ++r) {
    image_tokens += cfg.tokens(r);
  }
  std::int64_t nrows = 0;
  for (int r = 0; r < NR; ++r) {
    nrows += B * cfg.levels(r) * cfg.tokens(r);
  }
  std::vector<std::int64_t> rows;
  std::vector<std::int64_t> ctx_rows;
  std::vector<int> row_level;
  std::vector<S> alpha, sigma, weight;
  Tensor<S> ref({nrows, C}), target({nrows, C});
  for (std::int64_t b = 0; b < B; ++b) {
    for (int r = 0; r < NR; ++r) {
      const auto& sc = scheds[static_cast<std::size_t>(r)];
      const auto& tr = traj[static_cast<std::size_t>(b)][static_cast<std::size_t>(r)];
      const std::int64_t K = cfg.tokens(r);
      for (int t = sc.T; t >= 1; --t) {
        const Chunk& ch = lay.chunks[static_cast<std::size_t>(lay.find(r, t))];
        const S a = static_cast<S>(std::sqrt(sc.gamma_at(t)));
        const S s = static_cast<S>(std::sqrt(1.0 - sc.gamma_at(t)));
        const S w = static_cast<S>(sc.omega_at(t) / static_cast<double>(B * K * C));
        for (std::int64_t k = 0; k < K; ++k) {
          std::int64_t pos = ch.begin + k;
          if (o.ar) {
            if (k == 0) {
              pos = ch.begin + K - 1;
            } else {
              pos = lay.chunks[static_cast<std::size_t>(lay.find(r, t - 1))].begin + k - 1;
            }
          }
          const auto idx = static_cast<std::int64_t>(rows.size());
          rows.push_back(b * L + pos);
          ctx_rows.push_back(b * L + ch.begin + k);
          row_level.push_back(level_base[static_cast<std::size_t>(r)] + t - 1);
          alpha.push_back(a);
          sigma.push_back(s);
          weight.push_back(w);
          copy_row(tr.level(t), k, ref, idx);
          copy_row(tr.x0, k, target, idx);
        }
      }
    }
  }
  const ad::Var v = ad::gather_rows<S>(g, out.v, rows);
  const ad::Var denoise = ad::weighted_x0_error<S>(g, v, ref, alpha, sigma, target, weight);

  LossResult res;
  res.report.per_level.assign(static_cast<std::size_t>(cfg.total_levels()), 0.0);
  const Tensor<S>& vv = g.value(v);
  for (std::int64_t i = 0; i < nrows; ++i) {
    double e2 = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double e = static_cast<double>(alpha[static_cast<std::size_t>(i)]) * ref.at(i, c) -
                       static_cast<double>(sigma[static_cast<std::size_t>(i)]) * vv.at(i, c) - target.at(i, c);
      e2 += e * e;
    }
    res.report.per_level[static_cast<std::size_t>(row_level[static_cast<std::size_t>(i)])] +=
        static_cast<double>(weight[static_cast<std::size_t>(i)]) * e2;
  }
  res.report.denoise = static_cast<double>(g.value(denoise).data[0]);
  res.report.image_tokens = B * image_tokens;
  ad::Var total = denoise;

  if (o.flow) {
    Tensor<S> state({nrows, C}), vel_target({nrows, C});
    std::vector<S> tau(static_cast<std::size_t>(nrows));
    std::vector<S> fw(static_cast<std::size_t>(nrows));
    std::int64_t i = 0;
    for (std::int64_t b = 0; b < B; ++b) {
      const auto id = batch[static_cast<std::size_t>(b)].id;
      for (int r = 0; r < NR; ++r) {
        const auto& sc = scheds[static_cast<std::size_t>(r)];
        const auto& tr = traj[static_cast<std::size_t>(b)][static_cast<std::size_t>(r)];
        const std::int64_t K = cfg.tokens(r);
        for (int t = sc.T; t >= 1; --t) {
          const double gp = sc.gamma_at(t - 1);
          const S a_prev = static_cast<S>(std::sqrt(gp));
          const S s_prev = static_cast<S>(std::sqrt(1.0 - gp));
          const NoiseStream eps = flow_noise_stream(seed, id, r, t);
          const S tt = static_cast<S>(flow_time_stream(seed, id).uniform(static_cast<std::uint64_t>(r * 4096 + t)));
          const Tensor<S>& next = tr.level(t - 1);
          for (std::int64_t k = 0; k < K; ++k, ++i) {
            tau[static_cast<std::size_t>(i)] = tt;
            fw[static_cast<std::size_t>(i)] = static_cast<S>(1.0 / static_cast<double>(B * K * C));
            for (std::int64_t c = 0; c < C; ++c) {
              const S x0_hat = alpha[static_cast<std::size_t>(i)] * ref.at(i, c) - sigma[static_cast<std::size_t>(i)] * vv.at(i, c);
              const S gauss = a_prev * x0_hat + s_prev * static_cast<S>(eps.gaussian(static_cast<std::uint64_t>(k * C + c)));
              state.at(i, c) = (S{1} - tt) * gauss + tt * next.at(k, c);
              vel_target.at(i, c) = next.at(k, c) - gauss;
            }
          }
        }
      }
    }
    const ad::Var ctx = ad::gather_rows<S>(g, out.c, ctx_rows);
    const ad::Var vel = flow_velocity<S>(g, p, cfg, g.constant(std::move(state)), ctx, tau);
    const ad::Var flow = ad::weighted_sq_error<S>(g, vel, vel_target, fw);
    res.report.flow = static_cast<double>(g.value(flow).data[0]);
    total = ad::add(g, total, flow);
  }

  if (o.text && N > 0) {
    const std::int64_t text_tokens = B * N;
    std::vector<std::int64_t> trows, targets;
    for (std::int64_t b = 0; b < B; ++b) {
      for (int n = 0; n < N; ++n) {
        trows.push_back(b * L + n);
        targets.push_back(batch[static_cast<std::size_t>(b)].text[static_cast<std::size_t>(n)]);
      }
    }
    const std::vector<S> cw(static_cast<std::size_t>(text_tokens), static_cast<S>(1.0 / static_cast<double>(text_tokens)));
    const ad::Var ce = ad::cross_entropy<S>(g, ad::gather_rows<S>(g, out.logits, trows), targets, cw);
    const double lambda = static_cast<double>(text_tokens) / static_cast<double>(B * image_tokens);
    res.report.cross_entropy = static_cast<double>(g.value(ce).data[0]);
    res.report.lambda = lambda;
    res.report.text_tokens = text_tokens;
    total = ad::add(g, total, ad::scale(g, ce, static_cast<S>(lambda)));
  }
  res.total = total;
  res.report.total = static_cast<double>(g.value(total).data[0]);
  return res;
}

void require_variant(const ModelConfig& cfg, std::initializer_list<Variant> ok, const char* what) {
  for (Variant v : ok) {
    if (cfg.variant == v) {
      return;
    }
  }
  throw ConfigError(std::string(what) + ": not available for variant " + to_string(cfg.variant));
}

}  // namespace

template <typename S>
LossResult loss_dart(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                     const std::vector<Sample<S>>& batch, std::uint64_t seed) {
  require_variant(cfg, {Variant::dart, Variant::dart_fm}, "loss_dart");
  return sequence_loss(g, p, cfg, {sched}, batch, seed, {});
}

template <typename S>
LossResult loss_dart_ar(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                        const std::vector<Sample<S>>& batch, std::uint64_t seed) {
  require_variant(cfg, {Variant::dart_ar}, "loss_dart_ar");
  return sequence_loss(g, p, cfg, {sched}, batch, seed, {.ar = true, .text = cfg.vocab > 0});
}

template <typename S>
LossResult loss_flow(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                     const std::vector<Sample<S>>& batch, std::uint64_t seed) {
  require_variant(cfg, {Variant::dart_fm}, "loss_flow");
  return sequence_loss(g, p, cfg, {sched}, batch, seed, {.flow = true, .text = cfg.vocab > 0});
}

template <typename S>
LossResult loss_matryoshka(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg,
                           const std::vector<GammaSchedule>& scheds, const std::vector<Sample<S>>& batch,
                           std::uint64_t seed) {
  require_variant(cfg, {Variant::dart, Variant::dart_fm}, "loss_matryoshka");
  return sequence_loss(g, p, cfg, scheds, batch, seed, {.flow = cfg.variant == Variant::dart_fm});
}

template <typename S>
LossResult loss_kaleido(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                        const std::vector<Sample<S>>& batch, std::uint64_t seed) {
  require_variant(cfg, {Variant::dart, Variant::dart_ar, Variant::dart_fm}, "loss_kaleido");
  if (cfg.vocab == 0) {
    throw ConfigError("loss_kaleido: model has no vocabulary");
  }
  return sequence_loss(g, p, cfg, {sched}, batch, seed,
                       {.ar = cfg.variant == Variant::dart_ar, .flow = cfg.variant == Variant::dart_fm, .text = true});
}

template <typename S>
LossResult loss_markov_baseline(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const MarkovSchedule& m,
                                LossWeighting weighting, const std::vector<Sample<S>>& batch, std::uint64_t seed) {
  require_variant(cfg, {Variant::markov}, "loss_markov_baseline");
  check_batch(cfg, batch);
  if (m.T != cfg.markov_levels) {
    throw ConfigError("loss_markov_baseline: schedule has T=" + std::to_string(m.T) + ", model expects " +
                      std::to_string(cfg.markov_levels));
  }
  const auto B = static_cast<std::int64_t>(batch.size());
  const std::int64_t C = cfg.token_channels();
  const std::int64_t K = cfg.tokens(0);
  const Layout lay = make_layout(cfg, 0);
  const std::int64_t L = lay.length();
  const std::int64_t begin = lay.chunks.front().begin;

  ModelInput<S> in;
  in.batch = B;
  in.tokens = Tensor<S>({B * L, C});
  in.ids.assign(static_cast<std::size_t>(B * L), -1);
  std::vector<std::int64_t> rows;
  std::vector<S> alpha, sigma, weight;
  std::vector<int> level;
  Tensor<S> ref({B * K, C}), target({B * K, C});
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    const NoiseStream st = markov_stream(seed, s.id);
    const int t = 1 + static_cast<int>(st.below(0, static_cast<std::uint64_t>(m.T)));
    const double ab = m.alpha_bar_at(t);
    const double snr = ab / (1.0 - ab) + (weighting == LossWeighting::snr_plus_one ? 1.0 : 0.0);
    in.classes.push_back(class_id<S>(cfg, s.cls));
    in.time.push_back(static_cast<double>(t) / m.T);
    in.ids[static_cast<std::size_t>(b * L)] = cfg.vocab;
    const S a = static_cast<S>(std::sqrt(ab));
    const S sg = static_cast<S>(std::sqrt(1.0 - ab));
    for (std::int64_t k = 0; k < K; ++k) {
      const std::int64_t i = b * K + k;
      for (std::int64_t c = 0; c < C; ++c) {
        const S x0 = s.x0[0].at(k, c);
        const S xt = a * x0 + sg * static_cast<S>(st.gaussian(static_cast<std::uint64_t>(1 + k * C + c)));
        in.tokens.at(b * L + begin + k, c) = xt;
        ref.at(i, c) = xt;
        target.at(i, c) = x0;
      }
      rows.push_back(b * L + begin + k);
      alpha.push_back(a);
      sigma.push_back(sg);
      weight.push_back(static_cast<S>(snr / static_cast<double>(B * K * C)));
      level.push_back(t - 1);
    }
  }
  const ModelOutput out = forward(g, p, cfg, lay, in, 0, L);
  const ad::Var v = ad::gather_rows<S>(g, out.v, rows);
  LossResult res;
  res.total = ad::weighted_x0_error<S>(g, v, ref, alpha, sigma, target, weight);
  res.report.per_level.assign(static_cast<std::size_t>(m.T), 0.0);
  const Tensor<S>& vv = g.value(v);
  for (std::int64_t i = 0; i < B * K; ++i) {
    double e2 = 0;
    for (std::int64_t c = 0; c < C; ++c) {
      const double e = static_cast<double>(alpha[static_cast<std::size_t>(i)]) * ref.at(i, c) -
                       static_cast<double>(sigma[static_cast<std::size_t>(i)]) * vv.at(i, c) - target.at(i, c);
      e2 += e * e;
    }
    res.report.per_level[static_cast<std::size_t>(level[static_cast<std::size_t>(i)])] +=
        static_cast<double>(weight[static_cast<std::size_t>(i)]) * e2;
  }
  res.report.denoise = res.report.total = static_cast<double>(g.value(res.total).data[0]);
  res.report.image_tokens = B * K;
  return res;
}

template <typename S>
LossResult compute_loss(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg,
                        const std::vector<GammaSchedule>& scheds, LossWeighting weighting,
                        const std::vector<Sample<S>>& batch, std::uint64_t seed) {
  if (cfg.variant == Variant::markov) {
    return loss_markov_baseline(g, p, cfg, cosine_markov(cfg.markov_levels), weighting, batch, seed);
  }
  return sequence_loss(g, p, cfg, scheds, batch, seed,
                       {.ar = cfg.variant == Variant::dart_ar, .flow = cfg.variant == Variant::dart_fm,
                        .text = cfg.vocab > 0});
}

#define DART_LOSSES(S)                                                                                         \
  template LossResult loss_dart(ad::Graph<S>&, const Bound&, const ModelConfig&, const GammaSchedule&,         \
                                const std::vector<Sample<S>>&, std::uint64_t);                                 \
  template LossResult loss_dart_ar(ad::Graph<S>&, const Bound&, const ModelConfig&, const GammaSchedule&,      \
                                   const std::vector<Sample<S>>&, std::uint64_t);                              \
  template LossResult loss_flow(ad::Graph<S>&, const Bound&, const ModelConfig&, const GammaSchedule&,         \
                                const std::vector<Sample<S>>&, std::uint64_t);                                 \
  template LossResult loss_matryoshka(ad::Graph<S>&, const Bound&, const ModelConfig&,                         \
                                      const std::vector<GammaSchedule>&, const std::vector<Sample<S>>&,        \
                                      std::uint64_t);                                                          \
  template LossResult loss_kaleido(ad::Graph<S>&, const Bound&, const ModelConfig&, const GammaSchedule&,      \
                                   const std::vector<Sample<S>>&, std::uint64_t);                              \
  template LossResult loss_markov_baseline(ad::Graph<S>&, const Bound&, const ModelConfig&,                    \
                                           const MarkovSchedule&, LossWeighting, const std::vector<Sample<S>>&, \
                                           std::uint64_t);                                                     \
  template LossResult compute_loss(ad::Graph<S>&, const Bound&, const ModelConfig&,                            \
                                   const std::vector<GammaSchedule>&, LossWeighting,                           \
                                   const std::vector<Sample<S>>&, std::uint64_t);

DART_LOSSES(float)
DART_LOSSES(double)

}  // namespace dart
