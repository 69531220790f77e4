// SPDX-License-Identifier: Apache-2.0

#include "dart/modelcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

#include "dart/noising.hpp"
#include "dart/schedule.hpp"

namespace dart {

ParameterStore<float> randomized_parameters(const ModelConfig& cfg, std::uint64_t seed, double scale) {
  ParameterStore<float> p = init_parameters(cfg, seed);
  for (auto& [name, t] : p) {
    const NoiseStream s(seed, {0x7270ULL, fnv1a(name)});
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      t.data[i] += static_cast<float>(scale * s.gaussian(i));
    }
  }
  return p;
}

template <typename S>
std::vector<Sample<S>> random_batch(const ModelConfig& cfg, int batch, std::uint64_t seed, int text_tokens) {
  std::vector<Sample<S>> out;
  for (int b = 0; b < batch; ++b) {
    Sample<S> s;
    for (int r = 0; r < cfg.num_resolutions(); ++r) {
      s.x0.push_back(gaussian_like<S>({cfg.tokens(r), cfg.token_channels()},
                                      NoiseStream(seed, {0x6261ULL, static_cast<std::uint64_t>(b), static_cast<std::uint64_t>(r)})));
    }
    if (cfg.num_classes > 0) {
      s.cls = b % (cfg.num_classes + 1) == cfg.num_classes ? -1 : b % (cfg.num_classes + 1);
    }
    const NoiseStream ts(seed, {0x7478ULL, static_cast<std::uint64_t>(b)});
    for (int n = 0; n < text_tokens; ++n) {
      s.text.push_back(static_cast<std::int64_t>(ts.below(static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(cfg.vocab))));
    }
    s.id = static_cast<std::uint64_t>(100 + b);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

using ad::Graph;
using ad::Var;

ModelConfig tiny(Variant v) {
  ModelConfig c;
  c.variant = v;
  c.layers = 1;
  c.hidden = 16;
  c.heads = 2;
  c.image_channels = 2;
  c.patch = 1;
  c.resolutions = {ResolutionSpec{1, 2, 2}};
  c.flow_hidden = 8;
  c.flow_blocks = 1;
  c.num_classes = 2;
  c.markov_levels = 4;
  return c;
}

Tensor<double> projection(const Shape& s, std::uint64_t seed, std::uint64_t id) {
  return gaussian_like<double>(s, NoiseStream(seed, {0x7072ULL, id}));
}

Var project(Graph<double>& g, Var y, std::uint64_t seed, std::uint64_t id) {
  return ad::sum(g, ad::mul(g, y, g.constant(projection(g.value(y).shape, seed, id))));
}

struct Bundle {
  std::vector<std::string> names;
  std::vector<Tensor<double>> values;
};

Bundle params_of(const ModelConfig& cfg, std::uint64_t seed) {
  Bundle b;
  for (auto& [name, t] : cast_store<double>(randomized_parameters(cfg, seed, 0.3))) {
    b.names.push_back(name);
    b.values.push_back(t);
  }
  return b;
}

Bound rebind(const std::vector<std::string>& names, const std::vector<Var>& vars) {
  Bound p;
  for (std::size_t i = 0; i < names.size(); ++i) {
    p.emplace(names[i], vars[i]);
  }
  return p;
}

std::vector<GammaSchedule> schedules_of(const ModelConfig& cfg) {
  std::vector<GammaSchedule> out;
  for (int r = 0; r < cfg.num_resolutions(); ++r) {
    out.push_back(markov_to_gamma(cosine_markov(cfg.levels(r)), LossWeighting::snr_plus_one));
  }
  return out;
}

}  // namespace

std::vector<ad::NamedGradCheck> model_gradient_suite(std::uint64_t seed, int coords) {
  std::vector<ad::NamedGradCheck> out;
  auto run = [&](const std::string& name, const ad::ScalarFn& fn, const std::vector<Tensor<double>>& inputs) {
    out.push_back({name, ad::check_gradient(fn, inputs, coords, seed + 17 * out.size())});
  };

  {
    ModelConfig cfg = tiny(Variant::dart);
    cfg.vocab = 5;
    cfg.max_text = 2;
    const Bundle b = params_of(cfg, seed);
    const Layout lay = make_layout(cfg, 2);
    ModelInput<double> in;
    in.batch = 2;
    in.tokens = gaussian_like<double>({2 * lay.length(), cfg.token_channels()}, NoiseStream(seed, {1}));
    in.ids.assign(static_cast<std::size_t>(2 * lay.length()), -1);
    for (int bb = 0; bb < 2; ++bb) {
      in.ids[static_cast<std::size_t>(bb * lay.length())] = cfg.vocab;
      in.ids[static_cast<std::size_t>(bb * lay.length() + 1)] = 3 - bb;
      in.ids[static_cast<std::size_t>(bb * lay.length() + 2)] = 1;
    }
    in.classes = {0, cfg.num_classes};
    const auto names = b.names;
    run("forward",
        [=](Graph<double>& g, const std::vector<Var>& v) {
          const ModelOutput o = forward(g, rebind(names, v), cfg, lay, in, 0, lay.length());
          const Var total = ad::add(g, project(g, o.v, seed, 1), project(g, o.c, seed, 2));
          return ad::add(g, total, project(g, o.logits, seed, 3));
        },
        b.values);
  }
  {
    const ModelConfig cfg = tiny(Variant::dart_fm);
    Bundle b = params_of(cfg, seed);
    std::vector<std::string> names;
    std::vector<Tensor<double>> inputs;
    for (std::size_t i = 0; i < b.names.size(); ++i) {
      if (b.names[i].rfind("flow/", 0) == 0) {
        names.push_back(b.names[i]);
        inputs.push_back(b.values[i]);
      }
    }
    inputs.push_back(gaussian_like<double>({3, cfg.token_channels()}, NoiseStream(seed, {2})));
    inputs.push_back(gaussian_like<double>({3, cfg.hidden}, NoiseStream(seed, {3})));
    const std::vector<double> tau{0.0, 0.37, 1.0};
    run("flow_velocity",
        [=](Graph<double>& g, const std::vector<Var>& v) {
          const Bound p = rebind(names, v);
          const auto n = v.size();
          return project(g, flow_velocity<double>(g, p, cfg, v[n - 2], v[n - 1], tau), seed, 4);
        },
        inputs);
  }

  auto loss_case = [&](const std::string& name, const ModelConfig& cfg, int text,
                       std::function<LossResult(Graph<double>&, const Bound&, const std::vector<Sample<double>>&)> f) {
    const Bundle b = params_of(cfg, seed);
    const auto batch = random_batch<double>(cfg, 2, seed, text);
    const auto names = b.names;
    run(name, [=](Graph<double>& g, const std::vector<Var>& v) { return f(g, rebind(names, v), batch).total; },
        b.values);
  };
  {
    const ModelConfig cfg = tiny(Variant::dart);
    const auto s = schedules_of(cfg);
    loss_case("loss_dart", cfg, 0, [=](Graph<double>& g, const Bound& p, const auto& batch) {
      return loss_dart(g, p, cfg, s[0], batch, seed);
    });
  }
  {
    const ModelConfig cfg = tiny(Variant::dart_ar);
    const auto s = schedules_of(cfg);
    loss_case("loss_dart_ar", cfg, 0, [=](Graph<double>& g, const Bound& p, const auto& batch) {
      return loss_dart_ar(g, p, cfg, s[0], batch, seed);
    });
  }
  {
    // The Gaussian estimate inside the flow term is detached, which finite
    // differences cannot see. The full loss is checked on the velocity head
    // only; the backbone path through c is checked with the state frozen.
    const ModelConfig cfg = tiny(Variant::dart_fm);
    const auto sched = schedules_of(cfg)[0];
    const Bundle b = params_of(cfg, seed);
    const auto batch = random_batch<double>(cfg, 2, seed, 0);
    std::vector<std::string> head, body;
    std::vector<Tensor<double>> head_v, body_v;
    for (std::size_t i = 0; i < b.names.size(); ++i) {
      const bool is_head = b.names[i].rfind("flow/", 0) == 0;
      (is_head ? head : body).push_back(b.names[i]);
      (is_head ? head_v : body_v).push_back(b.values[i]);
    }
    run("loss_flow",
        [=](Graph<double>& g, const std::vector<Var>& v) {
          Bound p = rebind(head, v);
          for (std::size_t i = 0; i < body.size(); ++i) {
            p.emplace(body[i], g.constant(body_v[i]));
          }
          return loss_flow(g, p, cfg, sched, batch, seed).total;
        },
        head_v);

    const Layout lay = make_layout(cfg, 0);
    const std::int64_t L = lay.length();
    const std::int64_t K = cfg.tokens(0);
    const std::int64_t C = cfg.token_channels();
    const auto B = static_cast<std::int64_t>(batch.size());
    ModelInput<double> in;
    in.batch = B;
    in.tokens = Tensor<double>({B * L, C});
    in.ids.assign(static_cast<std::size_t>(B * L), -1);
    std::vector<Trajectory<double>> traj;
    for (std::int64_t bb = 0; bb < B; ++bb) {
      const auto& smp = batch[static_cast<std::size_t>(bb)];
      traj.push_back(corrupt(smp.x0[0], sched, seed, smp.id));
      in.ids[static_cast<std::size_t>(bb * L)] = cfg.vocab;
      in.classes.push_back(smp.cls < 0 ? cfg.num_classes : smp.cls);
      for (const auto& ch : lay.chunks) {
        for (std::int64_t k = 0; k < K; ++k) {
          for (std::int64_t c = 0; c < C; ++c) {
            in.tokens.at(bb * L + ch.begin + k, c) = traj.back().level(ch.level).at(k, c);
          }
        }
      }
    }
    Graph<double> g0(false);
    Bound p0;
    for (std::size_t i = 0; i < b.names.size(); ++i) {
      p0.emplace(b.names[i], g0.constant(b.values[i]));
    }
    const Tensor<double> v0 = g0.value(forward(g0, p0, cfg, lay, in, 0, L).v);
    std::vector<std::int64_t> rows;
    std::vector<double> tau, w;
    Tensor<double> state({B * sched.T * K, C}), target({B * sched.T * K, C});
    std::int64_t i = 0;
    for (std::int64_t bb = 0; bb < B; ++bb) {
      const auto id = batch[static_cast<std::size_t>(bb)].id;
      for (int t = sched.T; t >= 1; --t) {
        const Chunk& ch = lay.chunks[static_cast<std::size_t>(lay.find(0, t))];
        const double a = std::sqrt(sched.gamma_at(t)), sg = std::sqrt(1 - sched.gamma_at(t));
        const double ap = std::sqrt(sched.gamma_at(t - 1)), sp = std::sqrt(1 - sched.gamma_at(t - 1));
        const double tt = flow_time_stream(seed, id).uniform(static_cast<std::uint64_t>(t));
        const NoiseStream eps = flow_noise_stream(seed, id, 0, t);
        for (std::int64_t k = 0; k < K; ++k, ++i) {
          rows.push_back(bb * L + ch.begin + k);
          tau.push_back(tt);
          w.push_back(1.0 / static_cast<double>(B * K * C));
          for (std::int64_t c = 0; c < C; ++c) {
            const double x0 = a * traj[static_cast<std::size_t>(bb)].level(t).at(k, c) - sg * v0.at(bb * L + ch.begin + k, c);
            const double gauss = ap * x0 + sp * eps.gaussian(static_cast<std::uint64_t>(k * C + c));
            const double next = traj[static_cast<std::size_t>(bb)].level(t - 1).at(k, c);
            state.at(i, c) = (1 - tt) * gauss + tt * next;
            target.at(i, c) = next - gauss;
          }
        }
      }
    }
    const auto names = b.names;
    run("loss_flow_backbone",
        [=](Graph<double>& g, const std::vector<Var>& v) {
          const Bound p = rebind(names, v);
          const ModelOutput o = forward(g, p, cfg, lay, in, 0, L);
          const Var vel = flow_velocity<double>(g, p, cfg, g.constant(state), ad::gather_rows<double>(g, o.c, rows), tau);
          return ad::weighted_sq_error<double>(g, vel, target, w);
        },
        b.values);
    const double reported = loss_flow(g0, p0, cfg, sched, batch, seed).report.flow;
    const ModelOutput o0 = forward(g0, p0, cfg, lay, in, 0, L);
    const Var vel0 = flow_velocity<double>(g0, p0, cfg, g0.constant(state), ad::gather_rows<double>(g0, o0.c, rows), tau);
    const double rebuilt = g0.value(ad::weighted_sq_error<double>(g0, vel0, target, w)).data[0];
    if (std::abs(rebuilt - reported) > 1e-9 * std::max(1.0, std::abs(reported))) {
      out.back().result.max_rel_error = std::numeric_limits<double>::infinity();
    }
  }
  {
    ModelConfig cfg = tiny(Variant::dart);
    cfg.resolutions = {ResolutionSpec{1, 1, 2}, ResolutionSpec{2, 2, 1}};
    const auto s = schedules_of(cfg);
    loss_case("loss_matryoshka", cfg, 0, [=](Graph<double>& g, const Bound& p, const auto& batch) {
      return loss_matryoshka(g, p, cfg, s, batch, seed);
    });
  }
  {
    ModelConfig cfg = tiny(Variant::dart);
    cfg.vocab = 4;
    cfg.max_text = 3;
    const auto s = schedules_of(cfg);
    loss_case("loss_kaleido", cfg, 3, [=](Graph<double>& g, const Bound& p, const auto& batch) {
      return loss_kaleido(g, p, cfg, s[0], batch, seed);
    });
  }
  {
    const ModelConfig cfg = tiny(Variant::markov);
    const MarkovSchedule m = cosine_markov(cfg.markov_levels);
    loss_case("loss_markov_baseline", cfg, 0, [=](Graph<double>& g, const Bound& p, const auto& batch) {
      return loss_markov_baseline(g, p, cfg, m, LossWeighting::snr_plus_one, batch, seed);
    });
  }
  return out;
}

CausalityReport causality_check(const ModelConfig& cfg, std::uint64_t seed) {
  const auto params = randomized_parameters(cfg, seed);
  const Layout lay = make_layout(cfg, 0);
  const std::int64_t L = lay.length();
  const std::int64_t C = cfg.token_channels();
  ModelInput<float> base;
  base.batch = 1;
  base.tokens = gaussian_like<float>({L, C}, NoiseStream(seed, {0x6361ULL}));
  base.ids.assign(static_cast<std::size_t>(L), -1);
  base.ids[0] = cfg.vocab;
  base.classes = {cfg.num_classes > 0 ? 0 : 0};
  base.time = {0.5};

  auto run = [&](const ModelInput<float>& in) {
    ad::Graph<float> g(false);
    const Bound p = bind(g, params);
    const ModelOutput o = forward(g, p, cfg, lay, in, 0, L);
    return std::pair{g.value(o.v), g.value(o.c)};
  };
  const auto ref = run(base);

  std::vector<std::vector<std::int64_t>> groups;
  for (const auto& ch : lay.chunks) {
    if (cfg.variant == Variant::dart_ar) {
      for (std::int64_t k = 0; k < ch.length; ++k) {
        groups.push_back({ch.begin + k});
      }
    } else {
      std::vector<std::int64_t> g;
      for (std::int64_t k = 0; k < ch.length; ++k) {
        g.push_back(ch.begin + k);
      }
      groups.push_back(g);
    }
  }

  CausalityReport rep;
  const NoiseStream bump(seed, {0x7062ULL});
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    ModelInput<float> in = base;
    for (std::int64_t pos : groups[gi]) {
      for (std::int64_t c = 0; c < C; ++c) {
        in.tokens.at(pos, c) += static_cast<float>(1.0 + bump.gaussian(gi * 1000 + static_cast<std::uint64_t>(pos * C + c)));
      }
    }
    const auto out = run(in);
    for (std::int64_t q = 0; q < L; ++q) {
      bool sees = false;
      for (std::int64_t pos : groups[gi]) {
        sees = sees || lay.mask(q, pos);
      }
      double d = 0;
      for (std::int64_t c = 0; c < C; ++c) {
        d = std::max(d, static_cast<double>(std::abs(out.first.at(q, c) - ref.first.at(q, c))));
      }
      for (std::int64_t c = 0; c < cfg.hidden; ++c) {
        d = std::max(d, static_cast<double>(std::abs(out.second.at(q, c) - ref.second.at(q, c))));
      }
      if (sees) {
        rep.visible_change = std::max(rep.visible_change, d);
      } else {
        rep.hidden_change = std::max(rep.hidden_change, d);
      }
    }
    ++rep.perturbations;
  }
  return rep;
}

double cache_gap(const ParameterStore<float>& params, const ModelConfig& cfg,
                 const std::vector<GammaSchedule>& scheds, SampleOptions opt) {
  opt.use_cache = true;
  const auto a = sample(params, cfg, scheds, opt);
  opt.use_cache = false;
  const auto b = sample(params, cfg, scheds, opt);
  if (a.calls != b.calls || a.text != b.text || a.tokens.size() != b.tokens.size()) {
    return std::numeric_limits<double>::infinity();
  }
  double gap = 0;
  for (std::size_t n = 0; n < a.tokens.size(); ++n) {
    for (std::size_t r = 0; r < a.tokens[n].size(); ++r) {
      for (std::size_t i = 0; i < a.tokens[n][r].data.size(); ++i) {
        gap = std::max(gap, static_cast<double>(std::abs(a.tokens[n][r].data[i] - b.tokens[n][r].data[i])));
      }
    }
  }
  return gap;
}

template std::vector<Sample<float>> random_batch(const ModelConfig&, int, std::uint64_t, int);
template std::vector<Sample<double>> random_batch(const ModelConfig&, int, std::uint64_t, int);

}  // namespace dart
