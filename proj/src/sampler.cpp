// SPDX-License-Identifier: Apache-2.0

#include "dart/sampler.hpp"

#include <algorithm>
#include <cmath>

#include "dart/noising.hpp"

namespace dart {

CfgSchedule parse_cfg_schedule(const std::string& name) {
  if (name == "constant") {
    return CfgSchedule::constant;
  }
  if (name == "linear") {
    return CfgSchedule::linear;
  }
  throw ConfigError("unknown cfg schedule '" + name + "'");
}

double GuidanceSpec::weight_at(int t, int T) const {
  if (scale < 0) {
    throw ConfigError("guidance scale must be non-negative");
  }
  if (schedule == CfgSchedule::constant || T <= 1) {
    return scale;
  }
  const double frac = static_cast<double>(T - t) / static_cast<double>(T - 1);
  return 1.0 + (scale - 1.0) * frac;
}

template <typename S>
Tensor<S> apply_cfg(const Tensor<S>& cond, const Tensor<S>& uncond, double w) {
  if (cond.shape != uncond.shape) {
    throw DimensionError("apply_cfg: shape mismatch");
  }
  if (w == 1.0) {
    return cond;
  }
  if (w == 0.0) {
    return uncond;
  }
  Tensor<S> out(cond.shape);
  const S ws = static_cast<S>(w);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = uncond.data[i] + ws * (cond.data[i] - uncond.data[i]);
  }
  return out;
}

template <typename S>
std::vector<Tensor<S>> SampleOutput<S>::images(const ModelConfig& cfg, int res) const {
  std::vector<Tensor<S>> out;
  const auto& r = cfg.resolutions.at(static_cast<std::size_t>(res));
  for (const auto& t : tokens) {
    out.push_back(unpatchify(t.at(static_cast<std::size_t>(res)), cfg.image_channels, r.height, r.width, cfg.patch));
  }
  return out;
}

namespace {

// Feeds position ranges of one layout, either through a KV cache or by
// recomputing the whole visible prefix at every call.
template <typename S>
class Decoder {
 public:
  struct Step {
    Tensor<S> v;       // [batch * n, C]
    Tensor<S> c;       // [batch * n, hidden]
    Tensor<S> logits;  // [batch * n, vocab]
  };

  Decoder(const ParameterStore<S>& params, const ModelConfig& cfg, const Layout& layout, std::int64_t batch,
          std::vector<std::int64_t> classes, bool use_cache, std::int64_t capacity)
      : params_(params), cfg_(cfg), layout_(&layout), batch_(batch), classes_(std::move(classes)),
        use_cache_(use_cache), capacity_(capacity) {
    if (use_cache_) {
      cache_ = KVCache<S>(cfg, batch, capacity);
    } else {
      tokens_ = Tensor<S>({batch * capacity, cfg.token_channels()});
      ids_.assign(static_cast<std::size_t>(batch * capacity), -1);
    }
    for (const auto& [name, t] : params) {
      if (name.rfind("flow/", 0) == 0) {
        flow_.emplace(name, t);
      }
    }
  }

  // Later layouts must agree with the earlier one on every position already fed.
  void set_layout(const Layout& layout) {
    if (layout.length() > capacity_) {
      throw CacheError("decoder: layout longer than capacity");
    }
    layout_ = &layout;
  }

  std::int64_t length() const { return length_; }
  const std::vector<std::array<std::int64_t, 2>>& calls() const { return calls_; }

  Step feed(std::int64_t begin, std::int64_t end, const Tensor<S>& tokens, const std::vector<std::int64_t>& ids) {
    if (begin != length_) {
      throw CacheError("decoder: positions must be fed in order");
    }
    if (end > capacity_) {
      throw CacheError("decoder: capacity " + std::to_string(capacity_) + " exceeded");
    }
    const std::int64_t n = end - begin;
    const std::int64_t C = cfg_.token_channels();
    calls_.push_back({begin, end});
    ad::Graph<S> g(false);
    const Bound p = dart::bind(g, params_);
    ModelInput<S> in;
    in.batch = batch_;
    in.classes = classes_;
    Step st;
    if (use_cache_) {
      in.tokens = tokens;
      in.ids = ids;
      const ModelOutput o = forward(g, p, cfg_, *layout_, in, begin, end, &cache_);
      st.v = g.value(o.v);
      st.c = g.value(o.c);
      if (cfg_.vocab > 0) {
        st.logits = g.value(o.logits);
      }
    } else {
      for (std::int64_t b = 0; b < batch_; ++b) {
        std::copy_n(tokens.data.begin() + b * n * C, n * C, tokens_.data.begin() + (b * capacity_ + begin) * C);
        std::copy_n(ids.begin() + b * n, n, ids_.begin() + b * capacity_ + begin);
      }
      in.tokens = Tensor<S>({batch_ * end, C});
      in.ids.resize(static_cast<std::size_t>(batch_ * end));
      for (std::int64_t b = 0; b < batch_; ++b) {
        std::copy_n(tokens_.data.begin() + b * capacity_ * C, end * C, in.tokens.data.begin() + b * end * C);
        std::copy_n(ids_.begin() + b * capacity_, end, in.ids.begin() + b * end);
      }
      const ModelOutput o = forward(g, p, cfg_, *layout_, in, 0, end);
      std::vector<std::int64_t> rows;
      for (std::int64_t b = 0; b < batch_; ++b) {
        for (std::int64_t i = begin; i < end; ++i) {
          rows.push_back(b * end + i);
        }
      }
      st.v = g.value(ad::gather_rows<S>(g, o.v, rows));
      st.c = g.value(ad::gather_rows<S>(g, o.c, rows));
      if (cfg_.vocab > 0) {
        st.logits = g.value(ad::gather_rows<S>(g, o.logits, rows));
      }
    }
    length_ = end;
    return st;
  }

  Tensor<S> velocity(const Tensor<S>& state, const Tensor<S>& c, S tau) {
    ad::Graph<S> g(false);
    const Bound p = dart::bind(g, flow_);
    const std::vector<S> taus(static_cast<std::size_t>(state.rows()), tau);
    return g.value(flow_velocity<S>(g, p, cfg_, g.constant(state), g.constant(c), taus));
  }

 private:
  const ParameterStore<S>& params_;
  ParameterStore<S> flow_;
  const ModelConfig& cfg_;
  const Layout* layout_;
  std::int64_t batch_;
  std::vector<std::int64_t> classes_;
  bool use_cache_;
  std::int64_t capacity_;
  std::int64_t length_ = 0;
  KVCache<S> cache_;
  Tensor<S> tokens_;
  std::vector<std::int64_t> ids_;
  std::vector<std::array<std::int64_t, 2>> calls_;
};

bool is_guided(const ModelConfig& cfg, const SampleOptions& opt) {
  return opt.cls >= 0 && cfg.num_classes > 0 && opt.guidance.scale != 1.0;
}

std::vector<std::int64_t> batch_classes(const ModelConfig& cfg, const SampleOptions& opt, int num, bool guided) {
  if (opt.cls > cfg.num_classes) {
    throw ConfigError("class id " + std::to_string(opt.cls) + " out of range");
  }
  const std::int64_t cls = opt.cls < 0 ? cfg.num_classes : opt.cls;
  std::vector<std::int64_t> out(static_cast<std::size_t>(num), cls);
  if (guided) {
    out.resize(static_cast<std::size_t>(2 * num), cfg.num_classes);
  }
  return out;
}

// Replicates [num * n, C] rows for the unconditional half when guided.
template <typename S>
Tensor<S> duplicate(const Tensor<S>& x, bool guided) {
  if (!guided) {
    return x;
  }
  Tensor<S> out({2 * x.rows(), x.cols()});
  std::copy(x.data.begin(), x.data.end(), out.data.begin());
  std::copy(x.data.begin(), x.data.end(), out.data.begin() + x.size());
  return out;
}

// Clean estimate from v at rows `rows` of `v` given noisy reference rows, guided if requested.
template <typename S>
Tensor<S> guided_x0(const Tensor<S>& ref, const Tensor<S>& v, const std::vector<std::int64_t>& rows,
                    std::int64_t uncond_offset, bool guided, double alpha, double sigma, double w) {
  const std::int64_t C = ref.cols();
  const S a = static_cast<S>(alpha);
  const S s = static_cast<S>(sigma);
  Tensor<S> cond({ref.rows(), C}), uncond({ref.rows(), C});
  for (std::int64_t i = 0; i < ref.rows(); ++i) {
    for (std::int64_t c = 0; c < C; ++c) {
      cond.at(i, c) = a * ref.at(i, c) - s * v.at(rows[static_cast<std::size_t>(i)], c);
      if (guided) {
        uncond.at(i, c) = a * ref.at(i, c) - s * v.at(rows[static_cast<std::size_t>(i)] + uncond_offset, c);
      }
    }
  }
  return guided ? apply_cfg(cond, uncond, w) : cond;
}

template <typename S>
void renoise(Tensor<S>& x, const Tensor<S>& x0, double gamma, std::uint64_t seed, int first_sample, int num,
             std::int64_t K, int level) {
  const std::int64_t C = x0.cols();
  const S a = static_cast<S>(std::sqrt(gamma));
  const S s = static_cast<S>(std::sqrt(1.0 - gamma));
  for (int n = 0; n < num; ++n) {
    const NoiseStream st = level_stream(seed, static_cast<std::uint64_t>(first_sample + n), level);
    for (std::int64_t k = 0; k < K; ++k) {
      for (std::int64_t c = 0; c < C; ++c) {
        const std::int64_t r = n * K + k;
        x.at(r, c) = gamma == 1.0 ? x0.at(r, c)
                                  : a * x0.at(r, c) + s * static_cast<S>(st.gaussian(static_cast<std::uint64_t>(k * C + c)));
      }
    }
  }
}

template <typename S>
Tensor<S> initial_noise(std::uint64_t seed, int first_sample, int num, std::int64_t K, std::int64_t C, int level) {
  Tensor<S> x({num * K, C});
  for (int n = 0; n < num; ++n) {
    const NoiseStream st = level_stream(seed, static_cast<std::uint64_t>(first_sample + n), level);
    for (std::int64_t i = 0; i < K * C; ++i) {
      x.data[static_cast<std::size_t>(n * K * C + i)] = static_cast<S>(st.gaussian(static_cast<std::uint64_t>(i)));
    }
  }
  return x;
}

// Chunk-level decoding of every resolution of `lay`; results go to out.tokens[first_sample + n].
template <typename S>
void image_loop(Decoder<S>& dec, const ModelConfig& cfg, const Layout& lay, const std::vector<GammaSchedule>& scheds,
                const SampleOptions& opt, int first_sample, int num, bool guided, bool flow, SampleOutput<S>& out) {
  const std::int64_t C = cfg.token_channels();
  for (int r = 0; r < cfg.num_resolutions(); ++r) {
    const auto& sc = scheds.at(static_cast<std::size_t>(r));
    const std::int64_t K = cfg.tokens(r);
    const std::uint64_t seed = resolution_seed(opt.seed, r);
    Tensor<S> x = initial_noise<S>(seed, first_sample, num, K, C, sc.T);
    std::vector<std::int64_t> rows;
    for (std::int64_t i = 0; i < num * K; ++i) {
      rows.push_back(i);
    }
    const std::int64_t batch = guided ? 2 * num : num;
    const std::vector<std::int64_t> ids(static_cast<std::size_t>(batch * K), -1);
    for (int t = sc.T; t >= 1; --t) {
      const Chunk& ch = lay.chunks[static_cast<std::size_t>(lay.find(r, t))];
      const auto step = dec.feed(ch.begin, ch.begin + K, duplicate(x, guided), ids);
      const Tensor<S> x0 = guided_x0(x, step.v, rows, num * K, guided, std::sqrt(sc.gamma_at(t)),
                                     std::sqrt(1.0 - sc.gamma_at(t)), opt.guidance.weight_at(t, sc.T));
      Tensor<S> next(x.shape);
      renoise(next, x0, sc.gamma_at(t - 1), seed, first_sample, num, K, t - 1);
      if (flow && opt.fm_steps > 0) {
        Tensor<S> ctx({num * K, cfg.hidden});
        std::copy_n(step.c.data.begin(), ctx.size(), ctx.data.begin());
        const S dt = static_cast<S>(1.0 / opt.fm_steps);
        for (int i = 0; i < opt.fm_steps; ++i) {
          const Tensor<S> vel = dec.velocity(next, ctx, static_cast<S>(static_cast<double>(i) / opt.fm_steps));
          for (std::size_t j = 0; j < next.data.size(); ++j) {
            next.data[j] += dt * vel.data[j];
          }
        }
      }
      x = std::move(next);
    }
    for (int n = 0; n < num; ++n) {
      Tensor<S> tok({K, C});
      std::copy_n(x.data.begin() + n * K * C, K * C, tok.data.begin());
      out.tokens[static_cast<std::size_t>(first_sample + n)].push_back(std::move(tok));
    }
  }
}

void require_variant(const ModelConfig& cfg, std::initializer_list<Variant> ok, const char* what) {
  for (Variant v : ok) {
    if (cfg.variant == v) {
      return;
    }
  }
  throw ConfigError(std::string(what) + ": not available for variant " + to_string(cfg.variant));
}

void check_schedules(const ModelConfig& cfg, const std::vector<GammaSchedule>& scheds) {
  if (static_cast<int>(scheds.size()) != cfg.num_resolutions()) {
    throw ConfigError("sampler: schedule count does not match the resolutions");
  }
  for (int r = 0; r < cfg.num_resolutions(); ++r) {
    if (scheds[static_cast<std::size_t>(r)].T != cfg.levels(r)) {
      throw ConfigError("sampler: schedule level count does not match the model");
    }
  }
}

template <typename S>
SampleOutput<S> chunk_sampler(const ParameterStore<S>& params, const ModelConfig& cfg,
                              const std::vector<GammaSchedule>& scheds, const SampleOptions& opt, bool flow) {
  check_schedules(cfg, scheds);
  SampleOutput<S> out;
  out.tokens.resize(static_cast<std::size_t>(std::max(opt.num, 0)));
  if (opt.num <= 0) {
    return out;
  }
  const bool guided = is_guided(cfg, opt);
  const Layout lay = make_layout(cfg, 0);
  Decoder<S> dec(params, cfg, lay, guided ? 2 * opt.num : opt.num, batch_classes(cfg, opt, opt.num, guided),
                 opt.use_cache, lay.length());
  const std::int64_t batch = guided ? 2 * opt.num : opt.num;
  Tensor<S> bos({batch, cfg.token_channels()});
  dec.feed(0, 1, bos, std::vector<std::int64_t>(static_cast<std::size_t>(batch), cfg.vocab));
  image_loop(dec, cfg, lay, scheds, opt, 0, opt.num, guided, flow, out);
  out.calls = dec.calls();
  return out;
}

}  // namespace

template <typename S>
SampleOutput<S> sample_dart(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                            const SampleOptions& opt) {
  require_variant(cfg, {Variant::dart, Variant::dart_fm}, "sample_dart");
  return chunk_sampler(params, cfg, {sched}, opt, false);
}

template <typename S>
SampleOutput<S> sample_dart_fm(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                               const SampleOptions& opt) {
  require_variant(cfg, {Variant::dart_fm}, "sample_dart_fm");
  return chunk_sampler(params, cfg, {sched}, opt, true);
}

template <typename S>
SampleOutput<S> sample_matryoshka(const ParameterStore<S>& params, const ModelConfig& cfg,
                                  const std::vector<GammaSchedule>& scheds, const SampleOptions& opt) {
  require_variant(cfg, {Variant::dart, Variant::dart_fm}, "sample_matryoshka");
  return chunk_sampler(params, cfg, scheds, opt, cfg.variant == Variant::dart_fm);
}

template <typename S>
SampleOutput<S> sample_dart_ar(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                               const SampleOptions& opt) {
  require_variant(cfg, {Variant::dart_ar}, "sample_dart_ar");
  check_schedules(cfg, {sched});
  SampleOutput<S> out;
  const int num = opt.num;
  out.tokens.resize(static_cast<std::size_t>(std::max(num, 0)));
  if (num <= 0) {
    return out;
  }
  const bool guided = is_guided(cfg, opt);
  const Layout lay = make_layout(cfg, 0);
  const std::int64_t batch = guided ? 2 * num : num;
  const std::int64_t K = cfg.tokens(0);
  const std::int64_t C = cfg.token_channels();
  Decoder<S> dec(params, cfg, lay, batch, batch_classes(cfg, opt, num, guided), opt.use_cache, lay.length());
  dec.feed(0, 1, Tensor<S>({batch, C}), std::vector<std::int64_t>(static_cast<std::size_t>(batch), cfg.vocab));

  const int T = sched.T;
  Tensor<S> x = initial_noise<S>(opt.seed, 0, num, K, C, T);
  const Chunk& top = lay.chunks[static_cast<std::size_t>(lay.find(0, T))];
  auto step = dec.feed(top.begin, top.begin + K, duplicate(x, guided),
                       std::vector<std::int64_t>(static_cast<std::size_t>(batch * K), -1));
  std::int64_t width = K;  // rows per sample in the latest call
  const std::vector<std::int64_t> one_id(static_cast<std::size_t>(batch), -1);
  for (int t = T; t >= 1; --t) {
    Tensor<S> next({num * K, C});
    const double gp = sched.gamma_at(t - 1);
    const Chunk* nch = (t > 1 || K > 1) ? &lay.chunks[static_cast<std::size_t>(lay.find(0, t - 1))] : nullptr;
    for (std::int64_t k = 0; k < K; ++k) {
      Tensor<S> ref({num, C});
      std::vector<std::int64_t> rows;
      for (int n = 0; n < num; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
          ref.at(n, c) = x.at(n * K + k, c);
        }
        rows.push_back(n * width + width - 1);
      }
      const Tensor<S> x0 = guided_x0(ref, step.v, rows, num * width, guided, std::sqrt(sched.gamma_at(t)),
                                     std::sqrt(1.0 - sched.gamma_at(t)), opt.guidance.weight_at(t, T));
      Tensor<S> tok({num, C});
      for (int n = 0; n < num; ++n) {
        const NoiseStream st = level_stream(opt.seed, static_cast<std::uint64_t>(n), t - 1);
        for (std::int64_t c = 0; c < C; ++c) {
          const S v = gp == 1.0 ? x0.at(n, c)
                                : static_cast<S>(std::sqrt(gp)) * x0.at(n, c) +
                                      static_cast<S>(std::sqrt(1.0 - gp)) *
                                          static_cast<S>(st.gaussian(static_cast<std::uint64_t>(k * C + c)));
          tok.at(n, c) = v;
          next.at(n * K + k, c) = v;
        }
      }
      const bool more = t > 1 || k + 1 < K;
      if (more) {
        step = dec.feed(nch->begin + k, nch->begin + k + 1, duplicate(tok, guided), one_id);
        width = 1;
      }
    }
    x = std::move(next);
  }
  for (int n = 0; n < num; ++n) {
    Tensor<S> tok({K, C});
    std::copy_n(x.data.begin() + n * K * C, K * C, tok.data.begin());
    out.tokens[static_cast<std::size_t>(n)].push_back(std::move(tok));
  }
  out.calls = dec.calls();
  return out;
}

template <typename S>
SampleOutput<S> sample_kaleido(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                               const SampleOptions& opt) {
  require_variant(cfg, {Variant::dart, Variant::dart_fm}, "sample_kaleido");
  check_schedules(cfg, {sched});
  if (opt.temperature < 0) {
    throw ConfigError("sample_kaleido: temperature must be non-negative");
  }
  SampleOutput<S> out;
  out.tokens.resize(static_cast<std::size_t>(std::max(opt.num, 0)));
  const Layout full = make_layout(cfg, cfg.max_text);
  const std::int64_t C = cfg.token_channels();
  for (int n = 0; n < opt.num; ++n) {
    SampleOptions one = opt;
    one.cls = -1;
    Decoder<S> dec(params, cfg, full, 1, {cfg.num_classes}, opt.use_cache, full.length());
    std::vector<std::int64_t> text;
    bool ended = cfg.vocab == 0;
    auto step = dec.feed(0, 1, Tensor<S>({1, C}), {cfg.vocab});
    const NoiseStream pick(opt.seed, {0x7478ULL, static_cast<std::uint64_t>(n)});
    while (!ended && static_cast<int>(text.size()) < cfg.max_text) {
      std::int64_t tok = 0;
      if (text.size() < opt.prompt.size()) {
        tok = opt.prompt[text.size()];
      } else {
        const std::int64_t V = cfg.vocab;
        const S* row = step.logits.data.data() + (step.logits.rows() - 1) * V;
        if (opt.temperature == 0.0) {
          tok = std::max_element(row, row + V) - row;
        } else {
          std::vector<double> pr(static_cast<std::size_t>(V));
          const double mx = static_cast<double>(*std::max_element(row, row + V));
          double z = 0;
          for (std::int64_t j = 0; j < V; ++j) {
            pr[static_cast<std::size_t>(j)] = std::exp((static_cast<double>(row[j]) - mx) / opt.temperature);
            z += pr[static_cast<std::size_t>(j)];
          }
          double u = pick.uniform(text.size()) * z;
          tok = V - 1;
          for (std::int64_t j = 0; j < V; ++j) {
            u -= pr[static_cast<std::size_t>(j)];
            if (u < 0) {
              tok = j;
              break;
            }
          }
        }
      }
      text.push_back(tok);
      const auto p = static_cast<std::int64_t>(text.size());
      step = dec.feed(p, p + 1, Tensor<S>({1, C}), {tok});
      ended = tok == kEndToken;
    }
    out.truncated.push_back(!ended);
    const Layout lay = make_layout(cfg, static_cast<int>(text.size()));
    dec.set_layout(lay);
    image_loop(dec, cfg, lay, {sched}, one, n, 1, false, cfg.variant == Variant::dart_fm, out);
    out.text.push_back(std::move(text));
    for (const auto& c : dec.calls()) {
      out.calls.push_back(c);
    }
  }
  return out;
}

template <typename S>
SampleOutput<S> sample_markov(const ParameterStore<S>& params, const ModelConfig& cfg, const MarkovSchedule& m,
                              int steps, const SampleOptions& opt) {
  require_variant(cfg, {Variant::markov}, "sample_markov");
  if (m.T != cfg.markov_levels || steps < 1 || m.T % steps != 0) {
    throw ConfigError("sample_markov: steps must divide the " + std::to_string(m.T) + " levels");
  }
  SampleOutput<S> out;
  const int num = opt.num;
  out.tokens.resize(static_cast<std::size_t>(std::max(num, 0)));
  if (num <= 0) {
    return out;
  }
  const bool guided = is_guided(cfg, opt);
  const std::int64_t batch = guided ? 2 * num : num;
  const std::int64_t K = cfg.tokens(0);
  const std::int64_t C = cfg.token_channels();
  const Layout lay = make_layout(cfg, 0);
  const std::int64_t L = lay.length();
  const std::int64_t begin = lay.chunks.front().begin;
  const int stride = m.T / steps;
  const auto classes = batch_classes(cfg, opt, num, guided);

  Tensor<S> x({num * K, C});
  for (int n = 0; n < num; ++n) {
    const NoiseStream st(opt.seed, {0x6d73ULL, static_cast<std::uint64_t>(n), 0});
    for (std::int64_t i = 0; i < K * C; ++i) {
      x.data[static_cast<std::size_t>(n * K * C + i)] = static_cast<S>(st.gaussian(static_cast<std::uint64_t>(i)));
    }
  }
  std::vector<std::int64_t> rows;
  for (int n = 0; n < num; ++n) {
    for (std::int64_t k = 0; k < K; ++k) {
      rows.push_back(n * L + begin + k);
    }
  }
  for (int i = steps; i >= 1; --i) {
    const int t = i * stride;
    const int s = (i - 1) * stride;
    const double at = m.alpha_bar_at(t);
    const double as = m.alpha_bar_at(s);
    ModelInput<S> in;
    in.batch = batch;
    in.classes = classes;
    in.time.assign(static_cast<std::size_t>(batch), static_cast<double>(t) / m.T);
    in.tokens = Tensor<S>({batch * L, C});
    in.ids.assign(static_cast<std::size_t>(batch * L), -1);
    for (std::int64_t b = 0; b < batch; ++b) {
      in.ids[static_cast<std::size_t>(b * L)] = cfg.vocab;
      const std::int64_t n = b % num;
      std::copy_n(x.data.begin() + n * K * C, K * C, in.tokens.data.begin() + (b * L + begin) * C);
    }
    ad::Graph<S> g(false);
    const Bound p = dart::bind(g, params);
    const ModelOutput o = forward(g, p, cfg, lay, in, 0, L);
    out.calls.push_back({0, L});
    const Tensor<S> x0 = guided_x0(x, g.value(o.v), rows, num * L, guided, std::sqrt(at), std::sqrt(1.0 - at),
                                   opt.guidance.weight_at(i, steps));
    if (s == 0) {
      x = x0;
      break;
    }
    const double a_ts = at / as;
    const double c0 = std::sqrt(as) * (1.0 - a_ts) / (1.0 - at);
    const double ct = std::sqrt(a_ts) * (1.0 - as) / (1.0 - at);
    const double sd = std::sqrt((1.0 - as) * (1.0 - a_ts) / (1.0 - at));
    for (int n = 0; n < num; ++n) {
      const NoiseStream st(opt.seed, {0x6d73ULL, static_cast<std::uint64_t>(n), static_cast<std::uint64_t>(i)});
      for (std::int64_t j = 0; j < K * C; ++j) {
        const auto idx = static_cast<std::size_t>(n * K * C + j);
        x.data[idx] = static_cast<S>(c0 * x0.data[idx] + ct * x.data[idx] +
                                     sd * st.gaussian(static_cast<std::uint64_t>(j)));
      }
    }
  }
  for (int n = 0; n < num; ++n) {
    Tensor<S> tok({K, C});
    std::copy_n(x.data.begin() + n * K * C, K * C, tok.data.begin());
    out.tokens[static_cast<std::size_t>(n)].push_back(std::move(tok));
  }
  return out;
}

template <typename S>
SampleOutput<S> sample(const ParameterStore<S>& params, const ModelConfig& cfg, const std::vector<GammaSchedule>& scheds,
                       const SampleOptions& opt, int steps) {
  switch (cfg.variant) {
    case Variant::markov:
      return sample_markov(params, cfg, cosine_markov(cfg.markov_levels), steps > 0 ? steps : cfg.markov_levels, opt);
    case Variant::dart_ar:
      return sample_dart_ar(params, cfg, scheds.at(0), opt);
    case Variant::dart:
    case Variant::dart_fm:
      if (cfg.vocab > 0) {
        return sample_kaleido(params, cfg, scheds.at(0), opt);
      }
      return chunk_sampler(params, cfg, scheds, opt, cfg.variant == Variant::dart_fm);
  }
  throw ConfigError("sample: unknown variant");
}

#define DART_SAMPLER(S)                                                                                        \
  template Tensor<S> apply_cfg(const Tensor<S>&, const Tensor<S>&, double);                                    \
  template struct SampleOutput<S>;                                                                             \
  template SampleOutput<S> sample_dart(const ParameterStore<S>&, const ModelConfig&, const GammaSchedule&,     \
                                       const SampleOptions&);                                                  \
  template SampleOutput<S> sample_dart_ar(const ParameterStore<S>&, const ModelConfig&, const GammaSchedule&,  \
                                          const SampleOptions&);                                               \
  template SampleOutput<S> sample_dart_fm(const ParameterStore<S>&, const ModelConfig&, const GammaSchedule&,  \
                                          const SampleOptions&);                                               \
  template SampleOutput<S> sample_matryoshka(const ParameterStore<S>&, const ModelConfig&,                     \
                                             const std::vector<GammaSchedule>&, const SampleOptions&);         \
  template SampleOutput<S> sample_kaleido(const ParameterStore<S>&, const ModelConfig&, const GammaSchedule&,  \
                                          const SampleOptions&);                                               \
  template SampleOutput<S> sample_markov(const ParameterStore<S>&, const ModelConfig&, const MarkovSchedule&,  \
                                         int, const SampleOptions&);                                           \
  template SampleOutput<S> sample(const ParameterStore<S>&, const ModelConfig&, const std::vector<GammaSchedule>&, \
                                  const SampleOptions&, int);

DART_SAMPLER(float)
DART_SAMPLER(double)

}  // namespace dart
