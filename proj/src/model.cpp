// SPDX-License-Identifier: Apache-2.0

#include "dart/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "dart/rng.hpp"

namespace dart {

Variant parse_variant(const std::string& name) {
  if (name == "dart") {
    return Variant::dart;
  }
  if (name == "dart-ar" || name == "ar") {
    return Variant::dart_ar;
  }
  if (name == "dart-fm" || name == "fm") {
    return Variant::dart_fm;
  }
  if (name == "markov") {
    return Variant::markov;
  }
  throw ConfigError("unknown variant '" + name + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::dart:
      return "dart";
    case Variant::dart_ar:
      return "dart-ar";
    case Variant::dart_fm:
      return "dart-fm";
    case Variant::markov:
      return "markov";
  }
  return "?";
}

// --- config -------------------------------------------------------------------

namespace {

int round_even(double x) { return 2 * static_cast<int>(std::lround(x / 2.0)); }

}  // namespace

int ModelConfig::ffn() const {
  if (ffn_hidden > 0) {
    return ffn_hidden;
  }
  const int raw = (8 * hidden + 2) / 3;
  return (raw + 7) / 8 * 8;
}

int ModelConfig::total_levels() const {
  int tot = 0;
  for (const auto& r : resolutions) {
    tot += r.levels;
  }
  return tot;
}

int ModelConfig::ratio(int res) const {
  const int r0 = grid_rows(0);
  const int c0 = grid_cols(0);
  const int ri = grid_rows(res);
  const int ci = grid_cols(res);
  if (ri % r0 != 0 || ci % c0 != 0 || ri / r0 != ci / c0) {
    throw ConfigError("resolution " + std::to_string(res) + " is not an integer upsampling of resolution 0");
  }
  return ri / r0;
}

std::array<int, 3> ModelConfig::rope_axes() const {
  if (rope_dims[0] + rope_dims[1] + rope_dims[2] > 0) {
    return rope_dims;
  }
  const int d = head_dim();
  const int level = round_even(d / 4.0);
  const int row = round_even((d - level) / 2.0);
  return {level, row, d - level - row};
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (layers < 1 || hidden < 1 || heads < 1) {
    fail("layers, hidden and heads must be positive");
  }
  if (hidden % heads != 0 || head_dim() % 2 != 0) {
    fail("hidden / heads must be an even integer");
  }
  const auto ax = rope_axes();
  if (ax[0] + ax[1] + ax[2] != head_dim()) {
    fail("rope_dims must sum to the head dimension");
  }
  for (int a : ax) {
    if (a < 0 || a % 2 != 0) {
      fail("rope_dims entries must be even and non-negative");
    }
  }
  if (image_channels < 1 || patch < 1) {
    fail("image_channels and patch must be positive");
  }
  if (resolutions.empty()) {
    fail("at least one resolution is required");
  }
  for (const auto& r : resolutions) {
    if (r.height < 1 || r.width < 1 || r.levels < 1) {
      fail("resolution extents and levels must be positive");
    }
    if (r.height % patch != 0 || r.width % patch != 0) {
      fail("resolution " + std::to_string(r.height) + "x" + std::to_string(r.width) + " not divisible by patch " +
           std::to_string(patch));
    }
  }
  for (int i = 1; i < num_resolutions(); ++i) {
    if (ratio(i) <= ratio(i - 1)) {
      fail("resolutions must be strictly ascending");
    }
  }
  if (num_resolutions() > 1 && (variant == Variant::dart_ar || variant == Variant::markov)) {
    fail("multiple resolutions require variant dart or dart-fm");
  }
  if (vocab > 0 && max_text < 1) {
    fail("a vocabulary needs max_text >= 1");
  }
  if (num_classes < 0 || vocab < 0 || max_text < 0 || flow_blocks < 1 || markov_levels < 1) {
    fail("num_classes, vocab, flow_blocks and markov_levels out of range");
  }
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json res = nlohmann::json::array();
  for (const auto& r : resolutions) {
    res.push_back({{"height", r.height}, {"width", r.width}, {"levels", r.levels}});
  }
  return {{"variant", to_string(variant)},
          {"layers", layers},
          {"hidden", hidden},
          {"heads", heads},
          {"ffn_hidden", ffn_hidden},
          {"image_channels", image_channels},
          {"patch", patch},
          {"resolutions", res},
          {"rope_dims", rope_dims},
          {"rope_base", rope_base},
          {"per_head_rmsnorm", per_head_rmsnorm},
          {"num_classes", num_classes},
          {"vocab", vocab},
          {"max_text", max_text},
          {"flow_hidden", flow_hidden},
          {"flow_blocks", flow_blocks},
          {"markov_levels", markov_levels}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  for (const auto& [key, val] : j.items()) {
    if (key == "variant") {
      c.variant = parse_variant(val.get<std::string>());
    } else if (key == "layers") {
      c.layers = val.get<int>();
    } else if (key == "hidden") {
      c.hidden = val.get<int>();
    } else if (key == "heads") {
      c.heads = val.get<int>();
    } else if (key == "ffn_hidden") {
      c.ffn_hidden = val.get<int>();
    } else if (key == "image_channels") {
      c.image_channels = val.get<int>();
    } else if (key == "patch") {
      c.patch = val.get<int>();
    } else if (key == "resolutions") {
      c.resolutions.clear();
      for (const auto& r : val) {
        ResolutionSpec spec;
        for (const auto& [rk, rv] : r.items()) {
          if (rk == "height") {
            spec.height = rv.get<int>();
          } else if (rk == "width") {
            spec.width = rv.get<int>();
          } else if (rk == "levels") {
            spec.levels = rv.get<int>();
          } else {
            throw ConfigError("unknown resolution key '" + rk + "'");
          }
        }
        c.resolutions.push_back(spec);
      }
    } else if (key == "rope_dims") {
      c.rope_dims = val.get<std::array<int, 3>>();
    } else if (key == "rope_base") {
      c.rope_base = val.get<double>();
    } else if (key == "per_head_rmsnorm") {
      c.per_head_rmsnorm = val.get<bool>();
    } else if (key == "num_classes") {
      c.num_classes = val.get<int>();
    } else if (key == "vocab") {
      c.vocab = val.get<int>();
    } else if (key == "max_text") {
      c.max_text = val.get<int>();
    } else if (key == "flow_hidden") {
      c.flow_hidden = val.get<int>();
    } else if (key == "flow_blocks") {
      c.flow_blocks = val.get<int>();
    } else if (key == "markov_levels") {
      c.markov_levels = val.get<int>();
    } else {
      throw ConfigError("unknown model key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// --- layout -------------------------------------------------------------------

int Layout::find(int res, int level) const {
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    if (chunks[i].res == res && chunks[i].level == level) {
      return static_cast<int>(i);
    }
  }
  throw DimensionError("layout has no chunk (res " + std::to_string(res) + ", level " + std::to_string(level) + ")");
}

std::array<double, 2> spatial_position(const ModelConfig& cfg, int res, int i, int j) {
  const double r = static_cast<double>(cfg.ratio(res));
  return {i / r, j / r};
}

Layout make_layout(const ModelConfig& cfg, int text_tokens) {
  if (text_tokens < 0 || text_tokens > cfg.max_text) {
    throw DimensionError("text length " + std::to_string(text_tokens) + " outside [0, " + std::to_string(cfg.max_text) +
                         "]");
  }
  Layout lay;
  lay.prefix = 1 + text_tokens;
  const double top = cfg.total_levels();
  std::vector<std::int64_t> group;
  for (std::int64_t n = 0; n < lay.prefix; ++n) {
    lay.pos.push_back({top + 1.0 + cfg.max_text - static_cast<double>(n), 0.0, 0.0});
    lay.chunk_of.push_back(-1);
    lay.token_of.push_back(static_cast<int>(n));
    group.push_back(n);
  }
  auto add_chunk = [&](int res, int level, double level_pos, int count) {
    Chunk ch{res, level, lay.length(), count};
    const int idx = static_cast<int>(lay.chunks.size());
    const int cols = cfg.grid_cols(res);
    for (int k = 0; k < count; ++k) {
      const auto sp = spatial_position(cfg, res, k / cols, k % cols);
      lay.pos.push_back({level_pos, sp[0], sp[1]});
      lay.chunk_of.push_back(idx);
      lay.token_of.push_back(k);
      group.push_back(cfg.variant == Variant::dart_ar ? lay.length() - 1 : lay.prefix + idx);
    }
    lay.chunks.push_back(ch);
  };
  if (cfg.variant == Variant::markov) {
    add_chunk(0, 1, 1.0, cfg.tokens(0));
  } else {
    int above = cfg.total_levels();
    for (int r = 0; r < cfg.num_resolutions(); ++r) {
      above -= cfg.levels(r);
      for (int t = cfg.levels(r); t >= 1; --t) {
        add_chunk(r, t, static_cast<double>(t + above), cfg.tokens(r));
      }
    }
    if (cfg.variant == Variant::dart_ar && cfg.tokens(0) > 1) {
      add_chunk(0, 0, 0.0, cfg.tokens(0) - 1);
    }
  }
  const std::int64_t L = lay.length();
  lay.ref_of.resize(static_cast<std::size_t>(L));
  std::iota(lay.ref_of.begin(), lay.ref_of.end(), std::int64_t{0});
  if (cfg.variant == Variant::dart_ar) {
    for (const auto& ch : lay.chunks) {
      if (ch.level < 1) {
        continue;
      }
      // Token k of level t-1 is read at the last position of chunk t (k = 0)
      // or at token k-1 of chunk t-1, against token k of chunk t.
      lay.ref_of[static_cast<std::size_t>(ch.begin + ch.length - 1)] = ch.begin;
      const auto next = std::find_if(lay.chunks.begin(), lay.chunks.end(), [&](const Chunk& c) {
        return c.res == ch.res && c.level == ch.level - 1;
      });
      if (next != lay.chunks.end()) {
        for (std::int64_t k = 1; k < ch.length; ++k) {
          lay.ref_of[static_cast<std::size_t>(next->begin + k - 1)] = ch.begin + k;
        }
      }
    }
  }
  lay.mask = BoolMatrix(L, L);
  for (std::int64_t q = 0; q < L; ++q) {
    for (std::int64_t k = 0; k < L; ++k) {
      lay.mask.set(q, k, group[static_cast<std::size_t>(k)] <= group[static_cast<std::size_t>(q)]);
    }
  }
  return lay;
}

BoolMatrix build_mask(int T, int K, Variant variant) {
  if (T < 1 || K < 1) {
    throw DimensionError("build_mask needs T, K >= 1");
  }
  const std::int64_t L = static_cast<std::int64_t>(T) * K;
  BoolMatrix m(L, L);
  for (std::int64_t q = 0; q < L; ++q) {
    for (std::int64_t k = 0; k < L; ++k) {
      m.set(q, k, variant == Variant::dart_ar ? k <= q : k / K <= q / K);
    }
  }
  return m;
}

std::vector<double> rope_phases(const ModelConfig& cfg, double level, double row, double col) {
  const auto ax = cfg.rope_axes();
  const double p[3] = {level, row, col};
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(cfg.head_dim() / 2));
  for (int a = 0; a < 3; ++a) {
    for (int i = 0; i < ax[a] / 2; ++i) {
      out.push_back(p[a] * std::pow(cfg.rope_base, -2.0 * i / ax[a]));
    }
  }
  return out;
}

// --- parameters -----------------------------------------------------------------

std::map<std::string, Shape> parameter_manifest(const ModelConfig& cfg) {
  cfg.validate();
  const std::int64_t h = cfg.hidden;
  const std::int64_t C = cfg.token_channels();
  const std::int64_t f = cfg.ffn();
  std::map<std::string, Shape> m;
  m["embed/in.w"] = {C, h};
  m["embed/in.b"] = {h};
  if (cfg.variant == Variant::dart_ar) {
    m["embed/ref.w"] = {C, h};
  }
  m["embed/tokens"] = {cfg.vocab + 1, h};
  m["embed/class"] = {cfg.num_classes + 1, h};
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string b = "block" + std::to_string(l) + "/";
    m[b + "ada.w"] = {h, 6 * h};
    m[b + "ada.b"] = {6 * h};
    for (const char* w : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
      m[b + w] = {h, h};
    }
    if (cfg.per_head_rmsnorm) {
      m[b + "q_norm"] = {cfg.head_dim()};
      m[b + "k_norm"] = {cfg.head_dim()};
    }
    m[b + "ffn.w1"] = {h, f};
    m[b + "ffn.w3"] = {h, f};
    m[b + "ffn.w2"] = {f, h};
  }
  m["final/ada.w"] = {h, 2 * h};
  m["final/ada.b"] = {2 * h};
  m["head/v.w"] = {h, C};
  m["head/v.b"] = {C};
  if (cfg.vocab > 0) {
    m["head/logits.w"] = {h, cfg.vocab};
  }
  if (cfg.variant == Variant::dart_fm) {
    const std::int64_t fh = cfg.flow_width();
    m["flow/in.w"] = {C, fh};
    m["flow/in.b"] = {fh};
    m["flow/cond.w"] = {h, fh};
    m["flow/cond.b"] = {fh};
    m["flow/time.w"] = {kFlowTimeDim, fh};
    m["flow/time.b"] = {fh};
    for (int i = 0; i < cfg.flow_blocks; ++i) {
      const std::string b = "flow/block" + std::to_string(i) + "/";
      m[b + "ada.w"] = {fh, 3 * fh};
      m[b + "ada.b"] = {3 * fh};
      m[b + "fc1.w"] = {fh, fh};
      m[b + "fc1.b"] = {fh};
      m[b + "fc2.w"] = {fh, fh};
      m[b + "fc2.b"] = {fh};
    }
    m["flow/final/ada.w"] = {fh, 2 * fh};
    m["flow/final/ada.b"] = {2 * fh};
    m["flow/final/out.w"] = {fh, C};
    m["flow/final/out.b"] = {C};
  }
  return m;
}

std::int64_t count_parameters(const std::map<std::string, Shape>& manifest, const std::string& prefix) {
  std::int64_t n = 0;
  for (const auto& [name, shape] : manifest) {
    if (name.rfind(prefix, 0) == 0) {
      n += numel(shape);
    }
  }
  return n;
}

std::int64_t count_parameters(const ParameterStore<float>& store) {
  std::int64_t n = 0;
  for (const auto& [name, t] : store) {
    n += t.size();
  }
  return n;
}

namespace {


bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool zero_init(const std::string& name) {
  return ends_with(name, ".b") || name.find("ada.") != std::string::npos || name.rfind("head/", 0) == 0 ||
         name.rfind("flow/final/out", 0) == 0;
}

}  // namespace

ParameterStore<float> init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  ParameterStore<float> store;
  for (const auto& [name, shape] : parameter_manifest(cfg)) {
    Tensor<float> t(shape);
    if (ends_with(name, "_norm")) {
      std::fill(t.data.begin(), t.data.end(), 1.0f);
    } else if (!zero_init(name)) {
      const bool table = name.rfind("embed/tokens", 0) == 0 || name.rfind("embed/class", 0) == 0;
      const double std = table ? 1.0 : 1.0 / std::sqrt(static_cast<double>(shape[0]));
      const NoiseStream s(seed, {fnv1a(name)});
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        t.data[i] = static_cast<float>(std * s.gaussian(i));
      }
    }
    store.emplace(name, std::move(t));
  }
  return store;
}

template <typename S>
Bound bind(ad::Graph<S>& g, const ParameterStore<S>& store) {
  Bound b;
  for (const auto& [name, t] : store) {
    b.emplace(name, g.parameter(t));
  }
  return b;
}

// --- forward ------------------------------------------------------------------

template <typename S>
KVCache<S>::KVCache(const ModelConfig& cfg, std::int64_t batch_, std::int64_t capacity_)
    : batch(batch_), capacity(capacity_), width(cfg.hidden) {
  const auto n = static_cast<std::size_t>(batch * capacity * width);
  keys.assign(static_cast<std::size_t>(cfg.layers), std::vector<S>(n));
  values.assign(static_cast<std::size_t>(cfg.layers), std::vector<S>(n));
  if (cfg.variant == Variant::dart_ar) {
    tokens.assign(static_cast<std::size_t>(batch * capacity * cfg.token_channels()), S{0});
  }
}

std::vector<double> sinusoid(double s, int dim) {
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double f = 1000.0 * std::pow(10000.0, -static_cast<double>(i) / half);
    out[static_cast<std::size_t>(i)] = std::sin(s * f);
    out[static_cast<std::size_t>(i + half)] = std::cos(s * f);
  }
  return out;
}

namespace {

const ad::Var& param(const Bound& p, const std::string& name) {
  auto it = p.find(name);
  if (it == p.end()) {
    throw ConfigError("missing parameter '" + name + "'");
  }
  return it->second;
}

template <typename S>
std::vector<ad::Var> split_cols(ad::Graph<S>& g, ad::Var x, int parts, std::int64_t width) {
  std::vector<ad::Var> out;
  for (int i = 0; i < parts; ++i) {
    out.push_back(ad::slice_cols(g, x, i * width, width));
  }
  return out;
}

template <typename S>
ad::Var head_norm(ad::Graph<S>& g, ad::Var x, ad::Var gain, std::int64_t rows, std::int64_t heads, std::int64_t d) {
  ad::Var r = ad::reshape(g, x, {rows * heads, d});
  return ad::reshape(g, ad::rmsnorm(g, r, gain), {rows, heads * d});
}

// Copies new rows into the cache and returns all cached rows [0, end) as a constant.
template <typename S>
ad::Var cache_append(ad::Graph<S>& g, std::vector<S>& store, const Tensor<S>& fresh, const KVCache<S>& cache,
                     std::int64_t begin, std::int64_t end) {
  const std::int64_t n = end - begin;
  const std::int64_t w = cache.width;
  for (std::int64_t b = 0; b < cache.batch; ++b) {
    std::copy_n(fresh.data.begin() + b * n * w, n * w, store.begin() + (b * cache.capacity + begin) * w);
  }
  Tensor<S> all({cache.batch * end, w});
  for (std::int64_t b = 0; b < cache.batch; ++b) {
    std::copy_n(store.begin() + b * cache.capacity * w, end * w, all.data.begin() + b * end * w);
  }
  return g.constant(std::move(all));
}

}  // namespace

template <typename S>
ModelOutput forward(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const Layout& layout,
                    const ModelInput<S>& in, std::int64_t begin, std::int64_t end, KVCache<S>* cache) {
  const std::int64_t B = in.batch;
  const std::int64_t n = end - begin;
  const std::int64_t h = cfg.hidden;
  const std::int64_t heads = cfg.heads;
  const std::int64_t d = cfg.head_dim();
  const std::int64_t C = cfg.token_channels();
  if (begin < 0 || end > layout.length() || n < 1) {
    throw DimensionError("forward: position range out of layout");
  }
  if (in.tokens.shape != Shape{B * n, C} || static_cast<std::int64_t>(in.ids.size()) != B * n ||
      static_cast<std::int64_t>(in.classes.size()) != B) {
    throw DimensionError("forward: input of shape " + shape_string(in.tokens.shape) + " does not match batch " +
                         std::to_string(B) + " x " + std::to_string(n) + " positions");
  }
  if (cache != nullptr) {
    if (cache->length != begin || cache->batch != B) {
      throw CacheError("forward: cache holds " + std::to_string(cache->length) + " positions, expected " +
                       std::to_string(begin));
    }
    if (end > cache->capacity) {
      throw CacheError("forward: cache capacity " + std::to_string(cache->capacity) + " exceeded");
    }
  } else if (begin != 0) {
    throw CacheError("forward: begin > 0 needs a cache");
  }

  // Rotary angles per row.
  const std::int64_t half = d / 2;
  std::vector<S> angles(static_cast<std::size_t>(B * n * half));
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& ps = layout.pos[static_cast<std::size_t>(begin + i)];
    const auto ph = rope_phases(cfg, ps[0], ps[1], ps[2]);
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t k = 0; k < half; ++k) {
        angles[static_cast<std::size_t>((b * n + i) * half + k)] = static_cast<S>(ph[static_cast<std::size_t>(k)]);
      }
    }
  }
  const BoolMatrix mask = layout.mask.block(begin, n, end);

  // Embeddings.
  std::vector<S> is_image(static_cast<std::size_t>(B * n));
  for (std::size_t r = 0; r < is_image.size(); ++r) {
    is_image[r] = in.ids[r] < 0 ? S{1} : S{0};
  }
  ad::Var x = ad::scale_rows<S>(g, ad::linear(g, g.constant(in.tokens), param(p, "embed/in.w"), param(p, "embed/in.b")),
                                is_image);
  x = ad::add(g, x, ad::embedding<S>(g, param(p, "embed/tokens"), in.ids));
  if (cfg.variant == Variant::dart_ar) {
    Tensor<S> diff({B * n, C});
    bool any = false;
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t src = layout.ref_of[static_cast<std::size_t>(begin + i)];
      if (src == begin + i) {
        continue;
      }
      any = true;
      for (std::int64_t b = 0; b < B; ++b) {
        const S* ref = src >= begin ? &in.tokens.at(b * n + src - begin, 0)
                                    : &cache->tokens[static_cast<std::size_t>((b * cache->capacity + src) * C)];
        for (std::int64_t c = 0; c < C; ++c) {
          diff.at(b * n + i, c) = ref[c] - in.tokens.at(b * n + i, c);
        }
      }
    }
    if (cache != nullptr) {
      for (std::int64_t b = 0; b < B; ++b) {
        std::copy_n(in.tokens.data.begin() + b * n * C, n * C,
                    cache->tokens.begin() + (b * cache->capacity + begin) * C);
      }
    }
    if (any) {
      x = ad::add(g, x, ad::matmul(g, g.constant(std::move(diff)), param(p, "embed/ref.w")));
    }
  }

  ad::Var cond = ad::embedding<S>(g, param(p, "embed/class"), in.classes);
  if (cfg.variant == Variant::markov) {
    if (static_cast<std::int64_t>(in.time.size()) != B) {
      throw DimensionError("forward: markov baseline needs one time value per sample");
    }
    Tensor<S> te({B, h});
    for (std::int64_t b = 0; b < B; ++b) {
      const auto e = sinusoid(in.time[static_cast<std::size_t>(b)], static_cast<int>(h));
      for (std::int64_t k = 0; k < h; ++k) {
        te.at(b, k) = static_cast<S>(e[static_cast<std::size_t>(k)]);
      }
    }
    cond = ad::add(g, cond, g.constant(std::move(te)));
  }
  const ad::Var act = ad::silu(g, cond);
  const ad::Var ones_h = g.constant(Tensor<S>({h}, S{1}));

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + "/";
    const ad::Var mod = ad::repeat_rows(g, ad::linear(g, act, param(p, pre + "ada.w"), param(p, pre + "ada.b")), n);
    const auto m = split_cols(g, mod, 6, h);

    const ad::Var a_in = ad::modulate(g, ad::rmsnorm(g, x, ones_h), m[0], m[1]);
    ad::Var q = ad::matmul(g, a_in, param(p, pre + "attn.q"));
    ad::Var k = ad::matmul(g, a_in, param(p, pre + "attn.k"));
    ad::Var v = ad::matmul(g, a_in, param(p, pre + "attn.v"));
    if (cfg.per_head_rmsnorm) {
      q = head_norm(g, q, param(p, pre + "q_norm"), B * n, heads, d);
      k = head_norm(g, k, param(p, pre + "k_norm"), B * n, heads, d);
    }
    q = ad::rope<S>(g, q, angles, heads);
    k = ad::rope<S>(g, k, angles, heads);
    if (cache != nullptr) {
      k = cache_append(g, cache->keys[static_cast<std::size_t>(l)], g.value(k), *cache, begin, end);
      v = cache_append(g, cache->values[static_cast<std::size_t>(l)], g.value(v), *cache, begin, end);
    }
    const ad::Var att = ad::matmul(g, ad::attention(g, q, k, v, mask, B, heads), param(p, pre + "attn.o"));
    x = ad::add(g, x, ad::mul(g, m[2], att));

    const ad::Var f_in = ad::modulate(g, ad::rmsnorm(g, x, ones_h), m[3], m[4]);
    const ad::Var ff =
        ad::swiglu(g, f_in, param(p, pre + "ffn.w1"), param(p, pre + "ffn.w2"), param(p, pre + "ffn.w3"));
    x = ad::add(g, x, ad::mul(g, m[5], ff));
  }
  if (cache != nullptr) {
    cache->length = end;
  }

  const ad::Var fmod = ad::repeat_rows(g, ad::linear(g, act, param(p, "final/ada.w"), param(p, "final/ada.b")), n);
  const auto fm = split_cols(g, fmod, 2, h);
  ModelOutput out;
  out.c = ad::modulate(g, ad::rmsnorm(g, x, ones_h), fm[0], fm[1]);
  out.v = ad::linear(g, out.c, param(p, "head/v.w"), param(p, "head/v.b"));
  if (cfg.vocab > 0) {
    out.logits = ad::matmul(g, out.c, param(p, "head/logits.w"));
  }
  return out;
}

template <typename S>
ad::Var flow_velocity(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, ad::Var state, ad::Var c,
                      std::span<const S> tau) {
  const std::int64_t N = g.value(state).rows();
  const std::int64_t fh = cfg.flow_width();
  if (static_cast<std::int64_t>(tau.size()) != N || g.value(c).rows() != N) {
    throw DimensionError("flow_velocity: row count mismatch");
  }
  Tensor<S> temb({N, kFlowTimeDim});
  for (std::int64_t r = 0; r < N; ++r) {
    const double t = static_cast<double>(tau[static_cast<std::size_t>(r)]);
    if (!(t >= 0.0 && t <= 1.0)) {
      throw std::domain_error("flow_velocity: tau outside [0, 1]");
    }
    const auto e = sinusoid(t, kFlowTimeDim);
    for (int k = 0; k < kFlowTimeDim; ++k) {
      temb.at(r, k) = static_cast<S>(e[static_cast<std::size_t>(k)]);
    }
  }
  ad::Var x = ad::linear(g, state, param(p, "flow/in.w"), param(p, "flow/in.b"));
  ad::Var cond = ad::linear(g, c, param(p, "flow/cond.w"), param(p, "flow/cond.b"));
  cond = ad::add(g, cond, ad::linear(g, g.constant(std::move(temb)), param(p, "flow/time.w"), param(p, "flow/time.b")));
  const ad::Var act = ad::silu(g, cond);
  const ad::Var ones = g.constant(Tensor<S>({fh}, S{1}));
  for (int i = 0; i < cfg.flow_blocks; ++i) {
    const std::string pre = "flow/block" + std::to_string(i) + "/";
    const auto m = split_cols(g, ad::linear(g, act, param(p, pre + "ada.w"), param(p, pre + "ada.b")), 3, fh);
    ad::Var y = ad::modulate(g, ad::rmsnorm(g, x, ones), m[0], m[1]);
    y = ad::silu(g, ad::linear(g, y, param(p, pre + "fc1.w"), param(p, pre + "fc1.b")));
    y = ad::linear(g, y, param(p, pre + "fc2.w"), param(p, pre + "fc2.b"));
    x = ad::add(g, x, ad::mul(g, m[2], y));
  }
  const auto m = split_cols(g, ad::linear(g, act, param(p, "flow/final/ada.w"), param(p, "flow/final/ada.b")), 2, fh);
  const ad::Var y = ad::modulate(g, ad::rmsnorm(g, x, ones), m[0], m[1]);
  return ad::linear(g, y, param(p, "flow/final/out.w"), param(p, "flow/final/out.b"));
}

// --- images -------------------------------------------------------------------

template <typename S>
Tensor<S> patchify(const Tensor<S>& image, int patch) {
  if (image.rank() != 3 || patch < 1) {
    throw DimensionError("patchify: expected [C, H, W], got " + shape_string(image.shape));
  }
  const std::int64_t C0 = image.shape[0], H = image.shape[1], W = image.shape[2];
  if (H % patch != 0 || W % patch != 0) {
    throw DimensionError("patchify: " + shape_string(image.shape) + " not divisible by patch " + std::to_string(patch));
  }
  const std::int64_t gh = H / patch, gw = W / patch, pp = patch * patch;
  Tensor<S> out({gh * gw, C0 * pp});
  for (std::int64_t c = 0; c < C0; ++c) {
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const std::int64_t tok = (y / patch) * gw + x / patch;
        const std::int64_t ch = c * pp + (y % patch) * patch + x % patch;
        out.at(tok, ch) = image.data[static_cast<std::size_t>((c * H + y) * W + x)];
      }
    }
  }
  return out;
}

template <typename S>
Tensor<S> unpatchify(const Tensor<S>& tokens, int channels, int height, int width, int patch) {
  if (patch < 1 || height % patch != 0 || width % patch != 0) {
    throw DimensionError("unpatchify: extents not divisible by patch");
  }
  const std::int64_t gw = width / patch, pp = static_cast<std::int64_t>(patch) * patch;
  if (tokens.shape != Shape{static_cast<std::int64_t>(height / patch) * gw, channels * pp}) {
    throw DimensionError("unpatchify: token shape " + shape_string(tokens.shape) + " does not match image");
  }
  Tensor<S> out({channels, height, width});
  for (std::int64_t c = 0; c < channels; ++c) {
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        const std::int64_t tok = (y / patch) * gw + x / patch;
        const std::int64_t ch = c * pp + (y % patch) * patch + x % patch;
        out.data[static_cast<std::size_t>((c * height + y) * width + x)] = tokens.at(tok, ch);
      }
    }
  }
  return out;
}

// --- checkpoints --------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["meta"] = ckpt.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::ofstream bin(path + ".bin", std::ios::binary | std::ios::trunc);
  if (!bin) {
    throw std::runtime_error("cannot write " + path + ".bin");
  }
  std::int64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const std::int64_t bytes = t.size() * static_cast<std::int64_t>(sizeof(float));
    manifest["tensors"].push_back(
        {{"name", name}, {"shape", t.shape}, {"dtype", "f32"}, {"offset", offset}, {"length", bytes}});
    bin.write(reinterpret_cast<const char*>(t.data.data()), bytes);
    offset += bytes;
  }
  std::ofstream js(path + ".json", std::ios::trunc);
  if (!js || !bin) {
    throw std::runtime_error("cannot write checkpoint " + path);
  }
  js << manifest.dump(1) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream js(path + ".json");
  std::ifstream bin(path + ".bin", std::ios::binary);
  if (!js || !bin) {
    throw std::runtime_error("cannot open checkpoint " + path);
  }
  const auto manifest = nlohmann::json::parse(js);
  Checkpoint ck;
  ck.meta = manifest.at("meta");
  for (const auto& e : manifest.at("tensors")) {
    if (e.at("dtype").get<std::string>() != "f32") {
      throw std::runtime_error("checkpoint: unsupported dtype");
    }
    Tensor<float> t(e.at("shape").get<Shape>());
    const auto bytes = e.at("length").get<std::int64_t>();
    if (bytes != t.size() * static_cast<std::int64_t>(sizeof(float))) {
      throw std::runtime_error("checkpoint: length does not match shape for " + e.at("name").get<std::string>());
    }
    bin.seekg(e.at("offset").get<std::int64_t>());
    bin.read(reinterpret_cast<char*>(t.data.data()), bytes);
    if (!bin) {
      throw std::runtime_error("checkpoint: truncated blob");
    }
    ck.tensors.emplace(e.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

#define DART_MODEL(S)                                                                                         \
  template Bound bind(ad::Graph<S>&, const ParameterStore<S>&);                                               \
  template struct KVCache<S>;                                                                                 \
  template ModelOutput forward(ad::Graph<S>&, const Bound&, const ModelConfig&, const Layout&,                \
                               const ModelInput<S>&, std::int64_t, std::int64_t, KVCache<S>*);                \
  template ad::Var flow_velocity(ad::Graph<S>&, const Bound&, const ModelConfig&, ad::Var, ad::Var,           \
                                 std::span<const S>);                                                         \
  template Tensor<S> patchify(const Tensor<S>&, int);                                                         \
  template Tensor<S> unpatchify(const Tensor<S>&, int, int, int, int);

DART_MODEL(float)
DART_MODEL(double)

}  // namespace dart
