// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "dart/modelcheck.hpp"
#include "dart/noising.hpp"

using namespace dart;

namespace {

ModelConfig small(Variant v, int T = 3, int h = 2, int w = 2) {
  ModelConfig c;
  c.variant = v;
  c.layers = 2;
  c.hidden = 32;
  c.heads = 2;
  c.image_channels = 2;
  c.resolutions = {ResolutionSpec{h, w, T}};
  c.num_classes = 3;
  c.flow_hidden = 16;
  return c;
}

std::string rows_of(const BoolMatrix& m) {
  std::string s;
  for (std::int64_t i = 0; i < m.rows(); ++i) {
    for (std::int64_t j = 0; j < m.cols(); ++j) {
      s += m(i, j) ? '1' : '0';
    }
    s += i + 1 < m.rows() ? " " : "";
  }
  return s;
}

}  // namespace

TEST(Patchify, RasterOrder) {
  Tensor<float> img({1, 2, 2});
  img.data = {1, 2, 3, 4};
  const auto t = patchify(img, 1);
  EXPECT_EQ(t.shape, (Shape{4, 1}));
  EXPECT_EQ(t.data, (std::vector<float>{1, 2, 3, 4}));
}

TEST(Patchify, WholeImageIsOneToken) {
  const auto img = gaussian_like<float>({3, 4, 4}, NoiseStream(1, {}));
  const auto t = patchify(img, 4);
  EXPECT_EQ(t.shape, (Shape{1, 48}));
}

TEST(Patchify, RoundTripAndErrors) {
  const auto img = gaussian_like<double>({3, 8, 8}, NoiseStream(2, {}));
  const auto t = patchify(img, 2);
  EXPECT_EQ(t.shape, (Shape{16, 12}));
  EXPECT_EQ(unpatchify(t, 3, 8, 8, 2).data, img.data);
  EXPECT_THROW(patchify(gaussian_like<double>({1, 5, 4}, NoiseStream(3, {})), 2), DimensionError);
}

TEST(Mask, Examples) {
  EXPECT_EQ(rows_of(build_mask(2, 2, Variant::dart)), "1100 1100 1111 1111");
  EXPECT_EQ(rows_of(build_mask(2, 2, Variant::dart_ar)), "1000 1100 1110 1111");
  EXPECT_EQ(rows_of(build_mask(1, 3, Variant::dart)), "111 111 111");
}

TEST(Mask, LayoutPrefixAndTail) {
  const auto lay = make_layout(small(Variant::dart_ar, 3, 2, 2));
  EXPECT_EQ(lay.prefix, 1);
  EXPECT_EQ(lay.length(), 1 + 3 * 4 + 3);
  EXPECT_EQ(lay.chunks.back().level, 0);
  for (std::int64_t q = 0; q < lay.length(); ++q) {
    for (std::int64_t k = 0; k < lay.length(); ++k) {
      EXPECT_EQ(lay.mask(q, k), k <= q);
    }
  }
  const auto d = make_layout(small(Variant::dart, 3, 2, 2));
  EXPECT_EQ(d.length(), 13);
  EXPECT_TRUE(d.mask(1, 4));
  EXPECT_FALSE(d.mask(4, 5));
  EXPECT_TRUE(d.mask(5, 0));
}

TEST(Rope, DefaultAxes) {
  ModelConfig c = small(Variant::dart);
  c.hidden = 32;
  c.heads = 2;
  EXPECT_EQ(c.rope_axes(), (std::array<int, 3>{4, 6, 6}));
  c.hidden = 256;
  c.heads = 4;
  EXPECT_EQ(c.rope_axes(), (std::array<int, 3>{16, 24, 24}));
}

TEST(Rope, OriginIsIdentity) {
  const auto a = rope_phases(small(Variant::dart), 0, 0, 0);
  EXPECT_EQ(a.size(), 8u);
  for (double x : a) {
    EXPECT_EQ(x, 0.0);
  }
}

TEST(Rope, HighResolutionAlignment) {
  ModelConfig c = small(Variant::dart);
  c.resolutions = {ResolutionSpec{4, 4, 4}, ResolutionSpec{8, 8, 2}};
  const auto p = spatial_position(c, 1, 3, 5);
  EXPECT_EQ(p[0], 1.5);
  EXPECT_EQ(p[1], 2.5);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      const auto lo = spatial_position(c, 0, i, j);
      const auto hi = spatial_position(c, 1, 2 * i, 2 * j);
      EXPECT_EQ(rope_phases(c, 0, lo[0], lo[1]), rope_phases(c, 0, hi[0], hi[1]));
    }
  }
  c.resolutions[1] = ResolutionSpec{6, 6, 2};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Rope, LevelOnlyTouchesLevelBlock) {
  const ModelConfig c = small(Variant::dart);
  const auto a = rope_phases(c, 1, 2, 3);
  const auto b = rope_phases(c, 5, 2, 3);
  const int lvl = c.rope_axes()[0] / 2;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (static_cast<int>(i) < lvl) {
      EXPECT_NE(a[i], b[i]);
    } else {
      EXPECT_EQ(a[i], b[i]);
    }
  }
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  ModelConfig c = small(Variant::dart_fm);
  c.vocab = 7;
  c.max_text = 4;
  const auto j = c.to_json();
  EXPECT_EQ(ModelConfig::from_json(j).to_json(), j);
  auto bad = j;
  bad["hiden"] = 3;
  EXPECT_THROW(ModelConfig::from_json(bad), ConfigError);
  ModelConfig odd = c;
  odd.rope_dims = {4, 6, 5};
  EXPECT_THROW(odd.validate(), ConfigError);
}

TEST(Mask, ArReferencePositions) {
  const auto lay = make_layout(small(Variant::dart_ar, 3, 2, 2));
  const std::vector<std::int64_t> want = {0, 1, 2, 3, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  EXPECT_EQ(lay.ref_of, want);
  for (std::int64_t q = 0; q < lay.length(); ++q) {
    EXPECT_TRUE(lay.mask(q, lay.ref_of[static_cast<std::size_t>(q)]));
  }
  const auto d = make_layout(small(Variant::dart, 3, 2, 2));
  for (std::int64_t q = 0; q < d.length(); ++q) {
    EXPECT_EQ(d.ref_of[static_cast<std::size_t>(q)], q);
  }
  const auto k1 = make_layout(small(Variant::dart_ar, 3, 1, 1));
  for (std::int64_t q = 0; q < k1.length(); ++q) {
    EXPECT_EQ(k1.ref_of[static_cast<std::size_t>(q)], q);
  }
}

TEST(Parameters, CountMatchesManifestAndNoTimeInput) {
  const ModelConfig c = small(Variant::dart_fm);
  const auto m = parameter_manifest(c);
  const auto p = init_parameters(c, 1);
  EXPECT_EQ(count_parameters(p), count_parameters(m));
  for (const auto& [name, shape] : m) {
    EXPECT_EQ(p.at(name).shape, shape);
    if (name.rfind("flow/", 0) != 0) {
      EXPECT_EQ(name.find("time"), std::string::npos) << name;
    }
  }
}

TEST(Parameters, FlowHeadShareAtFullScale) {
  ModelConfig c;
  c.variant = Variant::dart_fm;
  c.layers = 28;
  c.hidden = 1152;
  c.heads = 16;
  c.image_channels = 4;
  c.patch = 2;
  c.resolutions = {ResolutionSpec{32, 32, 16}};
  c.num_classes = 1000;
  const auto m = parameter_manifest(c);
  const double flow = static_cast<double>(count_parameters(m, "flow/"));
  const double ratio = flow / (static_cast<double>(count_parameters(m)) - flow);
  EXPECT_GE(ratio, 0.003);
  EXPECT_LE(ratio, 0.05);
}

TEST(Forward, ZeroInitHeadsGiveZeroOutputs) {
  const ModelConfig c = small(Variant::dart_fm);
  const auto p = init_parameters(c, 3);
  const Layout lay = make_layout(c);
  ModelInput<float> in;
  in.tokens = gaussian_like<float>({lay.length(), c.token_channels()}, NoiseStream(4, {}));
  in.ids.assign(static_cast<std::size_t>(lay.length()), -1);
  in.ids[0] = 0;
  in.classes = {1};
  ad::Graph<float> g(false);
  const Bound b = bind(g, p);
  const auto o = forward(g, b, c, lay, in, 0, lay.length());
  for (float x : g.value(o.v).data) {
    EXPECT_EQ(x, 0.0f);
  }
  const auto state = gaussian_like<float>({4, 2}, NoiseStream(5, {}));
  const std::vector<float> tau(4, 0.5f);
  const std::vector<std::int64_t> rows{1, 2, 3, 4};
  const auto ctx = ad::gather_rows<float>(g, o.c, rows);
  const auto v = flow_velocity<float>(g, b, c, g.constant(state), ctx, tau);
  EXPECT_EQ(g.value(v).shape, (Shape{4, 2}));
  for (float x : g.value(v).data) {
    EXPECT_EQ(x, 0.0f);
  }
  const std::vector<float> bad(4, 1.5f);
  EXPECT_THROW(flow_velocity<float>(g, b, c, g.constant(state), ctx, bad),
               std::domain_error);
}

TEST(Forward, CausalityDart) {
  const auto r = causality_check(small(Variant::dart, 3, 2, 2), 11);
  EXPECT_EQ(r.perturbations, 3);
  EXPECT_LT(r.hidden_change, 1e-6);
  EXPECT_GT(r.visible_change, 1e-3);
}

TEST(Forward, CausalityDartAr) {
  const auto r = causality_check(small(Variant::dart_ar, 3, 2, 2), 12);
  EXPECT_EQ(r.perturbations, 15);
  EXPECT_LT(r.hidden_change, 1e-6);
  EXPECT_GT(r.visible_change, 1e-3);
}

TEST(Forward, CausalityMatryoshka) {
  ModelConfig c = small(Variant::dart);
  c.resolutions = {ResolutionSpec{1, 1, 3}, ResolutionSpec{2, 2, 2}};
  const auto r = causality_check(c, 13);
  EXPECT_EQ(r.perturbations, 5);
  EXPECT_LT(r.hidden_change, 1e-6);
}

TEST(Forward, CacheMatchesFullPass) {
  const ModelConfig c = small(Variant::dart);
  const auto p = randomized_parameters(c, 5);
  const Layout lay = make_layout(c);
  const std::int64_t L = lay.length();
  ModelInput<float> in;
  in.batch = 2;
  in.tokens = gaussian_like<float>({2 * L, c.token_channels()}, NoiseStream(6, {}));
  in.ids.assign(static_cast<std::size_t>(2 * L), -1);
  in.ids[0] = in.ids[static_cast<std::size_t>(L)] = 0;
  in.classes = {0, 3};
  ad::Graph<float> g(false);
  const Bound b = bind(g, p);
  const auto full = g.value(forward(g, b, c, lay, in, 0, L).v);
  KVCache<float> cache(c, 2, L);
  std::int64_t begin = 0;
  double gap = 0;
  for (std::int64_t end : {std::int64_t{1}, std::int64_t{5}, std::int64_t{9}, L}) {
    ModelInput<float> part;
    part.batch = 2;
    part.classes = in.classes;
    const std::int64_t n = end - begin;
    part.tokens = Tensor<float>({2 * n, c.token_channels()});
    for (std::int64_t bb = 0; bb < 2; ++bb) {
      for (std::int64_t i = 0; i < n; ++i) {
        part.ids.push_back(in.ids[static_cast<std::size_t>(bb * L + begin + i)]);
        for (std::int64_t ch = 0; ch < c.token_channels(); ++ch) {
          part.tokens.at(bb * n + i, ch) = in.tokens.at(bb * L + begin + i, ch);
        }
      }
    }
    const auto v = g.value(forward(g, b, c, lay, part, begin, end, &cache).v);
    for (std::int64_t bb = 0; bb < 2; ++bb) {
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t ch = 0; ch < c.token_channels(); ++ch) {
          gap = std::max(gap, static_cast<double>(std::abs(v.at(bb * n + i, ch) - full.at(bb * L + begin + i, ch))));
        }
      }
    }
    begin = end;
  }
  EXPECT_LT(gap, 1e-4);
  EXPECT_EQ(cache.length, L);
  ModelInput<float> extra;
  extra.classes = {0, 3};
  extra.batch = 2;
  extra.tokens = Tensor<float>({2, c.token_channels()});
  extra.ids = {-1, -1};
  EXPECT_THROW(forward(g, b, c, lay, extra, L - 1, L, &cache), CacheError);
}

TEST(Forward, Deterministic) {
  const ModelConfig c = small(Variant::dart_ar);
  const auto p = randomized_parameters(c, 7);
  const Layout lay = make_layout(c);
  ModelInput<float> in;
  in.tokens = gaussian_like<float>({lay.length(), c.token_channels()}, NoiseStream(8, {}));
  in.ids.assign(static_cast<std::size_t>(lay.length()), -1);
  in.ids[0] = 0;
  in.classes = {2};
  auto run = [&] {
    ad::Graph<float> g(false);
    return g.value(forward(g, bind(g, p), c, lay, in, 0, lay.length()).v).data;
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradients, ForwardFlowAndLosses) {
  for (const auto& r : model_gradient_suite(3, 48)) {
    EXPECT_TRUE(r.result.passed(1e-3)) << r.name << " rel " << r.result.max_rel_error;
    EXPECT_EQ(r.result.coordinates, 48) << r.name;
  }
}

TEST(Checkpoint, ByteExactRoundTrip) {
  const ModelConfig c = small(Variant::dart_fm);
  Checkpoint ck;
  ck.meta = {{"model", c.to_json()}, {"step", 12}};
  ck.tensors = randomized_parameters(c, 9);
  const auto dir = std::filesystem::temp_directory_path() / "dart_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m").string();
  save_checkpoint(path, ck);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.meta, ck.meta);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (const auto& [name, t] : ck.tensors) {
    EXPECT_EQ(back.tensors.at(name).shape, t.shape);
    EXPECT_EQ(std::memcmp(back.tensors.at(name).data.data(), t.data.data(), t.data.size() * sizeof(float)), 0);
  }
  std::filesystem::remove_all(dir);
}
