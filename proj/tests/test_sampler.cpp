// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "dart/modelcheck.hpp"
#include "dart/noising.hpp"

using namespace dart;

namespace {

ModelConfig cfg_for(Variant v, std::vector<ResolutionSpec> res = {ResolutionSpec{2, 2, 3}}) {
  ModelConfig c;
  c.variant = v;
  c.layers = 2;
  c.hidden = 16;
  c.heads = 2;
  c.image_channels = 2;
  c.resolutions = std::move(res);
  c.num_classes = 3;
  c.flow_hidden = 8;
  c.markov_levels = 8;
  return c;
}

std::vector<GammaSchedule> scheds_of(const ModelConfig& c) {
  std::vector<GammaSchedule> s;
  for (int r = 0; r < c.num_resolutions(); ++r) {
    s.push_back(markov_to_gamma(cosine_markov(c.levels(r))));
  }
  return s;
}

std::int64_t image_calls(const ModelConfig& c, const SampleOutput<float>& out) {
  const std::int64_t prefix = make_layout(c).prefix;
  return std::count_if(out.calls.begin(), out.calls.end(), [&](const auto& r) { return r[0] >= prefix; });
}

SampleOptions guided(int num, std::uint64_t seed) {
  SampleOptions o;
  o.num = num;
  o.cls = 1;
  o.guidance.scale = 2.5;
  o.guidance.schedule = CfgSchedule::linear;
  o.seed = seed;
  o.fm_steps = 5;
  return o;
}

}  // namespace

TEST(Guidance, Schedules) {
  GuidanceSpec g{3.0, CfgSchedule::constant};
  EXPECT_EQ(g.weight_at(5, 8), 3.0);
  g.schedule = CfgSchedule::linear;
  EXPECT_EQ(g.weight_at(8, 8), 1.0);
  EXPECT_EQ(g.weight_at(1, 8), 3.0);
  EXPECT_DOUBLE_EQ(g.weight_at(4, 7), 2.0);
  EXPECT_EQ(g.weight_at(1, 1), 3.0);
  EXPECT_EQ(parse_cfg_schedule("linear"), CfgSchedule::linear);
  EXPECT_THROW(parse_cfg_schedule("cosine"), ConfigError);
}

TEST(Guidance, ApplyCfgIdentities) {
  const auto c = gaussian_like<float>({5, 3}, NoiseStream(1, {}));
  const auto u = gaussian_like<float>({5, 3}, NoiseStream(2, {}));
  EXPECT_EQ(apply_cfg(c, u, 1.0).data, c.data);
  EXPECT_EQ(apply_cfg(c, u, 0.0).data, u.data);
  EXPECT_EQ(apply_cfg(c, c, 4.0).data, c.data);
  const auto g = apply_cfg(c, u, 2.0);
  EXPECT_FLOAT_EQ(g.data[3], u.data[3] + 2.0f * (c.data[3] - u.data[3]));
}

TEST(SampleDart, SingleLevelIsOneForwardPass) {
  const auto c = cfg_for(Variant::dart, {ResolutionSpec{2, 2, 1}});
  const auto p = randomized_parameters(c, 3);
  SampleOptions o;
  o.seed = 4;
  const auto out = sample_dart(p, c, scheds_of(c)[0], o);
  EXPECT_EQ(image_calls(c, out), 1);
  const Layout lay = make_layout(c);
  ModelInput<float> in;
  in.tokens = Tensor<float>({lay.length(), 2});
  in.ids.assign(static_cast<std::size_t>(lay.length()), -1);
  in.ids[0] = 0;
  in.classes = {3};
  for (std::int64_t i = 0; i < 8; ++i) {
    in.tokens.data[static_cast<std::size_t>(2 + i)] = static_cast<float>(level_stream(4, 0, 1).gaussian(i));
  }
  ad::Graph<float> g(false);
  const auto v = g.value(forward(g, bind(g, p), c, lay, in, 0, lay.length()).v);
  for (std::int64_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(out.tokens[0][0].data[static_cast<std::size_t>(i)], -v.data[static_cast<std::size_t>(2 + i)], 1e-6);
  }
  EXPECT_EQ(out.images(c)[0].shape, (Shape{2, 2, 2}));
}

TEST(SampleDart, SeedDeterminismAndGuidanceIdentity) {
  const auto c = cfg_for(Variant::dart);
  const auto p = randomized_parameters(c, 5);
  auto o = guided(3, 6);
  const auto a = sample_dart(p, c, scheds_of(c)[0], o);
  const auto b = sample_dart(p, c, scheds_of(c)[0], o);
  EXPECT_EQ(a.tokens[2][0].data, b.tokens[2][0].data);
  o.guidance.scale = 1.0;
  const auto one = sample_dart(p, c, scheds_of(c)[0], o);
  EXPECT_NE(one.tokens[0][0].data, a.tokens[0][0].data);
  EXPECT_EQ(image_calls(c, one), 3);
}

TEST(SampleDart, CacheMatchesRecompute) {
  for (Variant v : {Variant::dart, Variant::dart_ar, Variant::dart_fm}) {
    const auto c = cfg_for(v);
    EXPECT_LT(cache_gap(randomized_parameters(c, 7), c, scheds_of(c), guided(2, 8)), 1e-4) << to_string(v);
  }
  const auto m = cfg_for(Variant::dart, {ResolutionSpec{1, 1, 3}, ResolutionSpec{2, 2, 2}});
  EXPECT_LT(cache_gap(randomized_parameters(m, 9), m, scheds_of(m), guided(2, 10)), 1e-4);
}

TEST(SampleDartAr, CallCountAndSingleTokenEquivalence) {
  const auto c = cfg_for(Variant::dart_ar, {ResolutionSpec{2, 2, 3}});
  const auto out = sample_dart_ar(randomized_parameters(c, 11), c, scheds_of(c)[0], guided(2, 12));
  EXPECT_EQ(image_calls(c, out), 4 * 3);

  auto k1 = cfg_for(Variant::dart_ar, {ResolutionSpec{1, 1, 4}});
  const auto p = randomized_parameters(k1, 13);
  const auto ar = sample_dart_ar(p, k1, scheds_of(k1)[0], guided(3, 14));
  k1.variant = Variant::dart;
  const auto d = sample_dart(p, k1, scheds_of(k1)[0], guided(3, 14));
  for (int n = 0; n < 3; ++n) {
    EXPECT_EQ(ar.tokens[n][0].data, d.tokens[n][0].data);
  }
  EXPECT_EQ(ar.calls, d.calls);
}

TEST(SampleDartFm, ZeroHeadEqualsDart) {
  const auto c = cfg_for(Variant::dart_fm);
  auto p = randomized_parameters(c, 15);
  auto& out_w = p.at("flow/final/out.w");
  std::fill(out_w.data.begin(), out_w.data.end(), 0.0f);
  auto& out_b = p.at("flow/final/out.b");
  std::fill(out_b.data.begin(), out_b.data.end(), 0.0f);
  const auto o = guided(2, 16);
  const auto fm = sample_dart_fm(p, c, scheds_of(c)[0], o);
  const auto d = sample_dart(p, c, scheds_of(c)[0], o);
  for (int n = 0; n < 2; ++n) {
    EXPECT_EQ(fm.tokens[n][0].data, d.tokens[n][0].data);
  }
  auto zero = o;
  zero.fm_steps = 0;
  const auto nz = randomized_parameters(c, 17);
  EXPECT_EQ(sample_dart_fm(nz, c, scheds_of(c)[0], zero).tokens[1][0].data,
            sample_dart(nz, c, scheds_of(c)[0], zero).tokens[1][0].data);
}

TEST(SampleDartFm, OneEulerStep) {
  const auto c = cfg_for(Variant::dart_fm, {ResolutionSpec{2, 2, 1}});
  const auto p = randomized_parameters(c, 18);
  SampleOptions o;
  o.seed = 19;
  o.fm_steps = 1;
  const auto out = sample_dart_fm(p, c, scheds_of(c)[0], o);
  const Layout lay = make_layout(c);
  ModelInput<float> in;
  in.tokens = Tensor<float>({lay.length(), 2});
  in.ids.assign(static_cast<std::size_t>(lay.length()), -1);
  in.ids[0] = 0;
  in.classes = {3};
  for (std::int64_t i = 0; i < 8; ++i) {
    in.tokens.data[static_cast<std::size_t>(2 + i)] = static_cast<float>(level_stream(19, 0, 1).gaussian(i));
  }
  ad::Graph<float> g(false);
  const Bound b = bind(g, p);
  const auto o2 = forward(g, b, c, lay, in, 0, lay.length());
  const std::vector<std::int64_t> rows{1, 2, 3, 4};
  const auto v = g.value(ad::gather_rows<float>(g, o2.v, rows));
  Tensor<float> x0({4, 2});
  for (std::size_t i = 0; i < 8; ++i) {
    x0.data[i] = -v.data[i];
  }
  const std::vector<float> tau(4, 0.0f);
  const auto vel = g.value(flow_velocity<float>(g, b, c, g.constant(x0), ad::gather_rows<float>(g, o2.c, rows), tau));
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(out.tokens[0][0].data[i], x0.data[i] + vel.data[i], 1e-5);
  }
}

TEST(SampleMatryoshka, SingleResolutionAndCallOrder) {
  const auto c = cfg_for(Variant::dart);
  const auto p = randomized_parameters(c, 20);
  const auto o = guided(2, 21);
  EXPECT_EQ(sample_matryoshka(p, c, scheds_of(c), o).tokens[1][0].data,
            sample_dart(p, c, scheds_of(c)[0], o).tokens[1][0].data);

  const auto m = cfg_for(Variant::dart, {ResolutionSpec{1, 1, 4}, ResolutionSpec{2, 2, 2}});
  const auto out = sample_matryoshka(randomized_parameters(m, 22), m, scheds_of(m), o);
  ASSERT_EQ(image_calls(m, out), 6);
  const Layout lay = make_layout(m);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& ch = lay.chunks[i];
    EXPECT_EQ(out.calls[i + 1][0], ch.begin);
    EXPECT_EQ(ch.res, i < 4 ? 0 : 1);
  }
  EXPECT_EQ(out.tokens[0].size(), 2u);
  EXPECT_EQ(out.tokens[0][1].shape, (Shape{4, 2}));
  EXPECT_THROW(sample_matryoshka(randomized_parameters(m, 22), m, {scheds_of(m)[0]}, o), ConfigError);
}

TEST(SampleKaleido, GreedyStopsAtEndToken) {
  auto c = cfg_for(Variant::dart);
  c.vocab = 4;
  c.max_text = 3;
  const auto p = init_parameters(c, 23);
  SampleOptions o;
  o.num = 2;
  o.seed = 24;
  auto out = sample_kaleido(p, c, scheds_of(c)[0], o);
  ASSERT_EQ(out.text.size(), 2u);
  EXPECT_EQ(out.text[0], (std::vector<std::int64_t>{kEndToken}));
  EXPECT_FALSE(out.truncated[0]);
  o.prompt = {2, 3, 1};
  out = sample_kaleido(p, c, scheds_of(c)[0], o);
  EXPECT_EQ(out.text[1], (std::vector<std::int64_t>{2, 3, 1}));
  EXPECT_TRUE(out.truncated[1]);
  o.temperature = 1.0;
  o.prompt.clear();
  EXPECT_LT(cache_gap(randomized_parameters(c, 25), c, scheds_of(c), o), 1e-4);
}

TEST(SampleKaleido, NoVocabularyIsUnconditionalImagePath) {
  const auto c = cfg_for(Variant::dart);
  const auto p = randomized_parameters(c, 26);
  SampleOptions o;
  o.num = 2;
  o.seed = 27;
  const auto k = sample_kaleido(p, c, scheds_of(c)[0], o);
  const auto d = sample_dart(p, c, scheds_of(c)[0], o);
  EXPECT_TRUE(k.text[1].empty());
  for (std::size_t i = 0; i < d.tokens[1][0].data.size(); ++i) {
    EXPECT_NEAR(k.tokens[1][0].data[i], d.tokens[1][0].data[i], 1e-5);
  }
}

TEST(SampleMarkov, StridedAncestralSteps) {
  const auto c = cfg_for(Variant::markov, {ResolutionSpec{1, 1, 1}});
  const auto p = randomized_parameters(c, 28);
  const auto o = guided(3, 29);
  const auto out = sample_markov(p, c, cosine_markov(8), 4, o);
  EXPECT_EQ(out.calls.size(), 4u);
  EXPECT_EQ(out.tokens[2][0].shape, (Shape{1, 2}));
  EXPECT_EQ(sample_markov(p, c, cosine_markov(8), 4, o).tokens[2][0].data, out.tokens[2][0].data);
  EXPECT_THROW(sample_markov(p, c, cosine_markov(8), 3, o), ConfigError);
}
