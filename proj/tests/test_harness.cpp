// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "dart/harness.hpp"
#include "dart/noising.hpp"

using namespace dart;

namespace {

TrainConfig tiny_points(Variant v = Variant::dart) {
  TrainConfig c;
  c.data.kind = "gauss-mixture-2d";
  c.data.size = 256;
  c.data.seed = 3;
  c.model.variant = v;
  c.model.layers = 1;
  c.model.hidden = 16;
  c.model.heads = 2;
  c.model.image_channels = 2;
  c.model.resolutions = {ResolutionSpec{1, 1, 4}};
  c.model.flow_hidden = 8;
  c.model.flow_blocks = 1;
  c.model.markov_levels = 8;
  c.batch = 8;
  c.steps = 6;
  c.seed = 11;
  c.optim.lr = 1e-2;
  c.optim.ema = 0.9;
  return c;
}

bool same(const ParameterStore<float>& a, const ParameterStore<float>& b) {
  if (a.size() != b.size()) {
    return false;
  }
  for (const auto& [name, t] : a) {
    if (t.data != b.at(name).data) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(Dataset, ReproducibleFromSeed) {
  DatasetSpec s;
  s.size = 100;
  s.seed = 5;
  const auto a = make_dataset(s), b = make_dataset(s);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.images[static_cast<std::size_t>(i)].data, b.images[static_cast<std::size_t>(i)].data);
  }
  s.seed = 6;
  EXPECT_NE(make_dataset(s).images[0].data, a.images[0].data);
  EXPECT_NE(make_dataset(s, 1).images[0].data, make_dataset(s, 0).images[0].data);
}

TEST(Dataset, NormalizedWithTrainingStatistics) {
  for (const char* kind : {"gauss-mixture-2d", "checker-2d", "two-mode-1d", "tiny-grid"}) {
    DatasetSpec s;
    s.kind = kind;
    s.size = 2000;
    const auto d = make_dataset(s);
    const auto m = d.matrix();
    const auto per = static_cast<std::int64_t>(d.height) * d.width;
    for (int c = 0; c < d.channels; ++c) {
      double s1 = 0, s2 = 0;
      for (std::int64_t i = 0; i < m.shape[0]; ++i) {
        for (std::int64_t k = 0; k < per; ++k) {
          const double v = m.at(i, c * per + k);
          s1 += v;
          s2 += v * v;
        }
      }
      const double n = static_cast<double>(m.shape[0] * per);
      EXPECT_NEAR(s1 / n, 0.0, 1e-5) << kind;
      EXPECT_NEAR(s2 / n, 1.0, 1e-4) << kind;
    }
    const auto held = make_dataset(s, 1);
    EXPECT_EQ(held.mean, d.mean) << kind;
    EXPECT_EQ(held.scale, d.scale) << kind;
  }
}

TEST(Dataset, TokenGrammarStrings) {
  DatasetSpec s;
  s.kind = "token-grammar";
  s.size = 50;
  s.vocab = 5;
  s.text_length = 4;
  s.height = 4;
  s.width = 4;
  const auto d = make_dataset(s);
  for (const auto& t : d.text) {
    ASSERT_EQ(t.size(), 5u);
    EXPECT_EQ(t.back(), kEndToken);
    for (std::size_t n = 1; n + 1 < t.size(); ++n) {
      const auto step = (t[n] - t[n - 1] + 4) % 4;
      EXPECT_TRUE(step == 0 || step == 1);
    }
  }
  const auto img = render_tokens({2, 3, kEndToken, 1}, 1, 2, 2);
  // Symbols 2, 3, 2, 3 in raster order; anything after the end token is ignored.
  EXPECT_FLOAT_EQ(img.data[0], static_cast<float>((2 * 5 % 7) / 6.0));
  EXPECT_FLOAT_EQ(img.data[1], static_cast<float>((3 * 5 + 2) % 7 / 6.0));
  EXPECT_FLOAT_EQ(img.data[3], static_cast<float>((3 * 5 + 1 + 2) % 7 / 6.0));
  s.vocab = 1;
  EXPECT_THROW(make_dataset(s), ConfigError);
}

TEST(Dataset, UnknownKeysRejected) {
  EXPECT_THROW(DatasetSpec::from_json({{"kind", "tiny-grid"}, {"sise", 4}}), ConfigError);
  DatasetSpec s;
  s.kind = "nope";
  s.size = 1;
  EXPECT_THROW(make_dataset(s), ConfigError);
}

TEST(Dataset, PoolsToEveryResolution) {
  ModelConfig c;
  c.image_channels = 1;
  c.resolutions = {ResolutionSpec{1, 1, 2}, ResolutionSpec{2, 2, 2}};
  Tensor<float> img({1, 2, 2});
  img.data = {1, 2, 3, 6};
  const auto s = to_sample(c, img, 1, {}, 9);
  ASSERT_EQ(s.x0.size(), 2u);
  EXPECT_FLOAT_EQ(s.x0[0].data[0], 3.0f);
  EXPECT_EQ(s.x0[1].data, (std::vector<float>{1, 2, 3, 6}));
  c.resolutions = {ResolutionSpec{3, 3, 2}};
  EXPECT_THROW(to_sample(c, img, 1, {}, 0), DimensionError);
}

TEST(TrainConfig, JsonRoundTripAndDefaults) {
  TrainConfig d;
  EXPECT_EQ(d.optim.lr, 3e-4);
  EXPECT_EQ(d.optim.beta1, 0.9);
  EXPECT_EQ(d.optim.beta2, 0.95);
  EXPECT_EQ(d.optim.eps, 1e-8);
  EXPECT_EQ(d.optim.weight_decay, 0.01);
  EXPECT_EQ(d.optim.clip, 2.0);
  EXPECT_EQ(d.optim.ema, 0.9999);
  const auto c = tiny_points(Variant::dart_fm);
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
  auto j = c.to_json();
  j["optim"]["lrate"] = 1;
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);
  j = c.to_json();
  j["epochs"] = 1;
  EXPECT_THROW(TrainConfig::from_json(j), ConfigError);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  auto c = tiny_points(Variant::dart_fm);
  c.optim.lr = 0;
  Trainer t(c);
  const auto before = t.params();
  t.run();
  EXPECT_EQ(t.steps_done(), c.steps);
  EXPECT_TRUE(same(before, t.params()));
  EXPECT_TRUE(same(before, t.ema()));
}

TEST(Trainer, ResumeIsBitExact) {
  for (Variant v : {Variant::dart, Variant::dart_ar, Variant::dart_fm, Variant::markov}) {
    const auto c = tiny_points(v);
    Trainer full(c);
    std::vector<double> losses;
    full.run(nullptr, [&](const StepReport& r) { losses.push_back(r.loss.total); });

    Trainer first(c);
    for (int i = 0; i < 3; ++i) {
      first.step();
    }
    const auto path = (std::filesystem::temp_directory_path() / "dart_resume_test").string();
    save_checkpoint(path, first.checkpoint());
    Trainer resumed(c, load_checkpoint(path));
    EXPECT_EQ(resumed.steps_done(), 3);
    std::vector<double> tail;
    resumed.run(nullptr, [&](const StepReport& r) { tail.push_back(r.loss.total); });
    ASSERT_EQ(tail.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
      EXPECT_EQ(tail[i], losses[i + 3]) << to_string(v);
    }
    EXPECT_TRUE(same(full.params(), resumed.params())) << to_string(v);
    EXPECT_TRUE(same(full.ema(), resumed.ema())) << to_string(v);
  }
}

TEST(Trainer, ResumeRejectsOtherModel) {
  auto c = tiny_points();
  Trainer t(c);
  const auto ck = t.checkpoint();
  c.model.hidden = 32;
  c.model.heads = 4;
  EXPECT_THROW(Trainer(c, ck), ConfigError);
}

TEST(Trainer, EmaTwoStepTrace) {
  auto c = tiny_points();
  c.optim.ema = 0.9999;
  Trainer t(c);
  const auto p0 = t.params();
  t.step();
  const auto p1 = t.params();
  t.step();
  const auto p2 = t.params();
  const auto e = static_cast<float>(1.0 - 0.9999);
  for (const auto& [name, ema] : t.ema()) {
    for (std::size_t i = 0; i < ema.data.size(); ++i) {
      // ema + (1 - d) * (raw - ema), i.e. d * ema + (1 - d) * raw.
      const float e1 = p0.at(name).data[i] + e * (p1.at(name).data[i] - p0.at(name).data[i]);
      const float e2 = e1 + e * (p2.at(name).data[i] - e1);
      ASSERT_EQ(ema.data[i], e2) << name;
    }
  }
}

TEST(Trainer, GradientClipBound) {
  auto c = tiny_points();
  c.optim.clip = 1e-3;
  Trainer t(c);
  int clipped = 0;
  t.run(nullptr, [&](const StepReport& r) {
    if (r.grad_norm > c.optim.clip) {
      ++clipped;
      EXPECT_LE(r.clipped_norm, c.optim.clip + 1e-6);
    } else {
      EXPECT_EQ(r.clipped_norm, r.grad_norm);
    }
  });
  EXPECT_GT(clipped, 0);
}

TEST(Trainer, LearningRateWarmupAndCosine) {
  auto c = tiny_points();
  c.steps = 110;
  c.optim.lr = 1.0;
  c.optim.min_lr = 0.1;
  c.optim.warmup = 10;
  Trainer t(c);
  EXPECT_DOUBLE_EQ(t.learning_rate(0), 0.1);
  EXPECT_DOUBLE_EQ(t.learning_rate(9), 1.0);
  EXPECT_DOUBLE_EQ(t.learning_rate(10), 1.0);
  EXPECT_NEAR(t.learning_rate(60), 0.55, 1e-12);
  EXPECT_NEAR(t.learning_rate(110), 0.1, 1e-12);
}

TEST(Trainer, NonFiniteLossNamesTheTerm) {
  const auto c = tiny_points();
  Trainer t(c);
  auto ck = t.checkpoint();
  ck.tensors.at("head/v.b").data[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer bad(c, ck);
  try {
    bad.step();
    FAIL() << "expected NonFiniteLoss";
  } catch (const NonFiniteLoss& e) {
    EXPECT_NE(std::string(e.what()).find("denoise"), std::string::npos) << e.what();
  }
}

// One training image, so the denoiser can become exact.
TEST(Trainer, OverfitsSingleSample) {
  TrainConfig c;
  c.data.kind = "tiny-grid";
  c.data.size = 1;
  c.data.height = 4;
  c.data.width = 4;
  c.model.variant = Variant::dart;
  c.model.layers = 2;
  c.model.hidden = 32;
  c.model.heads = 2;
  c.model.image_channels = 1;
  c.model.patch = 2;
  c.model.resolutions = {ResolutionSpec{4, 4, 4}};
  c.weighting = LossWeighting::snr_plus_one;
  c.batch = 8;
  c.steps = 2000;
  c.optim.lr = 3e-3;
  c.optim.warmup = 100;
  c.optim.weight_decay = 0;
  Trainer t(c);
  const double initial = t.evaluate(t.params(), t.data(), 8, 99);
  t.run();
  const double final = t.evaluate(t.params(), t.data(), 8, 99);
  EXPECT_LT(final, 0.01 * initial) << "initial " << initial << " final " << final;
}

TEST(Metrics, SwdIdentityAndDeltas) {
  Tensor<double> a({50, 3});
  const NoiseStream s(1, {});
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    a.data[i] = s.gaussian(i);
  }
  EXPECT_EQ(eval_swd(a, a, 128, 4), 0.0);
  for (double d : {0.5, 3.0}) {
    Tensor<double> x({1, 1}), y({1, 1});
    y.data[0] = d;
    EXPECT_NEAR(eval_swd(x, y, 16, 0), d, 1e-12);
  }
  EXPECT_THROW(eval_swd(a, Tensor<double>({4, 2}), 8, 0), DimensionError);
  EXPECT_THROW(eval_swd(Tensor<double>({0, 3}), a, 8, 0), DimensionError);
}

TEST(Metrics, SwdOfOffsetGaussians) {
  const std::int64_t n = 4000;
  Tensor<double> a({n, 2}), b({n, 2});
  const NoiseStream s(2, {});
  for (std::int64_t i = 0; i < n; ++i) {
    a.at(i, 0) = s.gaussian(static_cast<std::uint64_t>(2 * i));
    a.at(i, 1) = s.gaussian(static_cast<std::uint64_t>(2 * i + 1));
    b.at(i, 0) = s.gaussian(static_cast<std::uint64_t>(2 * (n + i))) + 1.0;
    b.at(i, 1) = s.gaussian(static_cast<std::uint64_t>(2 * (n + i) + 1));
  }
  const double swd = eval_swd(a, b, 4096, 7);
  // Brute-force projection average of |cos| on the same directions.
  const NoiseStream dirs(7, {0x7377ULL});
  double brute = 0;
  for (int l = 0; l < 4096; ++l) {
    const double u = dirs.gaussian(static_cast<std::uint64_t>(2 * l)), v = dirs.gaussian(static_cast<std::uint64_t>(2 * l + 1));
    brute += std::abs(u) / std::hypot(u, v) / 4096;
  }
  EXPECT_NEAR(brute, 2 / std::numbers::pi, 0.015);
  // Finite-sample W1 between independent unit Gaussians adds a few hundredths.
  EXPECT_NEAR(swd, 2 / std::numbers::pi, 0.05);
  EXPECT_NEAR(swd, brute, 0.05);
}

TEST(Metrics, Wasserstein1AndHistograms) {
  EXPECT_NEAR(wasserstein1({0, 1}, {0.5}), 0.5, 1e-15);
  EXPECT_NEAR(wasserstein1({0, 0, 3}, {0, 3, 3}), 1.0, 1e-15);
  EXPECT_EQ(histogram_distance({0.1, 0.2}, {0.9}, 4, 0, 1), 2.0);
  EXPECT_EQ(histogram_distance({0.1, 0.9}, {0.9, 0.1}, 4, 0, 1), 0.0);
  EXPECT_EQ(histogram_distance({-5}, {0.01}, 4, 0, 1), 0.0);
}

TEST(Metrics, NearestMse) {
  Tensor<double> train({2, 2}), q({2, 2});
  train.data = {0, 0, 2, 2};
  q.data = {0, 1, 2, 2};
  const auto m = nearest_mse(q, train);
  EXPECT_DOUBLE_EQ(m[0], 0.5);
  EXPECT_DOUBLE_EQ(m[1], 0.0);
}

TEST(Verify, CosineSixteenPasses) {
  const auto r = verify_prop1(16, "cosine", 200000, 7);
  EXPECT_TRUE(r.at("pass").get<bool>()) << r.dump(2);
  EXPECT_EQ(r.at("checks").size(), 7u);
}

TEST(Verify, SingleLevelIsVacuous) {
  const auto r = verify_prop1(1, "cosine", 10000, 1);
  EXPECT_TRUE(r.at("pass").get<bool>()) << r.dump(2);
  EXPECT_TRUE(r.at("checks").at("snr_maximality").at("vacuous").get<bool>());
}

TEST(Verify, PerturbedGammaFailsRoundTrip) {
  for (int level : {1, 5, 8}) {
    const auto r = verify_prop1(8, "cosine", 10000, 1, PerturbSpec{level, 1e-3}, 10);
    EXPECT_FALSE(r.at("checks").at("round_trip").at("pass").get<bool>()) << level;
    EXPECT_FALSE(r.at("pass").get<bool>());
  }
  EXPECT_THROW(verify_prop1(8, "cosine", 100, 1), ConfigError);
}

TEST(EvalSuite, EmptyAndUnsupported) {
  Trainer t(tiny_points());
  EvalOptions o;
  o.num = 0;
  EXPECT_TRUE(eval_suite(t.checkpoint(), o).empty());
  o.metrics = {"fid"};
  EXPECT_THROW(eval_suite(t.checkpoint(), o), ConfigError);
}

TEST(EvalSuite, ReportsSwdPerVariant) {
  for (Variant v : {Variant::dart, Variant::markov}) {
    auto c = tiny_points(v);
    c.data.size = 64;
    Trainer t(c);
    t.run();
    EvalOptions o;
    o.num = 32;
    o.markov_steps = 4;
    o.metrics = {"swd", "mse"};
    const auto r = eval_suite(t.checkpoint(), o);
    EXPECT_TRUE(std::isfinite(r.at("swd").get<double>())) << r.dump();
    EXPECT_GE(r.at("mse").get<double>(), 0.0);
    EXPECT_EQ(r.at("variant"), to_string(v));
    EXPECT_EQ(r.at("num"), 32);
    EXPECT_EQ(eval_suite(t.checkpoint(), o), r);
  }
}

TEST(Images, PpmHeaderAndClamp) {
  Tensor<float> img({1, 1, 2});
  img.data = {-1.0f, 2.0f};
  const auto path = (std::filesystem::temp_directory_path() / "dart_test.ppm").string();
  write_ppm(path, img);
  std::ifstream f(path, std::ios::binary);
  const std::string content((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string header = "P6\n2 1\n255\n";
  ASSERT_EQ(content.size(), header.size() + 6);
  EXPECT_EQ(content.substr(0, header.size()), header);
  EXPECT_EQ(static_cast<unsigned char>(content[header.size()]), 0);
  EXPECT_EQ(static_cast<unsigned char>(content[header.size() + 3]), 255);
  EXPECT_THROW(write_ppm(path, Tensor<float>({2, 1, 1})), DimensionError);
}
