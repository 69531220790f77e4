// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dart/harness.hpp"
#include "dart/noising.hpp"

namespace dart {

namespace {

const std::vector<std::string> kKeys{"kind", "size",  "seed",  "height",     "width",
                                     "channels", "modes", "vocab", "text_length"};

struct Raw {
  std::vector<Tensor<float>> images;
  std::vector<std::int64_t> labels;
  std::vector<std::vector<std::int64_t>> text;
};

std::vector<std::int64_t> grammar_string(const NoiseStream& s, int vocab, int length) {
  std::vector<std::int64_t> t;
  const auto symbols = static_cast<std::uint64_t>(vocab - 1);
  std::int64_t prev = 1 + static_cast<std::int64_t>(s.below(0, symbols));
  t.push_back(prev);
  for (int n = 1; n < length; ++n) {
    const auto step = static_cast<std::int64_t>(s.below(static_cast<std::uint64_t>(n), 2));
    prev = 1 + (prev - 1 + step) % static_cast<std::int64_t>(symbols);
    t.push_back(prev);
  }
  t.push_back(kEndToken);
  return t;
}

Raw generate(const DatasetSpec& spec, int split) {
  Raw raw;
  const std::uint64_t kind = fnv1a(spec.kind);
  for (int i = 0; i < spec.size; ++i) {
    const NoiseStream s(spec.seed, {kind, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(i)});
    std::int64_t label = -1;
    Tensor<float> img;
    if (spec.kind == "gauss-mixture-2d") {
      label = static_cast<std::int64_t>(s.below(0, static_cast<std::uint64_t>(spec.modes)));
      const double a = 2 * std::numbers::pi * static_cast<double>(label) / spec.modes;
      img = Tensor<float>({2, 1, 1});
      img.data = {static_cast<float>(2.0 * std::cos(a) + 0.2 * s.gaussian(1)),
                  static_cast<float>(2.0 * std::sin(a) + 0.2 * s.gaussian(2))};
    } else if (spec.kind == "checker-2d") {
      img = Tensor<float>({2, 1, 1});
      for (std::uint64_t k = 0;; k += 2) {
        const double x = 4 * s.uniform(k) - 2, y = 4 * s.uniform(k + 1) - 2;
        if ((static_cast<int>(std::floor(x)) + static_cast<int>(std::floor(y))) % 2 == 0) {
          img.data = {static_cast<float>(x), static_cast<float>(y)};
          break;
        }
      }
    } else if (spec.kind == "two-mode-1d") {
      label = static_cast<std::int64_t>(s.below(0, 2));
      img = Tensor<float>({1, 1, 1});
      img.data = {static_cast<float>((label == 0 ? -1.0 : 1.0) + 0.1 * s.gaussian(1))};
    } else if (spec.kind == "tiny-grid") {
      label = static_cast<std::int64_t>(s.below(0, 3));
      img = Tensor<float>({spec.channels, spec.height, spec.width});
      const double ci = 1.5 + (spec.height - 3) * s.uniform(1), cj = 1.5 + (spec.width - 3) * s.uniform(2);
      const double width = 0.8 + 1.2 * s.uniform(3), amp = 0.5 + 0.5 * s.uniform(4);
      for (int c = 0; c < spec.channels; ++c) {
        const double tint = 1.0 - 0.3 * c * s.uniform(5);
        for (int y = 0; y < spec.height; ++y) {
          for (int x = 0; x < spec.width; ++x) {
            double d2 = 0;
            if (label == 0) {
              d2 = (y - ci) * (y - ci) + (x - cj) * (x - cj);
            } else if (label == 1) {
              d2 = (y - ci) * (y - ci);
            } else {
              d2 = (x - cj) * (x - cj);
            }
            const double v = amp * tint * std::exp(-d2 / (2 * width * width)) +
                             0.02 * s.gaussian(static_cast<std::uint64_t>(16 + (c * spec.height + y) * spec.width + x));
            img.data[static_cast<std::size_t>((c * spec.height + y) * spec.width + x)] = static_cast<float>(v);
          }
        }
      }
    } else if (spec.kind == "token-grammar") {
      if (spec.vocab < 2 || spec.vocab > 64 || spec.text_length < 1) {
        throw ConfigError("token-grammar: vocab must be in [2, 64] and text_length >= 1");
      }
      raw.text.push_back(grammar_string(s, spec.vocab, spec.text_length));
      img = render_tokens(raw.text.back(), spec.channels, spec.height, spec.width);
    } else {
      throw ConfigError("unknown dataset kind '" + spec.kind + "'");
    }
    raw.images.push_back(std::move(img));
    raw.labels.push_back(label);
  }
  return raw;
}

}  // namespace

nlohmann::json DatasetSpec::to_json() const {
  return {{"kind", kind},         {"size", size},   {"seed", seed},   {"height", height},
          {"width", width},       {"channels", channels}, {"modes", modes}, {"vocab", vocab},
          {"text_length", text_length}};
}

DatasetSpec DatasetSpec::from_json(const nlohmann::json& j) {
  for (const auto& [k, v] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end()) {
      throw ConfigError("dataset: unknown key '" + k + "'");
    }
  }
  DatasetSpec s;
  s.kind = j.value("kind", s.kind);
  s.size = j.value("size", s.size);
  s.seed = j.value("seed", s.seed);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.channels = j.value("channels", s.channels);
  s.modes = j.value("modes", s.modes);
  s.vocab = j.value("vocab", s.vocab);
  s.text_length = j.value("text_length", s.text_length);
  return s;
}

Tensor<double> Dataset::matrix() const {
  const std::int64_t d = static_cast<std::int64_t>(channels) * height * width;
  Tensor<double> m({size(), d});
  for (std::int64_t i = 0; i < size(); ++i) {
    for (std::int64_t k = 0; k < d; ++k) {
      m.at(i, k) = images[static_cast<std::size_t>(i)].data[static_cast<std::size_t>(k)];
    }
  }
  return m;
}

Tensor<float> render_tokens(const std::vector<std::int64_t>& text, int channels, int height, int width) {
  std::vector<std::int64_t> sym;
  for (auto t : text) {
    if (t == kEndToken) {
      break;
    }
    sym.push_back(t);
  }
  Tensor<float> img({channels, height, width});
  if (sym.empty()) {
    return img;
  }
  for (int c = 0; c < channels; ++c) {
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const auto s = sym[static_cast<std::size_t>((y * width + x) % static_cast<int>(sym.size()))];
        img.data[static_cast<std::size_t>((c * height + y) * width + x)] =
            static_cast<float>(((s * 5 + y + 2 * x + 3 * c) % 7) / 6.0);
      }
    }
  }
  return img;
}

Dataset make_dataset(const DatasetSpec& spec, int split) {
  if (spec.size < 0) {
    throw ConfigError("dataset: negative size");
  }
  Dataset d;
  d.spec = spec;
  Raw train = generate(spec, 0);
  Raw raw = split == 0 ? std::move(train) : generate(spec, split);
  const Raw& stats = split == 0 ? raw : train;
  if (spec.kind == "gauss-mixture-2d") {
    d.num_classes = spec.modes;
  } else if (spec.kind == "two-mode-1d") {
    d.num_classes = 2;
  } else if (spec.kind == "tiny-grid") {
    d.num_classes = 3;
  }
  if (!stats.images.empty()) {
    d.channels = static_cast<int>(stats.images[0].shape[0]);
    d.height = static_cast<int>(stats.images[0].shape[1]);
    d.width = static_cast<int>(stats.images[0].shape[2]);
  }
  const std::int64_t hw = static_cast<std::int64_t>(d.height) * d.width;
  d.mean.assign(static_cast<std::size_t>(d.channels), 0.0);
  d.scale.assign(static_cast<std::size_t>(d.channels), 1.0);
  for (int c = 0; c < d.channels && !stats.images.empty(); ++c) {
    double s1 = 0, s2 = 0;
    for (const auto& im : stats.images) {
      for (std::int64_t k = 0; k < hw; ++k) {
        const double v = im.data[static_cast<std::size_t>(c * hw + k)];
        s1 += v;
        s2 += v * v;
      }
    }
    const double n = static_cast<double>(stats.images.size() * static_cast<std::size_t>(hw));
    const double mu = s1 / n;
    const double var = s2 / n - mu * mu;
    d.mean[static_cast<std::size_t>(c)] = mu;
    d.scale[static_cast<std::size_t>(c)] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  for (auto& im : raw.images) {
    for (int c = 0; c < d.channels; ++c) {
      for (std::int64_t k = 0; k < hw; ++k) {
        auto& v = im.data[static_cast<std::size_t>(c * hw + k)];
        v = static_cast<float>((v - d.mean[static_cast<std::size_t>(c)]) / d.scale[static_cast<std::size_t>(c)]);
      }
    }
  }
  d.images = std::move(raw.images);
  d.labels = std::move(raw.labels);
  d.text = std::move(raw.text);
  return d;
}

Sample<float> to_sample(const ModelConfig& cfg, const Tensor<float>& image, std::int64_t cls,
                        std::vector<std::int64_t> text, std::uint64_t id) {
  const auto C0 = image.shape.at(0), H = image.shape.at(1), W = image.shape.at(2);
  if (C0 != cfg.image_channels) {
    throw DimensionError("image has " + std::to_string(C0) + " channels, model expects " +
                         std::to_string(cfg.image_channels));
  }
  Sample<float> s;
  for (const auto& r : cfg.resolutions) {
    if (H % r.height != 0 || W % r.width != 0) {
      throw DimensionError("image " + shape_string(image.shape) + " cannot be pooled to " +
                           std::to_string(r.height) + "x" + std::to_string(r.width));
    }
    const auto fy = H / r.height, fx = W / r.width;
    Tensor<float> pooled({C0, r.height, r.width});
    for (std::int64_t c = 0; c < C0; ++c) {
      for (std::int64_t y = 0; y < r.height; ++y) {
        for (std::int64_t x = 0; x < r.width; ++x) {
          double acc = 0;
          for (std::int64_t dy = 0; dy < fy; ++dy) {
            for (std::int64_t dx = 0; dx < fx; ++dx) {
              acc += image.data[static_cast<std::size_t>((c * H + y * fy + dy) * W + x * fx + dx)];
            }
          }
          pooled.data[static_cast<std::size_t>((c * r.height + y) * r.width + x)] =
              static_cast<float>(acc / static_cast<double>(fy * fx));
        }
      }
    }
    s.x0.push_back(patchify(pooled, cfg.patch));
  }
  s.cls = cls;
  s.text = std::move(text);
  s.id = id;
  return s;
}

}  // namespace dart
