// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <ostream>

#include "dart/harness.hpp"

namespace dart {

namespace {

const std::vector<std::string> kTrainKeys{"data",  "model", "schedule", "weighting",   "optim",
                                          "batch", "steps", "seed",     "conditional", "class_dropout",
                                          "log_every", "checkpoint_every", "out"};
const std::vector<std::string> kOptimKeys{"lr",   "beta1", "beta2", "eps", "weight_decay",
                                          "warmup", "min_lr", "clip", "ema"};

void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& keys, const std::string& where) {
  if (!j.is_object()) {
    throw ConfigError(where + ": expected an object");
  }
  for (const auto& [k, v] : j.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError(where + ": unknown key '" + k + "'");
    }
  }
}

bool decays(const std::string& name, const Shape& shape) {
  return shape.size() >= 2 && name.rfind("embed/tokens", 0) != 0 && name.rfind("embed/class", 0) != 0;
}

ParameterStore<float> zeros_like(const ParameterStore<float>& p) {
  ParameterStore<float> z;
  for (const auto& [name, t] : p) {
    z.emplace(name, Tensor<float>(t.shape));
  }
  return z;
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
  return {{"data", data.to_json()},
          {"model", model.to_json()},
          {"schedule", schedule},
          {"weighting", dart::to_string(weighting)},
          {"optim",
           {{"lr", optim.lr},
            {"beta1", optim.beta1},
            {"beta2", optim.beta2},
            {"eps", optim.eps},
            {"weight_decay", optim.weight_decay},
            {"warmup", optim.warmup},
            {"min_lr", optim.min_lr},
            {"clip", optim.clip},
            {"ema", optim.ema}}},
          {"batch", batch},
          {"steps", steps},
          {"seed", seed},
          {"conditional", conditional},
          {"class_dropout", class_dropout},
          {"log_every", log_every},
          {"checkpoint_every", checkpoint_every},
          {"out", out}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, kTrainKeys, "train config");
  TrainConfig c;
  if (j.contains("data")) {
    c.data = DatasetSpec::from_json(j.at("data"));
  }
  if (j.contains("model")) {
    c.model = ModelConfig::from_json(j.at("model"));
  }
  c.schedule = j.value("schedule", c.schedule);
  if (j.contains("weighting")) {
    c.weighting = parse_weighting(j.at("weighting").get<std::string>());
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    reject_unknown(o, kOptimKeys, "optim");
    c.optim.lr = o.value("lr", c.optim.lr);
    c.optim.beta1 = o.value("beta1", c.optim.beta1);
    c.optim.beta2 = o.value("beta2", c.optim.beta2);
    c.optim.eps = o.value("eps", c.optim.eps);
    c.optim.weight_decay = o.value("weight_decay", c.optim.weight_decay);
    c.optim.warmup = o.value("warmup", c.optim.warmup);
    c.optim.min_lr = o.value("min_lr", c.optim.min_lr);
    c.optim.clip = o.value("clip", c.optim.clip);
    c.optim.ema = o.value("ema", c.optim.ema);
  }
  c.batch = j.value("batch", c.batch);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.conditional = j.value("conditional", c.conditional);
  c.class_dropout = j.value("class_dropout", c.class_dropout);
  c.log_every = j.value("log_every", c.log_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.out = j.value("out", c.out);
  return c;
}

std::vector<GammaSchedule> make_schedules(const ModelConfig& cfg, const std::string& base, LossWeighting w) {
  if (base != "cosine") {
    throw ConfigError("unknown schedule base '" + base + "'");
  }
  std::vector<GammaSchedule> out;
  for (int r = 0; r < cfg.num_resolutions(); ++r) {
    out.push_back(markov_to_gamma(cosine_markov(cfg.levels(r)), w));
  }
  return out;
}

Trainer::Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.model.validate();
  if (cfg_.batch < 1 || cfg_.steps < 0) {
    throw ConfigError("train: batch must be positive and steps non-negative");
  }
  data_ = make_dataset(cfg_.data, 0);
  if (data_.size() == 0) {
    throw ConfigError("train: empty dataset");
  }
  if (data_.channels != cfg_.model.image_channels) {
    throw ConfigError("train: dataset has " + std::to_string(data_.channels) + " channels, model expects " +
                      std::to_string(cfg_.model.image_channels));
  }
  if (cfg_.conditional && cfg_.model.num_classes < data_.num_classes) {
    throw ConfigError("train: model has fewer classes than the dataset");
  }
  if (cfg_.model.vocab > 0 && data_.text.empty()) {
    throw ConfigError("train: model has a vocabulary but the dataset has no text");
  }
  if (cfg_.model.variant != Variant::markov) {
    scheds_ = make_schedules(cfg_.model, cfg_.schedule, cfg_.weighting);
  }
  params_ = init_parameters(cfg_.model, cfg_.seed);
  ema_ = params_;
  m_ = zeros_like(params_);
  v_ = zeros_like(params_);
}

Trainer::Trainer(TrainConfig cfg, const Checkpoint& ckpt) : Trainer(std::move(cfg)) {
  if (ckpt.meta.at("model") != cfg_.model.to_json()) {
    throw ConfigError("resume: checkpoint model does not match the config");
  }
  for (auto& [name, t] : params_) {
    t = ckpt.tensors.at(name);
    ema_.at(name) = ckpt.tensors.at("ema/" + name);
    m_.at(name) = ckpt.tensors.at("adam_m/" + name);
    v_.at(name) = ckpt.tensors.at("adam_v/" + name);
  }
  step_ = ckpt.meta.at("step").get<std::int64_t>();
}

double Trainer::learning_rate(std::int64_t step) const {
  const auto& o = cfg_.optim;
  if (step < o.warmup) {
    return o.lr * static_cast<double>(step + 1) / static_cast<double>(o.warmup);
  }
  const double span = static_cast<double>(std::max<std::int64_t>(1, cfg_.steps - o.warmup));
  const double progress = std::min(1.0, static_cast<double>(step - o.warmup) / span);
  return o.min_lr + (o.lr - o.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<Sample<float>> Trainer::draw_batch(std::int64_t step) const {
  const NoiseStream s(cfg_.seed, {0x6274ULL, static_cast<std::uint64_t>(step)});
  std::vector<Sample<float>> batch;
  for (int i = 0; i < cfg_.batch; ++i) {
    const auto idx = static_cast<std::size_t>(s.below(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(data_.size())));
    std::int64_t cls = -1;
    if (cfg_.conditional && s.uniform(static_cast<std::uint64_t>(100000 + i)) >= cfg_.class_dropout) {
      cls = data_.labels[idx];
    }
    std::vector<std::int64_t> text;
    if (cfg_.model.vocab > 0) {
      text = data_.text[idx];
    }
    batch.push_back(to_sample(cfg_.model, data_.images[idx], cls, std::move(text),
                              static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg_.batch) +
                                  static_cast<std::uint64_t>(i)));
  }
  return batch;
}

StepReport Trainer::step() {
  StepReport rep;
  rep.step = step_ + 1;
  rep.lr = learning_rate(step_);
  const auto batch = draw_batch(step_);
  ad::Graph<float> g(true);
  const Bound b = dart::bind(g, params_);
  const LossResult r = compute_loss(g, b, cfg_.model, scheds_, cfg_.weighting, batch, cfg_.seed);
  rep.loss = r.report;
  for (const auto& [term, value] : {std::pair{"denoise", r.report.denoise}, std::pair{"flow", r.report.flow},
                                    std::pair{"cross_entropy", r.report.cross_entropy}}) {
    if (!std::isfinite(value)) {
      throw NonFiniteLoss("non-finite loss at step " + std::to_string(rep.step) + ": term '" + term +
                          "' = " + std::to_string(value));
    }
  }
  g.backward(r.total);

  std::map<std::string, const Tensor<float>*> grads;
  const Tensor<float> none;
  double sq = 0;
  for (const auto& [name, var] : b) {
    if (g.has_grad(var)) {
      grads[name] = &g.grad(var);
      for (float x : grads[name]->data) {
        sq += static_cast<double>(x) * x;
      }
    } else {
      grads[name] = nullptr;
    }
  }
  rep.grad_norm = std::sqrt(sq);
  if (!std::isfinite(rep.grad_norm)) {
    throw NonFiniteLoss("non-finite gradient at step " + std::to_string(rep.step));
  }
  const double clip = rep.grad_norm > cfg_.optim.clip ? cfg_.optim.clip / rep.grad_norm : 1.0;
  rep.clipped_norm = rep.grad_norm * clip;

  const auto& o = cfg_.optim;
  const double t = static_cast<double>(step_ + 1);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  const auto ema_c = static_cast<float>(1.0 - o.ema);
  for (auto& [name, p] : params_) {
    const Tensor<float>* gr = grads.at(name);
    auto& m = m_.at(name).data;
    auto& v = v_.at(name).data;
    auto& e = ema_.at(name).data;
    const bool wd = decays(name, p.shape) && o.weight_decay > 0;
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const double gi = gr ? static_cast<double>(gr->data[i]) * clip : 0.0;
      const double mi = o.beta1 * m[i] + (1 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1 - o.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double upd = (mi / bc1) / (std::sqrt(vi / bc2) + o.eps);
      if (wd) {
        upd += o.weight_decay * p.data[i];
      }
      p.data[i] = static_cast<float>(p.data[i] - rep.lr * upd);
      e[i] += ema_c * (p.data[i] - e[i]);
    }
  }
  ++step_;
  return rep;
}

void Trainer::run(std::ostream* log, const std::function<void(const StepReport&)>& on_step) {
  namespace fs = std::filesystem;
  if (!cfg_.out.empty()) {
    fs::create_directories(cfg_.out);
  }
  while (step_ < cfg_.steps) {
    const StepReport rep = step();
    if (on_step) {
      on_step(rep);
    }
    if (log && cfg_.log_every > 0 && (step_ % cfg_.log_every == 0 || step_ == cfg_.steps)) {
      auto j = rep.loss.to_json(step_);
      j["lr"] = rep.lr;
      j["grad_norm"] = rep.grad_norm;
      *log << j.dump() << "\n";
      log->flush();
    }
    if (!cfg_.out.empty() && cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
      save_checkpoint((fs::path(cfg_.out) / ("step_" + std::to_string(step_))).string(), checkpoint());
    }
  }
  if (!cfg_.out.empty()) {
    save_checkpoint((fs::path(cfg_.out) / "final").string(), checkpoint());
  }
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.meta = {{"format", "dart-checkpoint"},
            {"model", cfg_.model.to_json()},
            {"train", cfg_.to_json()},
            {"step", step_},
            {"data_mean", data_.mean},
            {"data_scale", data_.scale}};
  for (const auto& [name, t] : params_) {
    c.tensors.emplace(name, t);
    c.tensors.emplace("ema/" + name, ema_.at(name));
    c.tensors.emplace("adam_m/" + name, m_.at(name));
    c.tensors.emplace("adam_v/" + name, v_.at(name));
  }
  return c;
}

double Trainer::evaluate(const ParameterStore<float>& params, const Dataset& data, int batches,
                         std::uint64_t seed) const {
  double total = 0;
  for (int k = 0; k < batches; ++k) {
    const NoiseStream s(seed, {0x6576ULL, static_cast<std::uint64_t>(k)});
    std::vector<Sample<float>> batch;
    for (int i = 0; i < cfg_.batch; ++i) {
      const auto idx = static_cast<std::size_t>(s.below(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(data.size())));
      std::vector<std::int64_t> text;
      if (cfg_.model.vocab > 0) {
        text = data.text[idx];
      }
      batch.push_back(to_sample(cfg_.model, data.images[idx], cfg_.conditional ? data.labels[idx] : -1,
                                std::move(text), static_cast<std::uint64_t>(k * cfg_.batch + i)));
    }
    ad::Graph<float> g(false);
    total += compute_loss(g, dart::bind(g, params), cfg_.model, scheds_, cfg_.weighting, batch, seed).report.denoise;
  }
  return batches > 0 ? total / batches : 0.0;
}

ParameterStore<float> checkpoint_parameters(const Checkpoint& ckpt, const std::string& which) {
  if (which != "ema" && which != "raw") {
    throw ConfigError("checkpoint parameters must be 'ema' or 'raw'");
  }
  ParameterStore<float> out;
  for (const auto& [name, t] : ckpt.tensors) {
    if (which == "ema" && name.rfind("ema/", 0) == 0) {
      out.emplace(name.substr(4), t);
    } else if (which == "raw" && name.find('/') != std::string::npos && name.rfind("ema/", 0) != 0 &&
               name.rfind("adam_m/", 0) != 0 && name.rfind("adam_v/", 0) != 0) {
      out.emplace(name, t);
    }
  }
  if (out.empty()) {
    // Plain parameter checkpoints carry no optimizer state.
    for (const auto& [name, t] : ckpt.tensors) {
      out.emplace(name, t);
    }
  }
  return out;
}

}  // namespace dart
