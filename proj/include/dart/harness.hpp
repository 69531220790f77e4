// SPDX-License-Identifier: Apache-2.0
//
// Synthetic data, training, metrics and the end-to-end schedule verifier.

#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "dart/losses.hpp"
#include "dart/model.hpp"
#include "dart/sampler.hpp"
#include "dart/schedule.hpp"
#include "json.hpp"

namespace dart {

// --- data ---------------------------------------------------------------------

// Kinds: gauss-mixture-2d, checker-2d, two-mode-1d, tiny-grid, token-grammar.
struct DatasetSpec {
  std::string kind = "gauss-mixture-2d";
  int size = 50000;
  std::uint64_t seed = 0;
  int height = 8;       // tiny-grid and token-grammar
  int width = 8;
  int channels = 1;
  int modes = 8;        // gauss-mixture-2d
  int vocab = 3;        // token-grammar, including the end token 0
  int text_length = 6;  // token-grammar, symbols before the end token

  nlohmann::json to_json() const;
  static DatasetSpec from_json(const nlohmann::json& j);
};

struct Dataset {
  DatasetSpec spec;
  int channels = 1;
  int height = 1;
  int width = 1;
  int num_classes = 0;
  std::vector<Tensor<float>> images;              // [channels, height, width], normalized
  std::vector<std::int64_t> labels;               // -1 when unlabeled
  std::vector<std::vector<std::int64_t>> text;    // token-grammar only, ends with the end token
  std::vector<double> mean;                       // per channel, subtracted
  std::vector<double> scale;                      // per channel, divided

  std::int64_t size() const { return static_cast<std::int64_t>(images.size()); }
  // Rows of flattened images, [size, channels * height * width].
  Tensor<double> matrix() const;
};

// `split` 0 is the training split; other values draw independent held-out
// sets normalized with the training statistics.
Dataset make_dataset(const DatasetSpec& spec, int split = 0);

// Deterministic rendering of a token string on a channels x height x width grid, in [0, 1].
Tensor<float> render_tokens(const std::vector<std::int64_t>& text, int channels, int height, int width);

// Average-pools an image to every resolution of the model and patchifies it.
Sample<float> to_sample(const ModelConfig& cfg, const Tensor<float>& image, std::int64_t cls,
                        std::vector<std::int64_t> text, std::uint64_t id);

// --- training -----------------------------------------------------------------

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t warmup = 0;
  double min_lr = 0.0;  // floor of the cosine decay
  double clip = 2.0;
  double ema = 0.9999;
};

struct TrainConfig {
  DatasetSpec data;
  ModelConfig model;
  std::string schedule = "cosine";
  LossWeighting weighting = LossWeighting::snr;
  OptimConfig optim;
  int batch = 64;
  std::int64_t steps = 1000;
  std::uint64_t seed = 0;
  bool conditional = false;     // use dataset labels as classes
  double class_dropout = 0.1;
  std::int64_t log_every = 100;
  std::int64_t checkpoint_every = 0;
  std::string out;              // directory for checkpoints and the loss log; empty disables

  nlohmann::json to_json() const;
  // Unknown keys are rejected.
  static TrainConfig from_json(const nlohmann::json& j);
};

// Schedules of every resolution of `cfg` for a base schedule name.
std::vector<GammaSchedule> make_schedules(const ModelConfig& cfg, const std::string& base, LossWeighting w);

struct StepReport {
  std::int64_t step = 0;
  LossReport loss;
  double lr = 0;
  double grad_norm = 0;     // before clipping
  double clipped_norm = 0;  // after clipping
};

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Trainer {
 public:
  explicit Trainer(TrainConfig cfg);
  // Continues from a checkpoint written by `checkpoint()`; the config must match.
  Trainer(TrainConfig cfg, const Checkpoint& ckpt);

  StepReport step();
  // Runs the remaining steps; `log` receives one JSON line per logged step.
  void run(std::ostream* log = nullptr, const std::function<void(const StepReport&)>& on_step = {});

  Checkpoint checkpoint() const;
  std::int64_t steps_done() const { return step_; }
  const ParameterStore<float>& params() const { return params_; }
  const ParameterStore<float>& ema() const { return ema_; }
  const TrainConfig& config() const { return cfg_; }
  const Dataset& data() const { return data_; }
  const std::vector<GammaSchedule>& schedules() const { return scheds_; }
  double learning_rate(std::int64_t step) const;

  // Held-out loss of `params` over `batches` fixed batches drawn from `data`.
  double evaluate(const ParameterStore<float>& params, const Dataset& data, int batches, std::uint64_t seed) const;

 private:
  std::vector<Sample<float>> draw_batch(std::int64_t step) const;

  TrainConfig cfg_;
  Dataset data_;
  std::vector<GammaSchedule> scheds_;
  ParameterStore<float> params_, ema_, m_, v_;
  std::int64_t step_ = 0;
};

// Model parameters selected from a checkpoint: "ema" or "raw".
ParameterStore<float> checkpoint_parameters(const Checkpoint& ckpt, const std::string& which = "ema");

// --- evaluation ---------------------------------------------------------------

// Mean over `projections` random unit directions of the 1-D Wasserstein-1
// distance between the projected empirical distributions. Rows are points.
double eval_swd(const Tensor<double>& a, const Tensor<double>& b, int projections = 128, std::uint64_t seed = 0);

// Exact W1 between two 1-D empirical distributions.
double wasserstein1(std::vector<double> a, std::vector<double> b);

// L1 distance between normalized histograms on `bins` equal bins of [lo, hi].
double histogram_distance(const std::vector<double>& a, const std::vector<double>& b, int bins, double lo, double hi);

// Samples as rows in the dataset's normalized space, [num, channels * H * W].
Tensor<double> sample_matrix(const ModelConfig& cfg, const SampleOutput<float>& out);

// Per sample, mean squared error to the nearest training image.
std::vector<double> nearest_mse(const Tensor<double>& samples, const Tensor<double>& train);

struct EvalOptions {
  std::vector<std::string> metrics{"swd"};
  int num = 1000;
  int markov_steps = 0;
  SampleOptions sampling;
  std::uint64_t seed = 0;
};

nlohmann::json eval_suite(const Checkpoint& ckpt, const EvalOptions& opt);

// Round trip, y-process moments, Markov transition, recovery and SNR
// maximality checks; `perturb` adds delta to gamma at one level (1-based) as a
// negative control.
struct PerturbSpec {
  int level = 0;
  double delta = 0;
};
nlohmann::json verify_prop1(int T, const std::string& base, std::int64_t N, std::uint64_t seed,
                            PerturbSpec perturb = {}, int alternatives = 1000);

// --- images -------------------------------------------------------------------

// Binary PPM (P6, maxval 255); one channel is replicated to RGB. Values are
// mapped from [lo, hi] to [0, 255].
void write_ppm(const std::string& path, const Tensor<float>& image, double lo = 0.0, double hi = 1.0);

}  // namespace dart
