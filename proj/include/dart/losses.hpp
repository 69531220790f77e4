// SPDX-License-Identifier: Apache-2.0
//
// Training objectives. Squared errors are averaged over tokens and channels,
// summed over levels with the schedule weights and averaged over the batch.

#pragma once

#include <cstdint>
#include <vector>

#include "dart/model.hpp"
#include "dart/noising.hpp"
#include "dart/schedule.hpp"
#include "json.hpp"

namespace dart {

template <typename S>
struct Sample {
  std::vector<Tensor<S>> x0;        // [K_r, C] per resolution, ascending
  std::int64_t cls = -1;            // -1 selects the null condition
  std::vector<std::int64_t> text;   // discrete prefix after BOS (Kaleido), ends with the end token
  std::uint64_t id = 0;             // keys the noise streams
};

struct LossReport {
  double total = 0;
  double denoise = 0;
  double flow = 0;
  double cross_entropy = 0;  // per-token mean, before lambda
  double lambda = 0;
  std::int64_t text_tokens = 0;
  std::int64_t image_tokens = 0;
  std::vector<double> per_level;  // weighted denoising term by level, resolutions concatenated, t = 1 first

  nlohmann::json to_json(std::int64_t step) const;
};

struct LossResult {
  ad::Var total;
  LossReport report;
};

// Sum over levels of omega_t * mse(x0_hat_t, x0), every level predicted in parallel
// from its own chunk under the block-causal mask.
template <typename S>
LossResult loss_dart(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                     const std::vector<Sample<S>>& batch, std::uint64_t seed);

// Token-by-token teacher forcing: clean token k of level t-1 is predicted from
// x_{t:T} and the first k tokens of x_{t-1}.
template <typename S>
LossResult loss_dart_ar(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                        const std::vector<Sample<S>>& batch, std::uint64_t seed);

// DART term plus the flow-matching term of the velocity head. The Gaussian
// estimate of x_{t-1} is detached; the head sees backbone features c_t.
template <typename S>
LossResult loss_flow(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                     const std::vector<Sample<S>>& batch, std::uint64_t seed);

// Sum of per-resolution DART losses over one concatenated sequence.
template <typename S>
LossResult loss_matryoshka(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg,
                           const std::vector<GammaSchedule>& scheds, const std::vector<Sample<S>>& batch,
                           std::uint64_t seed);

// lambda * cross-entropy on the text prefix + DART on the image chunks,
// lambda = text tokens / image tokens of the batch. All samples must share a text length.
template <typename S>
LossResult loss_kaleido(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const GammaSchedule& sched,
                        const std::vector<Sample<S>>& batch, std::uint64_t seed);

// Markovian diffusion loss at one uniformly drawn level per sample.
template <typename S>
LossResult loss_markov_baseline(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg, const MarkovSchedule& m,
                                LossWeighting weighting, const std::vector<Sample<S>>& batch, std::uint64_t seed);

// Selects the objective from the config: variant, resolution count and vocabulary.
template <typename S>
LossResult compute_loss(ad::Graph<S>& g, const Bound& p, const ModelConfig& cfg,
                        const std::vector<GammaSchedule>& scheds, LossWeighting weighting,
                        const std::vector<Sample<S>>& batch, std::uint64_t seed);

// Streams for the flow-matching draws and the baseline level draws.
NoiseStream flow_noise_stream(std::uint64_t seed, std::uint64_t sample_id, int res, int t);
NoiseStream flow_time_stream(std::uint64_t seed, std::uint64_t sample_id);
NoiseStream markov_stream(std::uint64_t seed, std::uint64_t sample_id);

// Key of the trajectory noise of resolution `res`; resolution 0 uses the seed unchanged.
std::uint64_t resolution_seed(std::uint64_t seed, int res);

}  // namespace dart
