// SPDX-License-Identifier: Apache-2.0
//
// Generation for every variant. Noise for sample n at level s is drawn from
// the same stream the forward corruption uses, (seed, n, s), at offset k*C + c
// for token k, so token-level and chunk-level decoding consume identical draws.

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dart/losses.hpp"
#include "dart/model.hpp"
#include "dart/schedule.hpp"

namespace dart {

// Token id that terminates a text prefix.
inline constexpr std::int64_t kEndToken = 0;

enum class CfgSchedule { constant, linear };

CfgSchedule parse_cfg_schedule(const std::string& name);

struct GuidanceSpec {
  double scale = 1.0;
  CfgSchedule schedule = CfgSchedule::constant;

  // Linear: 1 at t = T, `scale` at t = 1.
  double weight_at(int t, int T) const;
};

// uncond + w * (cond - uncond); w == 1 returns cond and w == 0 returns uncond unchanged.
template <typename S>
Tensor<S> apply_cfg(const Tensor<S>& cond, const Tensor<S>& uncond, double w);

struct SampleOptions {
  int num = 1;
  std::int64_t cls = -1;  // -1 samples unconditionally
  GuidanceSpec guidance;
  std::uint64_t seed = 0;
  int fm_steps = 100;
  bool use_cache = true;  // false recomputes the whole prefix at every call
  double temperature = 0.0;  // text decoding; 0 is greedy
  std::vector<std::int64_t> prompt;  // forced text prefix (after BOS) for Kaleido
};

template <typename S>
struct SampleOutput {
  std::vector<std::vector<Tensor<S>>> tokens;         // [num][res] clean tokens [K_r, C]
  std::vector<std::array<std::int64_t, 2>> calls;     // position range of every decode call
  std::vector<std::vector<std::int64_t>> text;        // Kaleido: generated prefix per sample
  std::vector<bool> truncated;                        // Kaleido: no end token before max_text

  std::vector<Tensor<S>> images(const ModelConfig& cfg, int res = 0) const;
};

template <typename S>
SampleOutput<S> sample_dart(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                            const SampleOptions& opt);

// K * T incremental calls, one clean token renoised per call.
template <typename S>
SampleOutput<S> sample_dart_ar(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                               const SampleOptions& opt);

// Gaussian step followed by fm_steps explicit Euler steps of the velocity head.
template <typename S>
SampleOutput<S> sample_dart_fm(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                               const SampleOptions& opt);

// Every resolution in turn, each conditioned on the complete history of the ones before.
template <typename S>
SampleOutput<S> sample_matryoshka(const ParameterStore<S>& params, const ModelConfig& cfg,
                                  const std::vector<GammaSchedule>& scheds, const SampleOptions& opt);

// Text first (temperature sampling, greedy at 0), then the image loop on that prefix.
template <typename S>
SampleOutput<S> sample_kaleido(const ParameterStore<S>& params, const ModelConfig& cfg, const GammaSchedule& sched,
                               const SampleOptions& opt);

// Ancestral sampling of the Markovian baseline on `steps` evenly strided levels.
template <typename S>
SampleOutput<S> sample_markov(const ParameterStore<S>& params, const ModelConfig& cfg, const MarkovSchedule& m,
                              int steps, const SampleOptions& opt);

// Dispatches on the variant; `steps` is used by the Markovian baseline only.
template <typename S>
SampleOutput<S> sample(const ParameterStore<S>& params, const ModelConfig& cfg, const std::vector<GammaSchedule>& scheds,
                       const SampleOptions& opt, int steps = 0);

}  // namespace dart
