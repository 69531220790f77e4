// SPDX-License-Identifier: Apache-2.0
//
// Property checks over random tiny models, shared by the unit tests and the
// acceptance runner.

#pragma once

#include <cstdint>
#include <vector>

#include "dart/losses.hpp"
#include "dart/model.hpp"
#include "dart/opcheck.hpp"
#include "dart/sampler.hpp"

namespace dart {

// init_parameters plus scale * N(0, 1) on every tensor, so zero-initialized
// heads and modulations are exercised.
ParameterStore<float> randomized_parameters(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.2);

template <typename S>
std::vector<Sample<S>> random_batch(const ModelConfig& cfg, int batch, std::uint64_t seed, int text_tokens = 0);

// Forward, flow head and every objective against central finite differences (double).
std::vector<ad::NamedGradCheck> model_gradient_suite(std::uint64_t seed, int coords = 32);

struct CausalityReport {
  double hidden_change = 0;   // max |change| at positions that cannot see the perturbation
  double visible_change = 0;  // max |change| at positions that can
  int perturbations = 0;
};

// Perturbs every image chunk (block-causal variants) or every image token
// (dart-ar) in turn and compares v and c at the other positions.
CausalityReport causality_check(const ModelConfig& cfg, std::uint64_t seed);

// Max abs difference between cached and full-recompute sampling; also
// requires identical call ranges and generated text.
double cache_gap(const ParameterStore<float>& params, const ModelConfig& cfg,
                 const std::vector<GammaSchedule>& scheds, SampleOptions opt);

}  // namespace dart
