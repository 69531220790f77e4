// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checks in double precision.

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "dart/autodiff.hpp"

namespace dart::ad {

struct GradCheckResult {
  int coordinates = 0;
  double max_rel_error = 0;
  double max_abs_error = 0;
  bool passed(double tol = 1e-3) const { return coordinates > 0 && max_rel_error < tol; }
};

// Builds a scalar from graph parameters holding `inputs`.
using ScalarFn = std::function<Var(Graph<double>&, const std::vector<Var>&)>;

// Compares reverse-mode gradients with (f(x+h) - f(x-h)) / 2h on `coords`
// coordinates drawn uniformly over all inputs. Relative error is
// |a - n| / max(|a|, |n|, floor) with floor = 1e-4 * max |a| over the input
// tensor, so coordinates with vanishing gradient are judged on an absolute scale.
GradCheckResult check_gradient(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, int coords = 32,
                               std::uint64_t seed = 0, double step = 1e-3);

}  // namespace dart::ad
