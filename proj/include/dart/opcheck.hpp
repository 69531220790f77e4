// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks for every differentiable graph op.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dart/gradcheck.hpp"

namespace dart::ad {

struct NamedGradCheck {
  std::string name;
  GradCheckResult result;
};

std::vector<NamedGradCheck> op_gradient_suite(std::uint64_t seed, int coords = 32);

}  // namespace dart::ad
