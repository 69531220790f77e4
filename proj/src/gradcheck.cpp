// SPDX-License-Identifier: Apache-2.0

#include "dart/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dart/rng.hpp"

namespace dart::ad {

namespace {

double evaluate(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs) {
  Graph<double> g(false);
  std::vector<Var> vars;
  for (const auto& t : inputs) {
    vars.push_back(g.parameter(t));
  }
  return g.value(fn(g, vars)).data.at(0);
}

}  // namespace

GradCheckResult check_gradient(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, int coords,
                               std::uint64_t seed, double step) {
  Graph<double> g(true);
  std::vector<Var> vars;
  for (const auto& t : inputs) {
    vars.push_back(g.parameter(t));
  }
  const Var root = fn(g, vars);
  g.backward(root);

  std::vector<Tensor<double>> grads;
  std::vector<double> scale;
  std::int64_t total = 0;
  for (Var v : vars) {
    grads.push_back(g.has_grad(v) ? g.grad(v) : Tensor<double>(g.value(v).shape));
    double m = 0;
    for (double x : grads.back().data) {
      m = std::max(m, std::abs(x));
    }
    scale.push_back(m);
    total += g.value(v).size();
  }

  GradCheckResult res;
  NoiseStream pick(seed, {0x6772ULL});
  std::vector<Tensor<double>> probe = inputs;
  for (int c = 0; c < coords; ++c) {
    std::int64_t flat = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(total)));
    std::size_t which = 0;
    while (flat >= probe[which].size()) {
      flat -= probe[which].size();
      ++which;
    }
    double& x = probe[which].data[static_cast<std::size_t>(flat)];
    const double orig = x;
    x = orig + step;
    const double fp = evaluate(fn, probe);
    x = orig - step;
    const double fm = evaluate(fn, probe);
    x = orig;
    const double numeric = (fp - fm) / (2 * step);
    const double analytic = grads[which].data[static_cast<std::size_t>(flat)];
    const double err = std::abs(analytic - numeric);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4 * scale[which], 1e-12});
    res.max_abs_error = std::max(res.max_abs_error, err);
    res.max_rel_error = std::max(res.max_rel_error, err / denom);
    ++res.coordinates;
  }
  return res;
}

}  // namespace dart::ad
