// SPDX-License-Identifier: Apache-2.0

#include "dart/opcheck.hpp"

#include <cmath>
#include <numbers>

#include "dart/noising.hpp"

namespace dart::ad {

namespace {

using T = Tensor<double>;

T rnd(const Shape& s, std::uint64_t seed, std::uint64_t id, double scale = 1.0) {
  T t = gaussian_like<double>(s, NoiseStream(seed, {0x6f70ULL, id}));
  for (double& x : t.data) {
    x *= scale;
  }
  return t;
}

// Contract a tensor-valued op against a fixed random projection so the
// checked scalar exercises every output element.
Var project(Graph<double>& g, Var y, std::uint64_t seed) {
  const T w = rnd(g.value(y).shape, seed, 999);
  return sum(g, mul(g, y, g.constant(w)));
}

BoolMatrix random_mask(std::int64_t r, std::int64_t c, std::uint64_t seed) {
  NoiseStream s(seed, {0x6d61ULL});
  BoolMatrix m(r, c);
  for (std::int64_t i = 0; i < r; ++i) {
    m.set(i, static_cast<std::int64_t>(s.below(static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(c))), true);
    for (std::int64_t j = 0; j < c; ++j) {
      if (s.uniform(static_cast<std::uint64_t>(1000 + i * c + j)) < 0.6) {
        m.set(i, j, true);
      }
    }
  }
  return m;
}

}  // namespace

std::vector<NamedGradCheck> op_gradient_suite(std::uint64_t seed, int coords) {
  std::vector<NamedGradCheck> out;
  auto run = [&](const std::string& name, const ScalarFn& fn, const std::vector<T>& inputs) {
    out.push_back({name, check_gradient(fn, inputs, coords, seed + out.size())});
  };
  const std::uint64_t s = seed;

  run("matmul", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, matmul(g, v[0], v[1]), s); },
      {rnd({4, 5}, s, 1), rnd({5, 3}, s, 2)});
  run("linear", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, linear(g, v[0], v[1], v[2]), s); },
      {rnd({4, 5}, s, 1), rnd({5, 3}, s, 2), rnd({3}, s, 3)});
  run("add", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, add(g, v[0], v[1]), s); },
      {rnd({3, 4}, s, 1), rnd({3, 4}, s, 2)});
  run("sub", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, sub(g, v[0], v[1]), s); },
      {rnd({3, 4}, s, 1), rnd({3, 4}, s, 2)});
  run("mul", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, mul(g, v[0], v[1]), s); },
      {rnd({3, 4}, s, 1), rnd({3, 4}, s, 2)});
  run("scale", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, scale(g, v[0], -1.7), s); },
      {rnd({3, 4}, s, 1)});
  run("silu", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, silu(g, v[0]), s); },
      {rnd({3, 4}, s, 1, 2.0)});
  run("add_bias", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, add_bias(g, v[0], v[1]), s); },
      {rnd({3, 4}, s, 1), rnd({4}, s, 2)});
  run("scale_rows",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        const std::vector<double> f{0.5, -2.0, 0.0};
        return project(g, scale_rows<double>(g, v[0], f), s);
      },
      {rnd({3, 4}, s, 1)});
  run("modulate",
      [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, modulate(g, v[0], v[1], v[2]), s); },
      {rnd({3, 4}, s, 1), rnd({3, 4}, s, 2), rnd({3, 4}, s, 3)});
  run("rmsnorm", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, rmsnorm(g, v[0], v[1]), s); },
      {rnd({3, 6}, s, 1), rnd({6}, s, 2)});
  run("swiglu",
      [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, swiglu(g, v[0], v[1], v[2], v[3]), s); },
      {rnd({3, 4}, s, 1), rnd({4, 6}, s, 2), rnd({6, 4}, s, 3), rnd({4, 6}, s, 4)});
  run("reshape", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, reshape(g, v[0], {6, 2}), s); },
      {rnd({3, 4}, s, 1)});
  run("slice_cols", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, slice_cols(g, v[0], 1, 2), s); },
      {rnd({3, 4}, s, 1)});
  run("repeat_rows", [s](Graph<double>& g, const std::vector<Var>& v) { return project(g, repeat_rows(g, v[0], 3), s); },
      {rnd({2, 4}, s, 1)});
  run("gather_rows",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        const std::vector<std::int64_t> rows{2, 0, 2, 1};
        return project(g, gather_rows<double>(g, v[0], rows), s);
      },
      {rnd({3, 4}, s, 1)});
  run("embedding",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        const std::vector<std::int64_t> ids{1, -1, 1, 0};
        return project(g, embedding<double>(g, v[0], ids), s);
      },
      {rnd({3, 4}, s, 1)});
  run("masked_softmax",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        return project(g, masked_softmax(g, v[0], random_mask(4, 4, s)), s);
      },
      {rnd({2, 4, 4}, s, 1)});
  run("rope",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        std::vector<double> ang(3 * 2);
        for (std::size_t i = 0; i < ang.size(); ++i) {
          ang[i] = 0.7 * static_cast<double>(i) - 1.0;
        }
        return project(g, rope<double>(g, v[0], ang, 2), s);
      },
      {rnd({3, 8}, s, 1)});
  run("attention",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        return project(g, attention(g, v[0], v[1], v[2], random_mask(3, 4, s), 2, 2), s);
      },
      {rnd({6, 8}, s, 1), rnd({8, 8}, s, 2), rnd({8, 8}, s, 3)});
  run("sum", [](Graph<double>& g, const std::vector<Var>& v) { return sum(g, mul(g, v[0], v[0])); },
      {rnd({3, 4}, s, 1)});
  run("weighted_x0_error",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        const std::vector<double> a{0.9, 0.3, 0.0};
        const std::vector<double> sg{std::sqrt(1 - 0.81), std::sqrt(1 - 0.09), 1.0};
        const std::vector<double> w{2.0, 0.5, 1.0};
        return weighted_x0_error<double>(g, v[0], rnd({3, 2}, s, 7), a, sg, rnd({3, 2}, s, 8), w);
      },
      {rnd({3, 2}, s, 1)});
  run("weighted_sq_error",
      [s](Graph<double>& g, const std::vector<Var>& v) {
        const std::vector<double> w{2.0, 0.5, 1.0};
        return weighted_sq_error<double>(g, v[0], rnd({3, 2}, s, 7), w);
      },
      {rnd({3, 2}, s, 1)});
  run("cross_entropy",
      [](Graph<double>& g, const std::vector<Var>& v) {
        const std::vector<std::int64_t> t{2, -1, 0, 4};
        const std::vector<double> w{1.0, 1.0, 0.5, 2.0};
        return cross_entropy<double>(g, v[0], t, w);
      },
      {rnd({4, 5}, s, 1)});
  return out;
}

}  // namespace dart::ad
