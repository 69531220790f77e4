// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "dart/autodiff.hpp"
#include "dart/noising.hpp"
#include "dart/opcheck.hpp"

using namespace dart;
using namespace dart::ad;

namespace {

Tensor<double> rnd(const Shape& s, std::uint64_t id) { return gaussian_like<double>(s, NoiseStream(11, {id})); }

}  // namespace

TEST(Matmul, IdentityLeavesInputUnchanged) {
  Graph<double> g;
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) {
    eye.at(i, i) = 1;
  }
  const auto x = rnd({3, 2}, 1);
  const Var y = matmul(g, g.constant(eye), g.constant(x));
  EXPECT_EQ(g.value(y).data, x.data);
}

TEST(Matmul, ScalarProduct) {
  Graph<double> g;
  const Var y = matmul(g, g.constant(Tensor<double>({1, 1}, {2.0})), g.constant(Tensor<double>({1, 1}, {3.0})));
  EXPECT_EQ(g.value(y).data[0], 6.0);
}

TEST(Matmul, InnerDimensionMismatchThrows) {
  Graph<double> g;
  EXPECT_THROW(matmul(g, g.constant(rnd({2, 3}, 1)), g.constant(rnd({4, 2}, 2))), DimensionError);
}

TEST(MaskedSoftmax, EqualLogitsGiveUniformRow) {
  Graph<double> g;
  const Var p = masked_softmax(g, g.constant(Tensor<double>({1, 4}, 0.3)), BoolMatrix(1, 4, true));
  for (double v : g.value(p).data) {
    EXPECT_DOUBLE_EQ(v, 0.25);
  }
}

TEST(MaskedSoftmax, SingleVisibleEntryGetsAllMass) {
  BoolMatrix m(1, 4);
  m.set(0, 2, true);
  Graph<double> g;
  const Var p = masked_softmax(g, g.constant(rnd({1, 4}, 3)), m);
  EXPECT_EQ(g.value(p).data, (std::vector<double>{0, 0, 1, 0}));
}

TEST(MaskedSoftmax, MatchesNegativeInfinitySubstitution) {
  const std::int64_t L = 7;
  NoiseStream s(5, {});
  BoolMatrix m(L, L);
  for (std::int64_t i = 0; i < L; ++i) {
    m.set(i, i, true);
    for (std::int64_t j = 0; j < L; ++j) {
      if (s.uniform(static_cast<std::uint64_t>(i * L + j)) < 0.5) {
        m.set(i, j, true);
      }
    }
  }
  Tensor<float> logits = rnd({L, L}, 4).cast<float>();
  for (float& v : logits.data) {
    v *= 5;
  }
  Graph<float> g;
  const auto& p = g.value(masked_softmax(g, g.constant(logits), m));
  for (std::int64_t i = 0; i < L; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> z(L);
    for (std::int64_t j = 0; j < L; ++j) {
      z[j] = m(i, j) ? logits.at(i, j) : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, z[j]);
    }
    double tot = 0;
    for (auto& v : z) {
      v = std::exp(v - mx);
      tot += v;
    }
    double row = 0;
    for (std::int64_t j = 0; j < L; ++j) {
      EXPECT_NEAR(p.at(i, j), z[j] / tot, 1e-6);
      if (!m(i, j)) {
        EXPECT_EQ(p.at(i, j), 0.0f);
      }
      row += p.at(i, j);
    }
    EXPECT_NEAR(row, 1.0, 1e-6);
  }
}

TEST(MaskedSoftmax, FullyMaskedRowThrows) {
  Graph<double> g;
  BoolMatrix m(2, 3, true);
  m.set(1, 0, false);
  m.set(1, 1, false);
  m.set(1, 2, false);
  EXPECT_THROW(masked_softmax(g, g.constant(rnd({2, 3}, 1)), m), DegenerateRowError);
}

TEST(Elementwise, RmsNormOfConstantVector) {
  for (double c : {3.0, -0.5, 1e-2}) {
    Graph<double> g;
    const Var y = rmsnorm(g, g.constant(Tensor<double>({1, 5}, c)), g.constant(Tensor<double>({5}, 1.0)));
    const double expect = (c > 0 ? 1.0 : -1.0) / std::sqrt(1.0 + kRmsNormEps / (c * c));
    for (double v : g.value(y).data) {
      EXPECT_NEAR(v, expect, 1e-12);
    }
  }
}

TEST(Elementwise, SiluOfZeroIsZero) {
  Graph<double> g;
  EXPECT_EQ(g.value(silu(g, g.constant(Tensor<double>({1, 1}, 0.0)))).data[0], 0.0);
}

TEST(Elementwise, AddShapeMismatchThrows) {
  Graph<double> g;
  EXPECT_THROW(add(g, g.constant(rnd({2, 3}, 1)), g.constant(rnd({3, 2}, 2))), DimensionError);
}

TEST(GradientCheck, EveryOpMatchesFiniteDifferences) {
  for (const auto& c : op_gradient_suite(2024, 48)) {
    EXPECT_GE(c.result.coordinates, 32) << c.name;
    EXPECT_LT(c.result.max_rel_error, 1e-3) << c.name;
  }
}

TEST(Graph, ForwardIsBitIdentical) {
  auto run = [] {
    Graph<float> g;
    const Var x = g.constant(rnd({5, 8}, 1).cast<float>());
    const Var w = g.parameter(rnd({8, 8}, 2).cast<float>());
    BoolMatrix m(5, 5, true);
    return g.value(attention(g, matmul(g, x, w), x, x, m, 1, 2)).data;
  };
  EXPECT_EQ(run(), run());
}

TEST(Graph, FanOutAccumulatesAdditively) {
  Graph<double> g;
  const Var x = g.parameter(rnd({2, 3}, 1));
  const Var y = add(g, sum(g, mul(g, x, x)), sum(g, scale(g, x, 3.0)));
  g.backward(y);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(g.grad(x).data[i], 2 * g.value(x).data[i] + 3.0, 1e-12);
  }
}

TEST(Graph, GradientOfSumIsSumOfGradients) {
  const auto xv = rnd({3, 4}, 1);
  const auto wv = rnd({4, 2}, 2);
  auto grad_of = [&](int which) {
    Graph<double> g;
    const Var x = g.parameter(xv);
    const Var y = matmul(g, x, g.constant(wv));
    const Var a = sum(g, silu(g, y));
    const Var b = sum(g, mul(g, y, y));
    g.backward(which == 0 ? a : which == 1 ? b : add(g, a, b));
    return g.grad(x).data;
  };
  const auto ga = grad_of(0);
  const auto gb = grad_of(1);
  const auto gab = grad_of(2);
  for (std::size_t i = 0; i < ga.size(); ++i) {
    EXPECT_NEAR(gab[i], ga[i] + gb[i], 1e-12);
  }
}

TEST(Graph, BackwardWithoutRecordingThrows) {
  Graph<double> g(false);
  const Var x = g.parameter(rnd({1, 1}, 1));
  EXPECT_THROW(g.backward(sum(g, x)), std::logic_error);
}
