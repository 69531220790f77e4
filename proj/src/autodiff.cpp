// SPDX-License-Identifier: Apache-2.0

#include "dart/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

namespace dart {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) {
    if (d <= 0) {
      throw DimensionError("non-positive extent in shape " + shape_string(shape));
    }
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s += (i ? "," : "") + std::to_string(shape[i]);
  }
  return s + "]";
}

BoolMatrix BoolMatrix::block(std::int64_t row_begin, std::int64_t count, std::int64_t col_count) const {
  if (row_begin < 0 || row_begin + count > rows_ || col_count > cols_) {
    throw DimensionError("mask block out of range");
  }
  BoolMatrix out(count, col_count);
  for (std::int64_t r = 0; r < count; ++r) {
    for (std::int64_t c = 0; c < col_count; ++c) {
      out.set(r, c, (*this)(row_begin + r, c));
    }
  }
  return out;
}

}  // namespace dart

namespace dart::ad {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
Eigen::Map<RowMat<S>> as_mat(Tensor<S>& t, std::int64_t rows, std::int64_t cols) {
  return Eigen::Map<RowMat<S>>(t.data.data(), rows, cols);
}

template <typename S>
Eigen::Map<const RowMat<S>> as_mat(const Tensor<S>& t, std::int64_t rows, std::int64_t cols) {
  return Eigen::Map<const RowMat<S>>(t.data.data(), rows, cols);
}

void require(bool ok, const std::string& what) {
  if (!ok) {
    throw DimensionError(what);
  }
}

template <typename S>
void require_same_shape(const Graph<S>& g, Var a, Var b, const char* op) {
  require(g.value(a).shape == g.value(b).shape, std::string(op) + ": shape mismatch " +
                                                    shape_string(g.value(a).shape) + " vs " +
                                                    shape_string(g.value(b).shape));
}

template <typename S>
std::int64_t rank2_rows(const Tensor<S>& t, const char* op) {
  require(t.rank() == 2, std::string(op) + ": expected a matrix, got " + shape_string(t.shape));
  return t.shape[0];
}

}  // namespace

// --- Graph ------------------------------------------------------------------

template <typename S>
Var Graph<S>::constant(Tensor<S> value) {
  nodes_.push_back(Node{std::move(value), {}, false, false, {}});
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename S>
Var Graph<S>::parameter(Tensor<S> value) {
  nodes_.push_back(Node{std::move(value), {}, record_, false, {}});
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename S>
Var Graph<S>::emit(Tensor<S> value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  if (record_) {
    for (Var in : inputs) {
      if (in.valid() && requires_grad(in)) {
        needs = true;
      }
    }
  }
  nodes_.push_back(Node{std::move(value), {}, needs, false, needs ? std::move(fn) : BackwardFn{}});
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename S>
Tensor<S>& Graph<S>::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (!n.grad_ready) {
    n.grad = Tensor<S>(n.value.shape, S{0});
    n.grad_ready = true;
  }
  return n.grad;
}

template <typename S>
void Graph<S>::backward(Var root) {
  if (!record_) {
    throw std::logic_error("backward on a graph built without recording");
  }
  if (value(root).size() != 1) {
    throw DimensionError("backward root must hold a single element");
  }
  grad(root).data[0] = S{1};
  for (std::int64_t id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.requires_grad && n.grad_ready && n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

// --- linear algebra ---------------------------------------------------------

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b) {
  const Tensor<S>& av = g.value(a);
  const Tensor<S>& bv = g.value(b);
  const std::int64_t m = rank2_rows(av, "matmul");
  const std::int64_t k = av.shape[1];
  require(rank2_rows(bv, "matmul") == k, "matmul: inner dimensions disagree " + shape_string(av.shape) + " x " +
                                               shape_string(bv.shape));
  const std::int64_t n = bv.shape[1];
  Tensor<S> out({m, n});
  as_mat(out, m, n).noalias() = as_mat(av, m, k) * as_mat(bv, k, n);
  return g.emit(std::move(out), {a, b}, [a, b, m, k, n](Graph<S>& gr, const Tensor<S>& dc) {
    if (gr.requires_grad(a)) {
      as_mat(gr.grad(a), m, k).noalias() += as_mat(dc, m, n) * as_mat(gr.value(b), k, n).transpose();
    }
    if (gr.requires_grad(b)) {
      as_mat(gr.grad(b), k, n).noalias() += as_mat(gr.value(a), m, k).transpose() * as_mat(dc, m, n);
    }
  });
}

template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var bias) {
  Var y = matmul(g, x, w);
  return bias.valid() ? add_bias(g, y, bias) : y;
}

// --- elementwise ------------------------------------------------------------

template <typename S>
Var add(Graph<S>& g, Var a, Var b) {
  require_same_shape(g, a, b, "add");
  Tensor<S> out = g.value(a);
  const auto& bv = g.value(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] += bv[i];
  }
  return g.emit(std::move(out), {a, b}, [a, b](Graph<S>& gr, const Tensor<S>& d) {
    for (Var in : {a, b}) {
      if (gr.requires_grad(in)) {
        auto& gi = gr.grad(in).data;
        for (std::size_t i = 0; i < gi.size(); ++i) {
          gi[i] += d.data[i];
        }
      }
    }
  });
}

template <typename S>
Var sub(Graph<S>& g, Var a, Var b) {
  require_same_shape(g, a, b, "sub");
  Tensor<S> out = g.value(a);
  const auto& bv = g.value(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] -= bv[i];
  }
  return g.emit(std::move(out), {a, b}, [a, b](Graph<S>& gr, const Tensor<S>& d) {
    if (gr.requires_grad(a)) {
      auto& ga = gr.grad(a).data;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += d.data[i];
      }
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad(b).data;
      for (std::size_t i = 0; i < gb.size(); ++i) {
        gb[i] -= d.data[i];
      }
    }
  });
}

template <typename S>
Var mul(Graph<S>& g, Var a, Var b) {
  require_same_shape(g, a, b, "mul");
  Tensor<S> out = g.value(a);
  const auto& bv = g.value(b).data;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] *= bv[i];
  }
  return g.emit(std::move(out), {a, b}, [a, b](Graph<S>& gr, const Tensor<S>& d) {
    if (gr.requires_grad(a)) {
      auto& ga = gr.grad(a).data;
      const auto& bv = gr.value(b).data;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += d.data[i] * bv[i];
      }
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad(b).data;
      const auto& av = gr.value(a).data;
      for (std::size_t i = 0; i < gb.size(); ++i) {
        gb[i] += d.data[i] * av[i];
      }
    }
  });
}

template <typename S>
Var scale(Graph<S>& g, Var a, S factor) {
  Tensor<S> out = g.value(a);
  for (S& v : out.data) {
    v *= factor;
  }
  return g.emit(std::move(out), {a}, [a, factor](Graph<S>& gr, const Tensor<S>& d) {
    auto& ga = gr.grad(a).data;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      ga[i] += d.data[i] * factor;
    }
  });
}

template <typename S>
Var silu(Graph<S>& g, Var x) {
  Tensor<S> out = g.value(x);
  for (S& v : out.data) {
    v = v / (S{1} + std::exp(-v));
  }
  return g.emit(std::move(out), {x}, [x](Graph<S>& gr, const Tensor<S>& d) {
    auto& gx = gr.grad(x).data;
    const auto& xv = gr.value(x).data;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const S s = S{1} / (S{1} + std::exp(-xv[i]));
      gx[i] += d.data[i] * s * (S{1} + xv[i] * (S{1} - s));
    }
  });
}

template <typename S>
Var add_bias(Graph<S>& g, Var x, Var b) {
  const Tensor<S>& xv = g.value(x);
  const Tensor<S>& bv = g.value(b);
  const std::int64_t d = xv.cols();
  require(bv.size() == d, "add_bias: bias length " + std::to_string(bv.size()) + " vs row width " + std::to_string(d));
  const std::int64_t n = xv.rows();
  Tensor<S> out = xv;
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < d; ++c) {
      out.data[static_cast<std::size_t>(r * d + c)] += bv.data[static_cast<std::size_t>(c)];
    }
  }
  return g.emit(std::move(out), {x, b}, [x, b, n, d](Graph<S>& gr, const Tensor<S>& dy) {
    if (gr.requires_grad(x)) {
      auto& gx = gr.grad(x).data;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += dy.data[i];
      }
    }
    if (gr.requires_grad(b)) {
      auto& gb = gr.grad(b).data;
      for (std::int64_t r = 0; r < n; ++r) {
        for (std::int64_t c = 0; c < d; ++c) {
          gb[static_cast<std::size_t>(c)] += dy.data[static_cast<std::size_t>(r * d + c)];
        }
      }
    }
  });
}

template <typename S>
Var scale_rows(Graph<S>& g, Var x, std::span<const S> factors) {
  const Tensor<S>& xv = g.value(x);
  const std::int64_t n = xv.rows();
  const std::int64_t d = xv.cols();
  require(static_cast<std::int64_t>(factors.size()) == n, "scale_rows: factor count mismatch");
  std::vector<S> f(factors.begin(), factors.end());
  Tensor<S> out = xv;
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t c = 0; c < d; ++c) {
      out.data[static_cast<std::size_t>(r * d + c)] *= f[static_cast<std::size_t>(r)];
    }
  }
  return g.emit(std::move(out), {x}, [x, f = std::move(f), n, d](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gx = gr.grad(x).data;
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t c = 0; c < d; ++c) {
        const auto i = static_cast<std::size_t>(r * d + c);
        gx[i] += dy.data[i] * f[static_cast<std::size_t>(r)];
      }
    }
  });
}

template <typename S>
Var modulate(Graph<S>& g, Var x, Var shift, Var scale) {
  require_same_shape(g, x, shift, "modulate");
  require_same_shape(g, x, scale, "modulate");
  const auto& xv = g.value(x).data;
  const auto& sh = g.value(shift).data;
  const auto& sc = g.value(scale).data;
  Tensor<S> out(g.value(x).shape);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out.data[i] = xv[i] * (S{1} + sc[i]) + sh[i];
  }
  return g.emit(std::move(out), {x, shift, scale}, [x, shift, scale](Graph<S>& gr, const Tensor<S>& d) {
    const auto& xv = gr.value(x).data;
    const auto& sc = gr.value(scale).data;
    if (gr.requires_grad(x)) {
      auto& gx = gr.grad(x).data;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        gx[i] += d.data[i] * (S{1} + sc[i]);
      }
    }
    if (gr.requires_grad(shift)) {
      auto& gs = gr.grad(shift).data;
      for (std::size_t i = 0; i < gs.size(); ++i) {
        gs[i] += d.data[i];
      }
    }
    if (gr.requires_grad(scale)) {
      auto& gs = gr.grad(scale).data;
      for (std::size_t i = 0; i < gs.size(); ++i) {
        gs[i] += d.data[i] * xv[i];
      }
    }
  });
}

template <typename S>
Var rmsnorm(Graph<S>& g, Var x, Var gain) {
  const Tensor<S>& xv = g.value(x);
  const std::int64_t n = xv.rows();
  const std::int64_t d = xv.cols();
  require(g.value(gain).size() == d, "rmsnorm: gain length mismatch");
  const auto& gv = g.value(gain).data;
  auto inv = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n));
  Tensor<S> out(xv.shape);
  for (std::int64_t r = 0; r < n; ++r) {
    const S* row = xv.data.data() + r * d;
    S ms{0};
    for (std::int64_t c = 0; c < d; ++c) {
      ms += row[c] * row[c];
    }
    ms /= static_cast<S>(d);
    const S ir = S{1} / std::sqrt(ms + static_cast<S>(kRmsNormEps));
    (*inv)[static_cast<std::size_t>(r)] = ir;
    for (std::int64_t c = 0; c < d; ++c) {
      out.data[static_cast<std::size_t>(r * d + c)] = row[c] * ir * gv[static_cast<std::size_t>(c)];
    }
  }
  return g.emit(std::move(out), {x, gain}, [x, gain, inv, n, d](Graph<S>& gr, const Tensor<S>& dy) {
    const auto& xv = gr.value(x).data;
    const auto& gv = gr.value(gain).data;
    const bool want_x = gr.requires_grad(x);
    const bool want_g = gr.requires_grad(gain);
    std::vector<S>* gx = want_x ? &gr.grad(x).data : nullptr;
    std::vector<S>* gg = want_g ? &gr.grad(gain).data : nullptr;
    for (std::int64_t r = 0; r < n; ++r) {
      const S ir = (*inv)[static_cast<std::size_t>(r)];
      const std::size_t base = static_cast<std::size_t>(r * d);
      if (want_g) {
        for (std::int64_t c = 0; c < d; ++c) {
          (*gg)[static_cast<std::size_t>(c)] += dy.data[base + c] * xv[base + c] * ir;
        }
      }
      if (want_x) {
        S dot{0};
        for (std::int64_t c = 0; c < d; ++c) {
          dot += dy.data[base + c] * gv[static_cast<std::size_t>(c)] * xv[base + c];
        }
        const S k = dot * ir * ir * ir / static_cast<S>(d);
        for (std::int64_t c = 0; c < d; ++c) {
          (*gx)[base + c] += dy.data[base + c] * gv[static_cast<std::size_t>(c)] * ir - xv[base + c] * k;
        }
      }
    }
  });
}

template <typename S>
Var swiglu(Graph<S>& g, Var x, Var w1, Var w2, Var w3) {
  Var gate = silu(g, matmul(g, x, w1));
  Var up = matmul(g, x, w3);
  return matmul(g, mul(g, gate, up), w2);
}

// --- shape ------------------------------------------------------------------

template <typename S>
Var reshape(Graph<S>& g, Var x, Shape shape) {
  Tensor<S> out = g.value(x);
  require(numel(shape) == out.size(), "reshape: element count changes " + shape_string(out.shape) + " -> " +
                                          shape_string(shape));
  out.shape = std::move(shape);
  return g.emit(std::move(out), {x}, [x](Graph<S>& gr, const Tensor<S>& d) {
    auto& gx = gr.grad(x).data;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += d.data[i];
    }
  });
}

template <typename S>
Var slice_cols(Graph<S>& g, Var x, std::int64_t begin, std::int64_t count) {
  const Tensor<S>& xv = g.value(x);
  const std::int64_t n = xv.rows();
  const std::int64_t d = xv.cols();
  require(begin >= 0 && count > 0 && begin + count <= d, "slice_cols: range out of bounds");
  Tensor<S> out({n, count});
  for (std::int64_t r = 0; r < n; ++r) {
    std::copy_n(xv.data.begin() + r * d + begin, count, out.data.begin() + r * count);
  }
  return g.emit(std::move(out), {x}, [x, n, d, begin, count](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gx = gr.grad(x).data;
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t c = 0; c < count; ++c) {
        gx[static_cast<std::size_t>(r * d + begin + c)] += dy.data[static_cast<std::size_t>(r * count + c)];
      }
    }
  });
}

template <typename S>
Var repeat_rows(Graph<S>& g, Var x, std::int64_t reps) {
  const Tensor<S>& xv = g.value(x);
  const std::int64_t n = xv.rows();
  const std::int64_t d = xv.cols();
  Tensor<S> out({n * reps, d});
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t k = 0; k < reps; ++k) {
      std::copy_n(xv.data.begin() + r * d, d, out.data.begin() + (r * reps + k) * d);
    }
  }
  return g.emit(std::move(out), {x}, [x, n, d, reps](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gx = gr.grad(x).data;
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t k = 0; k < reps; ++k) {
        for (std::int64_t c = 0; c < d; ++c) {
          gx[static_cast<std::size_t>(r * d + c)] += dy.data[static_cast<std::size_t>((r * reps + k) * d + c)];
        }
      }
    }
  });
}

template <typename S>
Var gather_rows(Graph<S>& g, Var x, std::span<const std::int64_t> rows) {
  const Tensor<S>& xv = g.value(x);
  const std::int64_t n = xv.rows();
  const std::int64_t d = xv.cols();
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  for (std::int64_t r : idx) {
    require(r >= 0 && r < n, "gather_rows: index out of range");
  }
  Tensor<S> out({static_cast<std::int64_t>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(xv.data.begin() + idx[i] * d, d, out.data.begin() + static_cast<std::int64_t>(i) * d);
  }
  return g.emit(std::move(out), {x}, [x, idx = std::move(idx), d](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gx = gr.grad(x).data;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::int64_t c = 0; c < d; ++c) {
        gx[static_cast<std::size_t>(idx[i] * d + c)] += dy.data[i * static_cast<std::size_t>(d) + c];
      }
    }
  });
}

template <typename S>
Var embedding(Graph<S>& g, Var table, std::span<const std::int64_t> ids) {
  const Tensor<S>& tv = g.value(table);
  const std::int64_t vocab = tv.rows();
  const std::int64_t d = tv.cols();
  std::vector<std::int64_t> idx(ids.begin(), ids.end());
  for (std::int64_t id : idx) {
    require(id < vocab, "embedding: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
  }
  Tensor<S> out({static_cast<std::int64_t>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= 0) {
      std::copy_n(tv.data.begin() + idx[i] * d, d, out.data.begin() + static_cast<std::int64_t>(i) * d);
    }
  }
  return g.emit(std::move(out), {table}, [table, idx = std::move(idx), d](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gt = gr.grad(table).data;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] < 0) {
        continue;
      }
      for (std::int64_t c = 0; c < d; ++c) {
        gt[static_cast<std::size_t>(idx[i] * d + c)] += dy.data[i * static_cast<std::size_t>(d) + c];
      }
    }
  });
}

// --- attention --------------------------------------------------------------

template <typename S>
void masked_softmax_row(const S* logits, const std::uint8_t* visible, S* out, std::int64_t n) {
  S mx = -std::numeric_limits<S>::infinity();
  bool any = false;
  for (std::int64_t j = 0; j < n; ++j) {
    if (visible[j]) {
      mx = std::max(mx, logits[j]);
      any = true;
    }
  }
  if (!any) {
    throw DegenerateRowError("masked_softmax: row has no visible entry");
  }
  S total{0};
  for (std::int64_t j = 0; j < n; ++j) {
    out[j] = visible[j] ? std::exp(logits[j] - mx) : S{0};
    total += out[j];
  }
  for (std::int64_t j = 0; j < n; ++j) {
    out[j] /= total;
  }
}

template <typename S>
Var masked_softmax(Graph<S>& g, Var logits, const BoolMatrix& mask) {
  const Tensor<S>& lv = g.value(logits);
  require(lv.rank() >= 2, "masked_softmax: logits need at least two axes");
  const std::int64_t rows = lv.shape[lv.shape.size() - 2];
  const std::int64_t cols = lv.shape.back();
  require(mask.rows() == rows && mask.cols() == cols, "masked_softmax: mask shape mismatch");
  const std::int64_t blocks = lv.size() / (rows * cols);
  Tensor<S> out(lv.shape);
  for (std::int64_t b = 0; b < blocks; ++b) {
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t off = (b * rows + r) * cols;
      masked_softmax_row(lv.data.data() + off, mask.row(r), out.data.data() + off, cols);
    }
  }
  const std::int64_t total_rows = blocks * rows;
  auto probs = std::make_shared<std::vector<S>>(out.data);
  return g.emit(std::move(out), {logits}, [logits, probs, total_rows, cols](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gl = gr.grad(logits).data;
    for (std::int64_t r = 0; r < total_rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r * cols);
      S weighted{0};
      for (std::int64_t j = 0; j < cols; ++j) {
        weighted += (*probs)[off + j] * dy.data[off + j];
      }
      for (std::int64_t j = 0; j < cols; ++j) {
        gl[off + j] += (*probs)[off + j] * (dy.data[off + j] - weighted);
      }
    }
  });
}

template <typename S>
Var rope(Graph<S>& g, Var x, std::span<const S> angles, std::int64_t heads) {
  const Tensor<S>& xv = g.value(x);
  const std::int64_t n = xv.rows();
  const std::int64_t width = xv.cols();
  require(heads > 0 && width % heads == 0, "rope: width not divisible by heads");
  const std::int64_t d = width / heads;
  require(d % 2 == 0, "rope: head dimension must be even");
  const std::int64_t half = d / 2;
  require(static_cast<std::int64_t>(angles.size()) == n * half, "rope: angle table size mismatch");
  auto cs = std::make_shared<std::vector<S>>(angles.size() * 2);
  for (std::size_t i = 0; i < angles.size(); ++i) {
    (*cs)[2 * i] = std::cos(angles[i]);
    (*cs)[2 * i + 1] = std::sin(angles[i]);
  }
  Tensor<S> out(xv.shape);
  for (std::int64_t r = 0; r < n; ++r) {
    for (std::int64_t h = 0; h < heads; ++h) {
      for (std::int64_t i = 0; i < half; ++i) {
        const std::size_t a = static_cast<std::size_t>(r * half + i);
        const S c = (*cs)[2 * a];
        const S s = (*cs)[2 * a + 1];
        const std::size_t p = static_cast<std::size_t>(r * width + h * d + 2 * i);
        const S x0 = xv.data[p];
        const S x1 = xv.data[p + 1];
        out.data[p] = x0 * c - x1 * s;
        out.data[p + 1] = x0 * s + x1 * c;
      }
    }
  }
  return g.emit(std::move(out), {x}, [x, cs, n, heads, d, half, width](Graph<S>& gr, const Tensor<S>& dy) {
    auto& gx = gr.grad(x).data;
    for (std::int64_t r = 0; r < n; ++r) {
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t i = 0; i < half; ++i) {
          const std::size_t a = static_cast<std::size_t>(r * half + i);
          const S c = (*cs)[2 * a];
          const S s = (*cs)[2 * a + 1];
          const std::size_t p = static_cast<std::size_t>(r * width + h * d + 2 * i);
          gx[p] += dy.data[p] * c + dy.data[p + 1] * s;
          gx[p + 1] += -dy.data[p] * s + dy.data[p + 1] * c;
        }
      }
    }
  });
}

template <typename S>
Var attention(Graph<S>& g, Var q, Var k, Var v, const BoolMatrix& mask, std::int64_t batch, std::int64_t heads) {
  const Tensor<S>& qv = g.value(q);
  const Tensor<S>& kv = g.value(k);
  const Tensor<S>& vv = g.value(v);
  const std::int64_t width = qv.cols();
  require(kv.cols() == width && vv.cols() == width, "attention: width mismatch");
  require(kv.shape == vv.shape, "attention: key/value shape mismatch");
  require(batch > 0 && qv.rows() % batch == 0 && kv.rows() % batch == 0, "attention: rows not divisible by batch");
  const std::int64_t lq = qv.rows() / batch;
  const std::int64_t lk = kv.rows() / batch;
  require(mask.rows() == lq && mask.cols() == lk, "attention: mask shape mismatch");
  require(width % heads == 0, "attention: width not divisible by heads");
  const std::int64_t d = width / heads;
  const S sc = S{1} / std::sqrt(static_cast<S>(d));

  auto probs = std::make_shared<std::vector<S>>(static_cast<std::size_t>(batch * heads * lq * lk));
  std::vector<S> logits(static_cast<std::size_t>(lk));
  Tensor<S> out({batch * lq, width});
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      for (std::int64_t i = 0; i < lq; ++i) {
        const S* qi = qv.data.data() + (b * lq + i) * width + h * d;
        const std::uint8_t* vis = mask.row(i);
        for (std::int64_t j = 0; j < lk; ++j) {
          if (!vis[j]) {
            logits[static_cast<std::size_t>(j)] = S{0};
            continue;
          }
          const S* kj = kv.data.data() + (b * lk + j) * width + h * d;
          S dot{0};
          for (std::int64_t c = 0; c < d; ++c) {
            dot += qi[c] * kj[c];
          }
          logits[static_cast<std::size_t>(j)] = dot * sc;
        }
        S* p = probs->data() + ((b * heads + h) * lq + i) * lk;
        masked_softmax_row(logits.data(), vis, p, lk);
        S* oi = out.data.data() + (b * lq + i) * width + h * d;
        for (std::int64_t j = 0; j < lk; ++j) {
          if (p[j] == S{0}) {
            continue;
          }
          const S* vj = vv.data.data() + (b * lk + j) * width + h * d;
          for (std::int64_t c = 0; c < d; ++c) {
            oi[c] += p[j] * vj[c];
          }
        }
      }
    }
  }
  return g.emit(std::move(out), {q, k, v},
                [q, k, v, probs, batch, heads, lq, lk, d, width, sc](Graph<S>& gr, const Tensor<S>& dy) {
                  const auto& qv = gr.value(q).data;
                  const auto& kv = gr.value(k).data;
                  const auto& vv = gr.value(v).data;
                  std::vector<S> dq_dummy;
                  std::vector<S>& gq = gr.requires_grad(q) ? gr.grad(q).data : dq_dummy;
                  std::vector<S> dk_dummy;
                  std::vector<S>& gk = gr.requires_grad(k) ? gr.grad(k).data : dk_dummy;
                  std::vector<S> dv_dummy;
                  std::vector<S>& gv = gr.requires_grad(v) ? gr.grad(v).data : dv_dummy;
                  const bool want_q = !gq.empty();
                  const bool want_k = !gk.empty();
                  const bool want_v = !gv.empty();
                  std::vector<S> dp(static_cast<std::size_t>(lk));
                  for (std::int64_t b = 0; b < batch; ++b) {
                    for (std::int64_t h = 0; h < heads; ++h) {
                      for (std::int64_t i = 0; i < lq; ++i) {
                        const S* p = probs->data() + ((b * heads + h) * lq + i) * lk;
                        const S* doi = dy.data.data() + (b * lq + i) * width + h * d;
                        S weighted{0};
                        for (std::int64_t j = 0; j < lk; ++j) {
                          if (p[j] == S{0}) {
                            dp[static_cast<std::size_t>(j)] = S{0};
                            continue;
                          }
                          const std::size_t voff = static_cast<std::size_t>((b * lk + j) * width + h * d);
                          S dot{0};
                          for (std::int64_t c = 0; c < d; ++c) {
                            dot += doi[c] * vv[voff + c];
                          }
                          dp[static_cast<std::size_t>(j)] = dot;
                          weighted += p[j] * dot;
                          if (want_v) {
                            for (std::int64_t c = 0; c < d; ++c) {
                              gv[voff + c] += p[j] * doi[c];
                            }
                          }
                        }
                        const std::size_t qoff = static_cast<std::size_t>((b * lq + i) * width + h * d);
                        for (std::int64_t j = 0; j < lk; ++j) {
                          if (p[j] == S{0}) {
                            continue;
                          }
                          const S ds = p[j] * (dp[static_cast<std::size_t>(j)] - weighted) * sc;
                          const std::size_t koff = static_cast<std::size_t>((b * lk + j) * width + h * d);
                          if (want_q) {
                            for (std::int64_t c = 0; c < d; ++c) {
                              gq[qoff + c] += ds * kv[koff + c];
                            }
                          }
                          if (want_k) {
                            for (std::int64_t c = 0; c < d; ++c) {
                              gk[koff + c] += ds * qv[qoff + c];
                            }
                          }
                        }
                      }
                    }
                  }
                });
}

// --- reductions and losses --------------------------------------------------

template <typename S>
Var sum(Graph<S>& g, Var x) {
  S total{0};
  for (S v : g.value(x).data) {
    total += v;
  }
  return g.emit(Tensor<S>({1}, std::vector<S>{total}), {x}, [x](Graph<S>& gr, const Tensor<S>& d) {
    for (S& v : gr.grad(x).data) {
      v += d.data[0];
    }
  });
}

template <typename S>
Var weighted_x0_error(Graph<S>& g, Var v, const Tensor<S>& ref, std::span<const S> alpha, std::span<const S> sigma,
                      const Tensor<S>& target, std::span<const S> weight) {
  const Tensor<S>& vv = g.value(v);
  const std::int64_t n = vv.rows();
  const std::int64_t c = vv.cols();
  require(ref.shape == vv.shape && target.shape == vv.shape, "weighted_x0_error: shape mismatch");
  require(static_cast<std::int64_t>(alpha.size()) == n && static_cast<std::int64_t>(sigma.size()) == n &&
              static_cast<std::int64_t>(weight.size()) == n,
          "weighted_x0_error: per-row coefficient count mismatch");
  // Residual scaled so that d(loss)/dv = resid_grad.
  auto resid_grad = std::make_shared<std::vector<S>>(vv.data.size(), S{0});
  S total{0};
  for (std::int64_t r = 0; r < n; ++r) {
    const S w = weight[static_cast<std::size_t>(r)];
    if (w == S{0}) {
      continue;
    }
    const S a = alpha[static_cast<std::size_t>(r)];
    const S s = sigma[static_cast<std::size_t>(r)];
    S row_total{0};
    for (std::int64_t j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r * c + j);
      const S e = a * ref.data[i] - s * vv.data[i] - target.data[i];
      row_total += e * e;
      (*resid_grad)[i] = S{-2} * w * s * e;
    }
    total += w * row_total;
  }
  return g.emit(Tensor<S>({1}, std::vector<S>{total}), {v}, [v, resid_grad](Graph<S>& gr, const Tensor<S>& d) {
    auto& gv = gr.grad(v).data;
    for (std::size_t i = 0; i < gv.size(); ++i) {
      gv[i] += d.data[0] * (*resid_grad)[i];
    }
  });
}

template <typename S>
Var weighted_sq_error(Graph<S>& g, Var pred, const Tensor<S>& target, std::span<const S> weight) {
  const Tensor<S>& pv = g.value(pred);
  const std::int64_t n = pv.rows();
  const std::int64_t c = pv.cols();
  require(target.shape == pv.shape, "weighted_sq_error: shape mismatch");
  require(static_cast<std::int64_t>(weight.size()) == n, "weighted_sq_error: weight count mismatch");
  auto resid_grad = std::make_shared<std::vector<S>>(pv.data.size(), S{0});
  S total{0};
  for (std::int64_t r = 0; r < n; ++r) {
    const S w = weight[static_cast<std::size_t>(r)];
    S row_total{0};
    for (std::int64_t j = 0; j < c; ++j) {
      const std::size_t i = static_cast<std::size_t>(r * c + j);
      const S e = pv.data[i] - target.data[i];
      row_total += e * e;
      (*resid_grad)[i] = S{2} * w * e;
    }
    total += w * row_total;
  }
  return g.emit(Tensor<S>({1}, std::vector<S>{total}), {pred}, [pred, resid_grad](Graph<S>& gr, const Tensor<S>& d) {
    auto& gp = gr.grad(pred).data;
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += d.data[0] * (*resid_grad)[i];
    }
  });
}

template <typename S>
Var cross_entropy(Graph<S>& g, Var logits, std::span<const std::int64_t> targets, std::span<const S> weight) {
  const Tensor<S>& lv = g.value(logits);
  const std::int64_t n = lv.rows();
  const std::int64_t vocab = lv.cols();
  require(static_cast<std::int64_t>(targets.size()) == n && static_cast<std::int64_t>(weight.size()) == n,
          "cross_entropy: per-row count mismatch");
  auto dlogits = std::make_shared<std::vector<S>>(lv.data.size(), S{0});
  S total{0};
  for (std::int64_t r = 0; r < n; ++r) {
    const std::int64_t t = targets[static_cast<std::size_t>(r)];
    if (t < 0) {
      continue;
    }
    require(t < vocab, "cross_entropy: target outside vocabulary");
    const S w = weight[static_cast<std::size_t>(r)];
    const S* row = lv.data.data() + r * vocab;
    const S mx = *std::max_element(row, row + vocab);
    S z{0};
    for (std::int64_t j = 0; j < vocab; ++j) {
      z += std::exp(row[j] - mx);
    }
    const S lse = mx + std::log(z);
    total += w * (lse - row[t]);
    for (std::int64_t j = 0; j < vocab; ++j) {
      (*dlogits)[static_cast<std::size_t>(r * vocab + j)] = w * std::exp(row[j] - lse);
    }
    (*dlogits)[static_cast<std::size_t>(r * vocab + t)] -= w;
  }
  return g.emit(Tensor<S>({1}, std::vector<S>{total}), {logits}, [logits, dlogits](Graph<S>& gr, const Tensor<S>& d) {
    auto& gl = gr.grad(logits).data;
    for (std::size_t i = 0; i < gl.size(); ++i) {
      gl[i] += d.data[0] * (*dlogits)[i];
    }
  });
}

// --- instantiation ----------------------------------------------------------

#define DART_INSTANTIATE(S)                                                                                       \
  template class Graph<S>;                                                                                        \
  template Var matmul(Graph<S>&, Var, Var);                                                                       \
  template Var linear(Graph<S>&, Var, Var, Var);                                                                  \
  template Var add(Graph<S>&, Var, Var);                                                                          \
  template Var sub(Graph<S>&, Var, Var);                                                                          \
  template Var mul(Graph<S>&, Var, Var);                                                                          \
  template Var scale(Graph<S>&, Var, S);                                                                          \
  template Var silu(Graph<S>&, Var);                                                                              \
  template Var add_bias(Graph<S>&, Var, Var);                                                                     \
  template Var scale_rows(Graph<S>&, Var, std::span<const S>);                                                    \
  template Var modulate(Graph<S>&, Var, Var, Var);                                                                \
  template Var rmsnorm(Graph<S>&, Var, Var);                                                                      \
  template Var swiglu(Graph<S>&, Var, Var, Var, Var);                                                             \
  template Var reshape(Graph<S>&, Var, Shape);                                                                    \
  template Var slice_cols(Graph<S>&, Var, std::int64_t, std::int64_t);                                            \
  template Var repeat_rows(Graph<S>&, Var, std::int64_t);                                                         \
  template Var gather_rows(Graph<S>&, Var, std::span<const std::int64_t>);                                        \
  template Var embedding(Graph<S>&, Var, std::span<const std::int64_t>);                                          \
  template void masked_softmax_row(const S*, const std::uint8_t*, S*, std::int64_t);                              \
  template Var masked_softmax(Graph<S>&, Var, const BoolMatrix&);                                                 \
  template Var rope(Graph<S>&, Var, std::span<const S>, std::int64_t);                                            \
  template Var attention(Graph<S>&, Var, Var, Var, const BoolMatrix&, std::int64_t, std::int64_t);                \
  template Var sum(Graph<S>&, Var);                                                                               \
  template Var weighted_x0_error(Graph<S>&, Var, const Tensor<S>&, std::span<const S>, std::span<const S>,        \
                                 const Tensor<S>&, std::span<const S>);                                           \
  template Var weighted_sq_error(Graph<S>&, Var, const Tensor<S>&, std::span<const S>);                           \
  template Var cross_entropy(Graph<S>&, Var, std::span<const std::int64_t>, std::span<const S>);

DART_INSTANTIATE(float)
DART_INSTANTIATE(double)

}  // namespace dart::ad
