// SPDX-License-Identifier: Apache-2.0
//
// Tape-based reverse-mode differentiation over dense tensors.
//
// A Graph owns every value produced during a forward pass. Nodes are appended
// in execution order, so reverse creation order is a valid topological order
// for the backward sweep. Ops take and return Var handles; values and
// gradients are read back through the graph.
//
// Instantiated for float (training) and double (verification).

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dart/tensor.hpp"

namespace dart::ad {

class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

template <typename S>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, const Tensor<S>& out_grad)>;

  // With record == false no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) {}

  Var constant(Tensor<S> value);
  Var parameter(Tensor<S> value);

  // Appends an op result. `fn` is kept only if some input requires grad.
  Var emit(Tensor<S> value, std::initializer_list<Var> inputs, BackwardFn fn);

  const Tensor<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
  bool has_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad_ready; }
  bool recording() const { return record_; }

  // Gradient buffer of v, zero-initialized on first access.
  Tensor<S>& grad(Var v);

  // Seeds d(root)/d(root) = 1 for a single-element root and sweeps backward.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    bool grad_ready = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool record_;
};

// --- linear algebra -------------------------------------------------------

template <typename S>
Var matmul(Graph<S>& g, Var a, Var b);

// x[N,in] * w[in,out] (+ bias[out])
template <typename S>
Var linear(Graph<S>& g, Var x, Var w, Var bias = {});

// --- elementwise ------------------------------------------------------------

template <typename S>
Var add(Graph<S>& g, Var a, Var b);
template <typename S>
Var sub(Graph<S>& g, Var a, Var b);
template <typename S>
Var mul(Graph<S>& g, Var a, Var b);
template <typename S>
Var scale(Graph<S>& g, Var a, S factor);
template <typename S>
Var silu(Graph<S>& g, Var x);
// x[N,d] + b[d] broadcast over rows.
template <typename S>
Var add_bias(Graph<S>& g, Var x, Var b);
// Multiplies row r of x by the constant factors[r].
template <typename S>
Var scale_rows(Graph<S>& g, Var x, std::span<const S> factors);
// x * (1 + scale) + shift, all operands the same shape.
template <typename S>
Var modulate(Graph<S>& g, Var x, Var shift, Var scale);

inline constexpr double kRmsNormEps = 1e-6;

// Normalizes each row of x[N,d] by sqrt(mean(x^2) + 1e-6), then multiplies by gain[d].
template <typename S>
Var rmsnorm(Graph<S>& g, Var x, Var gain);

// (silu(x W1) * (x W3)) W2
template <typename S>
Var swiglu(Graph<S>& g, Var x, Var w1, Var w2, Var w3);

// --- shape ------------------------------------------------------------------

template <typename S>
Var reshape(Graph<S>& g, Var x, Shape shape);
template <typename S>
Var slice_cols(Graph<S>& g, Var x, std::int64_t begin, std::int64_t count);
// x[B,d] -> [B*reps, d], each row repeated `reps` times consecutively.
template <typename S>
Var repeat_rows(Graph<S>& g, Var x, std::int64_t reps);
template <typename S>
Var gather_rows(Graph<S>& g, Var x, std::span<const std::int64_t> rows);
// table[V,d] looked up by ids; negative ids yield zero rows.
template <typename S>
Var embedding(Graph<S>& g, Var table, std::span<const std::int64_t> ids);

// --- attention --------------------------------------------------------------

// Row-wise softmax restricted to visible entries; masked entries get exactly 0.
// Throws DegenerateRowError if a row has no visible entry.
template <typename S>
void masked_softmax_row(const S* logits, const std::uint8_t* visible, S* out, std::int64_t n);

// logits[..., L, M] with mask[L, M] applied to every trailing block.
template <typename S>
Var masked_softmax(Graph<S>& g, Var logits, const BoolMatrix& mask);

// Rotates consecutive pairs (2i, 2i+1) of every head of x[N, heads*d] by
// angles[n * d/2 + i].
template <typename S>
Var rope(Graph<S>& g, Var x, std::span<const S> angles, std::int64_t heads);

// Scaled dot-product attention. q[B*Lq, H*d], k and v[B*Lk, H*d], mask[Lq, Lk].
template <typename S>
Var attention(Graph<S>& g, Var q, Var k, Var v, const BoolMatrix& mask, std::int64_t batch, std::int64_t heads);

// --- reductions and losses --------------------------------------------------

template <typename S>
Var sum(Graph<S>& g, Var x);

// sum_r w[r] * sum_c (alpha[r] * ref[r,c] - sigma[r] * v[r,c] - target[r,c])^2
// i.e. squared error of the clean estimate recovered from a v-prediction.
template <typename S>
Var weighted_x0_error(Graph<S>& g, Var v, const Tensor<S>& ref, std::span<const S> alpha,
                      std::span<const S> sigma, const Tensor<S>& target, std::span<const S> weight);

// sum_r w[r] * sum_c (pred[r,c] - target[r,c])^2
template <typename S>
Var weighted_sq_error(Graph<S>& g, Var pred, const Tensor<S>& target, std::span<const S> weight);

// sum_r w[r] * (logsumexp(logits[r]) - logits[r, target[r]]); rows with target < 0 are skipped.
template <typename S>
Var cross_entropy(Graph<S>& g, Var logits, std::span<const std::int64_t> targets, std::span<const S> weight);

}  // namespace dart::ad
