#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "mad/numerics/tensor.hpp"

namespace mad {

class Tape;

// Handle to a node on a Tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode differentiation tape. Nodes are appended in creation order,
// which is a topological order by construction. Single writer.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Frozen parameters are recorded as constants and never receive gradient.
  Var parameter(Parameter& param);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // Propagates d(loss)/d(node) for every node and adds the leaf gradients into
  // the bound Parameter::grad buffers (so repeated calls accumulate).
  void backward(Var loss);

  // Op-author interface.
  Var record(Tensor value, bool requires_grad, BackwardFn fn);
  const Tensor& value_of(std::uint32_t id) const { return nodes_[id].value; }
  bool needs_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  // Upstream gradient of a node during backward (zeros if never touched).
  const Tensor& grad_of(std::uint32_t id);
  // Mutable accumulation buffer for an input node.
  Tensor& grad_buffer(std::uint32_t id);

  void check(Var v) const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Every op checks shapes (ShapeMismatch) and rejects
// non-finite results (NonFinite).
// ---------------------------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
// x[n,d] + b[d] broadcast over rows.
Var add_row(Var x, Var b);
// x[n,d] * g[d] broadcast over rows.
Var mul_row(Var x, Var g);
// a[n,k] @ b[k,m]; a may be rank-1 [k], giving [m].
Var matmul(Var a, Var b);

Var sum(Var a);
Var mean(Var a);
Var relu(Var a);
Var gelu(Var a);

// Row-wise normalisation (eps 1e-5), optionally followed by an affine map.
Var layer_norm(Var x);
Var layer_norm(Var x, Var gamma, Var beta);

Var embedding_lookup(Var table, std::span<const std::size_t> ids);
Var concat_rows(std::span<const Var> parts);
Var stack(std::span<const Var> scalars);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var select_rows(Var x, std::span<const std::size_t> rows);
Var row(Var x, std::size_t index);
Var reshape(Var x, Shape shape);
Var transpose(Var x);
// Scales each row to unit Euclidean norm (ZeroNorm below 1e-12).
Var normalize_rows(Var x);

Var softmax(Var logits);
Var softmax_rows(Var x);
Var log_softmax(Var logits);
// -log softmax(logits)[target] for a rank-1 logit vector.
Var cross_entropy(Var logits, std::size_t target);
// Mean cross-entropy over the rows of an [n,c] logit matrix.
Var cross_entropy_rows(Var logits, std::span<const std::size_t> targets);
// Mean binary cross-entropy on raw logits (any shape, flattened).
Var bce_with_logits(Var logits, std::span<const double> targets);

// Mean absolute difference over the feature dimension.
Var l1_distance(Var a, Var b);
// Row-wise l1_distance of two [n,d] matrices, giving [n].
Var l1_distance_rows(Var a, Var b);
Var cosine_similarity(Var a, Var b);

struct AttentionMaps {
  std::size_t heads = 0;
  std::vector<std::size_t> segment_begin;
  std::vector<std::size_t> segment_length;
  std::vector<std::size_t> prob_offset;  // per (segment, head)
  std::vector<double> probs;

  std::size_t segments() const noexcept { return segment_length.size(); }
  // Row `query` of the attention matrix for one segment and head.
  std::span<const double> row(std::size_t segment, std::size_t head,
                              std::size_t query) const;
};

struct AttentionOutput {
  Var output;
  std::shared_ptr<const AttentionMaps> maps;
};

// Multi-head scaled dot-product self-attention applied independently to each
// contiguous segment of rows. `qkv` is [n, 3d] with the query, key and value
// blocks side by side; the result is [n, d].
AttentionOutput multi_head_attention(Var qkv, std::span<const std::size_t> segments,
                                     std::size_t heads);

// Value-only helpers shared by scoring code that must not touch a tape.
namespace eval {
std::vector<double> softmax(std::span<const double> logits);
double l1_distance(std::span<const double> a, std::span<const double> b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);
}  // namespace eval

}  // namespace mad
