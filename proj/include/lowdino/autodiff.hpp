// SPDX-License-Identifier: Apache-2.0
#pragma once

// Tape-based reverse-mode differentiation over a closed set of tensor ops.
//
// Every op appends a node holding its output value and, when any input
// requires a gradient and the tape is recording, a closure that scatters the
// node's gradient back into its inputs. Nodes are evaluated in reverse
// insertion order by Tape::backward, which is a valid topological order
// because an op can only consume nodes created before it.

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <type_traits>
#include <stdexcept>
#include <vector>

#include "lowdino/tensor.hpp"

namespace lowdino::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

class GradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  /// A non-recording tape evaluates ops without keeping backward closures.
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad && recording_, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    if (recording_) {
      for (const auto& v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return {this, nodes_.size() - 1};
  }
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, BackwardFn fn) {
    bool needs = false;
    if (recording_) {
      for (const auto& v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, needs, needs ? std::move(fn) : BackwardFn{}});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var<T> v) const { return requires_grad(v.id); }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }
  Tensor<T>& grad(Var<T> v) { return grad(v.id); }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Seeds `out` with `seed` and propagates to every node that requires a
  /// gradient. Throws if `out` was not produced by a recorded op or leaf.
  void backward(Var<T> out, const Tensor<T>& seed) {
    if (out.tape != this) throw GradientError("backward: variable belongs to another tape");
    Node& root = nodes_.at(out.id);
    if (!root.requires_grad)
      throw GradientError("backward: output was not recorded with gradient tracking");
    if (seed.shape() != root.value.shape())
      throw GradientError("backward: seed shape " + shape_str(seed.shape()) +
                          " does not match output " + shape_str(root.value.shape()));
    Tensor<T>& g = grad(out.id);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  bool recording_;
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. Layouts: feature maps are NCHW; matrices are [rows, cols] with any
// leading dims folded into rows for linear / layer_norm / softmax.

/// Dense 2-D convolution, weight [Co, Ci, k, k].
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b, int stride, int pad);

/// Depthwise 2-D convolution, weight [C, 1, k, k].
template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b, int stride, int pad);

/// y = x W^T + b with W [out, in]; x is [..., in].
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, std::type_identity_t<std::optional<Var<T>>> b);

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, double eps = 1e-5);

/// Normalises over the last dimension.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5);

template <typename T>
Var<T> silu(Var<T> x);

/// Exact (erf) GELU.
template <typename T>
Var<T> gelu(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> x, double s);

/// Concatenation along `axis` (all other dims must agree).
template <typename T>
Var<T> concat(std::span<const Var<T>> xs, int axis);

/// [N, C, H, W] -> [N, C]
template <typename T>
Var<T> global_avg_pool(Var<T> x);

/// [B, C, H, W] -> [B*p*p, (H/p)*(W/p), C]: one sequence per intra-patch
/// offset, one token per patch.
template <typename T>
Var<T> unfold_patches(Var<T> x, int patch);

/// Inverse of unfold_patches.
template <typename T>
Var<T> fold_patches(Var<T> x, int patch, int height, int width);

/// Multi-head scaled dot-product self-attention. qkv is [S, N, 3d] with
/// queries, keys and values packed along the last dim; output [S, N, d].
template <typename T>
Var<T> self_attention(Var<T> qkv, int heads);

/// Attention probabilities [S, heads, N, N] for a packed qkv tensor; the same
/// routine the attention op uses internally.
template <typename T>
Tensor<T> attention_weights(const Tensor<T>& qkv, int heads);

/// Rows scaled to unit L2 norm over the last dim.
template <typename T>
Var<T> l2_normalize(Var<T> x, double eps = 1e-12);

template <typename T>
Var<T> softmax(Var<T> x);

template <typename T>
Var<T> log_softmax(Var<T> x);

template <typename T>
Var<T> log(Var<T> x);

/// Sum of all elements, shape [1].
template <typename T>
Var<T> sum(Var<T> x);

}  // namespace lowdino::ad
