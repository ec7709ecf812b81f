#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fsml/tensor.hpp"

namespace fsml {

/// Handle to a node on a Tape.
struct Var {
  static constexpr std::uint32_t kInvalid = std::numeric_limits<std::uint32_t>::max();
  std::uint32_t index = kInvalid;
  bool valid() const noexcept { return index != kInvalid; }
};

/// Parameter id -> gradient of the same shape as the parameter.
template <class Real>
using Gradients = std::map<std::string, Tensor<Real>>;

/// Append-only recording of operations for reverse-mode differentiation.
/// Nodes are only ever appended after their inputs, so the node order is a
/// topological order and backward is a single reverse sweep.
template <class Real>
class Tape {
 public:
  /// Accumulates d(loss)/d(input_k) into `grad_in[k]`; entries are null for
  /// inputs that do not require a gradient.
  using BackwardFn =
      std::function<void(const Tensor<Real>& grad_out, std::span<Tensor<Real>* const> grad_in)>;

  Var constant(Tensor<Real> value);
  Var parameter(const std::string& id, Tensor<Real> value);
  /// Appends an operation node. `op` names the operation in error messages;
  /// a non-finite result is rejected.
  Var record(const char* op, Tensor<Real> value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor<Real>& value(Var v) const;
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<std::pair<std::string, Var>>& parameters() const noexcept { return params_; }

  /// Exact reverse-mode gradients of a scalar `loss` for every registered
  /// parameter. Parameters the loss does not depend on get zero tensors.
  Gradients<Real> backward(Var loss) const;

 private:
  struct Node {
    Tensor<Real> value;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  std::vector<std::pair<std::string, Var>> params_;
};

template <class Real>
Gradients<Real> backward(const Tape<Real>& tape, Var loss) {
  return tape.backward(loss);
}

// Differentiable operations. Each records one node on the tape.

/// c[i,j] = sum_p a[i,p] b[p,j]
template <class Real>
Var matmul(Tape<Real>& t, Var a, Var b);
template <class Real>
Var transpose(Tape<Real>& t, Var a);
template <class Real>
Var add(Tape<Real>& t, Var a, Var b);
template <class Real>
Var sub(Tape<Real>& t, Var a, Var b);
template <class Real>
Var mul(Tape<Real>& t, Var a, Var b);
template <class Real>
Var scale(Tape<Real>& t, Var a, Real factor);
template <class Real>
Var square(Tape<Real>& t, Var a);
template <class Real>
Var sum(Tape<Real>& t, Var a);
/// x[B,n] + bias[n] broadcast over the batch axis.
template <class Real>
Var add_row_bias(Tape<Real>& t, Var x, Var bias);
template <class Real>
Var reshape(Tape<Real>& t, Var a, Shape shape);
/// Elementwise product with a constant (non-differentiated) tensor.
template <class Real>
Var mul_mask(Tape<Real>& t, Var a, const Tensor<Real>& mask);
/// max(0, x); the subgradient at 0 is 0.
template <class Real>
Var relu(Tape<Real>& t, Var x);

/// Cross-correlation. `input` is [c_in,h,w] or [B,c_in,h,w]; `kernel` is
/// [c_out,c_in,kh,kw]; `bias` (optional, invalid Var for none) is [c_out].
template <class Real>
Var conv2d(Tape<Real>& t, Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad);
template <class Real>
Var conv2d(Tape<Real>& t, Var input, Var kernel, std::size_t stride, std::size_t pad) {
  return conv2d(t, input, kernel, Var{}, stride, pad);
}

/// 2x2 non-overlapping max pooling over the two trailing axes of a [c,h,w] or
/// [B,c,h,w] tensor. Gradient goes to the first maximum in row-major order.
template <class Real>
Var maxpool2(Tape<Real>& t, Var input);

/// Mean over the batch of -log softmax(logits)[target].
template <class Real>
Var softmax_cross_entropy(Tape<Real>& t, Var logits, std::span<const int> targets);

/// scale * cos(feature_b, class_c) with 1e-8 added to both norms.
template <class Real>
Var cosine_logits(Tape<Real>& t, Var features, Var class_vectors, Real scale);

inline constexpr double kCosineNormEps = 1e-8;

}  // namespace fsml
