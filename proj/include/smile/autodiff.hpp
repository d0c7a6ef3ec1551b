#pragma once

// Define-by-run reverse-mode differentiation over double tensors.
//
// A Tape owns every node created during one forward pass. Nodes are appended
// in evaluation order, so the record is topological by construction and the
// backward sweep is a single reverse scan. Leaves are either parameters
// (receive gradients) or constants (never do). A node requires a gradient
// iff at least one of its inputs does.

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "smile/tensor.hpp"

namespace smile::ad {

enum class Op {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kAddBias,
  kConv2d,
  kRelu,
  kGlobalAvgPool,
  kMean,
  kSumSquares,
  kSoftmax,
  kSoftmaxCrossEntropy,
  kCustom,
};

std::string_view op_name(Op op);

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = std::numeric_limits<std::size_t>::max();
};

/// Accumulates d(root)/d(input) into `input_grads` given d(root)/d(output).
/// `input_grads[i]` is null when input i does not require a gradient.
using BackwardFn = std::function<void(
    const Tensor& output_grad, const Tensor& output,
    std::span<const Tensor* const> inputs, std::span<Tensor* const> input_grads)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var parameter(Tensor value);
  Var constant(Tensor value);

  /// Appends a node. Throws NonFiniteError if `value` has NaN/Inf.
  /// Exposed so tests and callers can register custom primitives.
  Var record(Op op, std::span<const Var> inputs, Tensor value, BackwardFn backward);

  /// Reverse sweep from a single-element root. Clears all previous grads.
  void backward(Var root);

  const Tensor& value(Var v) const;
  /// Null until a backward pass reaches the node.
  const Tensor* grad(Var v) const;
  bool requires_grad(Var v) const;
  Op op(Var v) const;
  std::span<const std::size_t> inputs(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::kLeaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

// Primitives. Operands must live on the same tape.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// [m,k] x [k,n] -> [m,n]
Var matmul(Var a, Var b);
/// [n,f] + [f] broadcast over rows.
Var add_bias(Var x, Var bias);
/// x [N,C,H,W], w [O,C,k,k], b [O]; stride 1, zero padding k/2, k odd.
Var conv2d(Var x, Var w, Var b);
Var relu(Var a);
/// [N,C,H,W] -> [N,C]
Var global_avg_pool(Var x);
/// Mean of all elements -> scalar.
Var mean(Var a);
/// Sum of squared elements -> scalar.
Var sum_squares(Var a);
/// Row-wise softmax of [n,c].
Var softmax(Var logits);
/// -sum(target * log softmax(logits)) averaged over rows. Target rows must
/// be distributions (non-negative, summing to 1 within 1e-9).
Var softmax_cross_entropy(Var logits, Var target);

/// Constant copy of `v`'s value; gradients stop here.
Var detach(Var v);

/// Generic dispatch used by the per-primitive gradient suite. `Scale` takes
/// its factor from `scalar_arg`.
Var apply_primitive(Op op, std::span<const Var> inputs, double scalar_arg = 1.0);

}  // namespace smile::ad
