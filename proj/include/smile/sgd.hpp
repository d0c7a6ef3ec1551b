#pragma once

#include <span>
#include <vector>

#include "smile/tensor.hpp"

namespace smile {

struct SgdOptions {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Velocity buffers, one per parameter slot, created on first use.
struct SgdState {
  std::vector<Tensor> velocity;
};

/// Heavy-ball SGD with L2 decay folded into the gradient:
///   v <- momentum * v + (grad + weight_decay * param)
///   param <- param - lr * v
/// A null gradient leaves that parameter (and its velocity) untouched.
/// Throws NonFiniteError on a non-finite gradient, before any update.
void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
              const SgdOptions& options, SgdState& state);

}  // namespace smile
