#include "smile/sgd.hpp"

#include <stdexcept>
#include <string>

#include "smile/errors.hpp"

namespace smile {

void sgd_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
              const SgdOptions& options, SgdState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " params but " +
                     std::to_string(grads.size()) + " grads");
  }
  if (!(options.learning_rate > 0.0)) {
    throw std::invalid_argument("sgd_step: learning rate must be positive");
  }
  if (state.velocity.empty()) state.velocity.resize(params.size());
  if (state.velocity.size() != params.size()) {
    throw ShapeError("sgd_step: optimizer state has a different parameter count");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) continue;
    if (grads[i]->shape() != params[i]->shape()) {
      throw ShapeError("sgd_step: grad " + to_string(grads[i]->shape()) + " vs param " +
                       to_string(params[i]->shape()));
    }
    if (!grads[i]->all_finite()) {
      throw NonFiniteError("sgd_step: non-finite gradient in slot " + std::to_string(i));
    }
    if (!state.velocity[i].empty() && state.velocity[i].shape() != params[i]->shape()) {
      throw ShapeError("sgd_step: velocity shape mismatch in slot " + std::to_string(i));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) continue;
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& v = state.velocity[i];
    if (v.empty() && !p.empty()) v = Tensor(p.shape(), 0.0);
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = options.momentum * v[j] + (g[j] + options.weight_decay * p[j]);
      p[j] -= options.learning_rate * v[j];
    }
  }
}

}  // namespace smile
