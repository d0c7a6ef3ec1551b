#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "smile/autodiff.hpp"
#include "smile/tensor.hpp"

namespace smile {

/// Builds a scalar on `tape` from parameter leaves bound to the check point.
using ScalarGraph = std::function<ad::Var(ad::Tape& tape, std::span<const ad::Var> params)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Denominator floor for the relative error, so coordinates whose true
  /// derivative is ~0 are judged on absolute error.
  double floor = 1e-6;
};

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0.0;
  bool passed = true;
};

/// Compares tape gradients against central differences at every coordinate:
/// rel = |a - n| / max(|a|, |n|, floor).
GradCheckReport grad_check(const ScalarGraph& graph, std::span<const Tensor> point,
                           const GradCheckOptions& options = {});

}  // namespace smile
