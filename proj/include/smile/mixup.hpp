#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "smile/tensor.hpp"

namespace smile {

using Rng = std::mt19937_64;

/// (1 - lambda) * u + lambda * v, so lambda = 0 returns u exactly.
/// Throws ShapeError on mismatched shapes, std::invalid_argument when
/// lambda is outside [0, 1].
Tensor mix(const Tensor& u, const Tensor& v, double lambda);

/// lambda ~ Beta(alpha, alpha) as G1 / (G1 + G2), G_i ~ Gamma(alpha, 1).
double sample_lambda(double alpha, Rng& rng);

/// Partner index j for every batch position i: a uniform random
/// permutation of 0..n-1 (self-pairs allowed). Throws on n = 0.
std::vector<std::size_t> pair_batch(std::size_t n, Rng& rng);

}  // namespace smile
