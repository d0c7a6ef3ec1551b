#pragma once

// Hand-rolled generators and small oracles shared by the test binaries.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <random>
#include <vector>

#include "smile/autodiff.hpp"
#include "smile/model.hpp"
#include "smile/synth_data.hpp"
#include "smile/tensor.hpp"

namespace smile::testing {

using Gen = std::mt19937_64;

inline double uniform(Gen& g, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline Tensor random_tensor(Gen& g, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = uniform(g, lo, hi);
  return t;
}

/// Values bounded away from zero so relu kinks stay outside a finite
/// difference step.
inline Tensor kink_free_tensor(Gen& g, Shape shape, double margin = 0.05) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) {
    const double m = uniform(g, margin, 1.0);
    v = uniform(g, 0.0, 1.0) < 0.5 ? -m : m;
  }
  return t;
}

/// Each row a strictly positive distribution.
inline Tensor random_distribution(Gen& g, std::size_t rows, std::size_t cols) {
  Tensor t({rows, cols});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += (t[r * cols + c] = uniform(g, 0.1, 1.0));
    for (std::size_t c = 0; c < cols; ++c) t[r * cols + c] /= s;
  }
  return t;
}

inline std::vector<int> random_labels(Gen& g, std::size_t n, std::size_t classes) {
  std::vector<int> out(n);
  for (int& l : out) l = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, classes - 1)(g));
  return out;
}

inline std::vector<std::size_t> random_permutation(Gen& g, std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  std::shuffle(p.begin(), p.end(), g);
  return p;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline bool bit_equal(double a, double b) {
  return std::memcmp(&a, &b, sizeof a) == 0;
}

/// A deliberately small architecture for fast end-to-end tests.
inline Architecture tiny_arch() {
  Architecture a;
  a.image_size = 6;
  a.channels = 1;
  a.conv1_channels = 2;
  a.conv2_channels = 3;
  a.kernel_size = 3;
  a.feature_dim = 4;
  a.source_classes = 4;
  a.target_classes = 2;
  return a;
}

inline TaskSpec tiny_task(std::uint64_t seed = 3) {
  TaskSpec s;
  s.image_size = 6;
  s.source_classes = 4;
  s.target_classes = 2;
  s.source_per_class = 6;
  s.target_per_class = 6;
  s.noise = 0.1;
  s.seed = seed;
  return s;
}

}  // namespace smile::testing
