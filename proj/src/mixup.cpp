#include "smile/mixup.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "smile/errors.hpp"

namespace smile {

Tensor mix(const Tensor& u, const Tensor& v, double lambda) {
  if (u.shape() != v.shape()) {
    throw ShapeError("mix: shape mismatch " + to_string(u.shape()) + " vs " +
                     to_string(v.shape()));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("mix: lambda must lie in [0, 1]");
  }
  Tensor out(u.shape());
  const double keep = 1.0 - lambda;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * u[i] + lambda * v[i];
  return out;
}

double sample_lambda(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("sample_lambda: alpha must be positive");
  std::gamma_distribution<double> gamma(alpha, 1.0);
  const double a = gamma(rng);
  const double b = gamma(rng);
  // Both draws can underflow to zero for very small alpha.
  if (a + b == 0.0) return 0.5;
  return a / (a + b);
}

std::vector<std::size_t> pair_batch(std::size_t n, Rng& rng) {
  if (n == 0) throw std::invalid_argument("pair_batch: empty batch");
  std::vector<std::size_t> partner(n);
  std::iota(partner.begin(), partner.end(), std::size_t{0});
  std::shuffle(partner.begin(), partner.end(), rng);
  return partner;
}

}  // namespace smile
