#pragma once

// Interpolation-loss estimates and feature-interpolation trajectories.
//
// For a pair (x, x') and coefficient c, Mix_c(x, x') = c*x + (1-c)*x'.
// One Monte-Carlo draw picks (x, x'), (d1, d2) ~ P_delta and lam ~ P_lambda
// and scores
//   D(f(Mix_{lam*d1+(1-lam)*d2}), lam*f(Mix_d1) + (1-lam)*f(Mix_d2))
//     / D(f(Mix_d1), f(Mix_d2))
// with D the Euclidean distance.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "smile/model.hpp"
#include "smile/smile_loss.hpp"
#include "smile/tensor.hpp"

namespace smile {

/// Maps a batch [N, ...] to outputs [N, d].
using BatchFn = std::function<Tensor(const Tensor&)>;

enum class ILLayer { kLabel, kFeature };
std::string_view layer_name(ILLayer l);
ILLayer parse_layer(std::string_view name);

struct ILConfig {
  ILLayer layer = ILLayer::kFeature;
  double delta_lo = 0.5, delta_hi = 1.0;
  double lambda_lo = 0.0, lambda_hi = 1.0;
  std::size_t n_pairs = 200;
  std::size_t n_delta_draws = 2;
  std::size_t n_lambda_draws = 2;
  double denom_epsilon = 1e-8;
  OutputSpace label_space = OutputSpace::kLogits;  // label layer only
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError with "diagnostics.*" fields
};

struct ILReport {
  double mean = 0.0;
  double stddev = 0.0;     // sample std over effective draws
  double std_error = 0.0;  // stddev / sqrt(n_effective)
  std::size_t n_effective = 0;
  std::size_t n_degenerate = 0;
  std::size_t n_total = 0;
  ILConfig config;
  std::string split;  // which inputs were measured, e.g. "train"
};

/// D(y_it, lam*y1 + (1-lam)*y2) / D(y1, y2); nullopt when D(y1, y2) < eps.
/// Throws ShapeError on mismatched sizes.
std::optional<double> normalized_interp_distance(std::span<const double> y_it,
                                                 std::span<const double> y1,
                                                 std::span<const double> y2, double lambda,
                                                 double eps);

/// Source of the random choices of one estimate. Draw (p, d, l) uses
/// pair(p), deltas(p, d) and lambda(p, d, l).
class ILDraws {
 public:
  virtual ~ILDraws() = default;
  virtual std::pair<std::size_t, std::size_t> pair(std::size_t p, std::size_t n_items) = 0;
  virtual std::pair<double, double> deltas(std::size_t p, std::size_t d) = 0;
  virtual double lambda(std::size_t p, std::size_t d, std::size_t l) = 0;
};

/// Uniform draws from the config ranges, each seeded from (seed, indices) so
/// any draw can be reproduced on its own.
class SeededILDraws final : public ILDraws {
 public:
  explicit SeededILDraws(const ILConfig& config) : config_(config) {}
  std::pair<std::size_t, std::size_t> pair(std::size_t p, std::size_t n_items) override;
  std::pair<double, double> deltas(std::size_t p, std::size_t d) override;
  double lambda(std::size_t p, std::size_t d, std::size_t l) override;

 private:
  ILConfig config_;
};

/// Monte-Carlo interpolation loss of `fn` over items of `inputs` [N, ...].
/// Degenerate draws are excluded and counted; throws std::runtime_error if
/// every draw is degenerate and std::invalid_argument with fewer than one item.
ILReport estimate_il(const BatchFn& fn, const Tensor& inputs, const ILConfig& config);
ILReport estimate_il(const BatchFn& fn, const Tensor& inputs, const ILConfig& config,
                     ILDraws& draws);

/// Output of the extractor, or of the target head on the chosen space.
BatchFn feature_fn(const ModelWeights& w);
BatchFn label_fn(const ModelWeights& w, OutputSpace space = OutputSpace::kLogits);
BatchFn layer_fn(const ModelWeights& w, const ILConfig& config);

struct Pca2d {
  Tensor projected;                      // [n, 2]
  Tensor components;                     // [2, d]
  std::vector<double> eigenvalues;       // all d, descending
  std::array<double, 2> explained{};     // fraction of total variance
  double total_variance = 0.0;
};

/// Mean-centred projection onto the top two eigenvectors of the sample
/// covariance (n - 1 normalisation). Each component's first loading with
/// magnitude above 1e-12 is made positive. Throws std::invalid_argument on
/// fewer than two points and ShapeError on fewer than two dimensions.
Pca2d pca_2d(const Tensor& points);

inline constexpr std::array<double, 5> kTrajectoryCoefficients{0.6, 0.7, 0.8, 0.9, 1.0};

struct TrajectoryRow {
  std::size_t pair_id = 0;
  double lambda = 0.0;
  double x = 0.0, y = 0.0;
};

struct Trajectory {
  std::vector<TrajectoryRow> rows;  // pair-major, coefficients ascending
  Pca2d pca;
};

/// For pair i, features of Mix_c(first[i], second[i]) for every trajectory
/// coefficient c, pooled and projected together.
Trajectory feature_interp_trajectory(const BatchFn& features, const Tensor& first,
                                     const Tensor& second);

/// `count` seeded index pairs with distinct members (when n_items > 1).
std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t n_items,
                                                              std::size_t count,
                                                              std::uint64_t seed);

void write_il_report_json(std::span<const ILReport> reports, const std::filesystem::path& path);
void write_trajectory_csv(const Trajectory& t, const std::filesystem::path& path);

}  // namespace smile
