#include "smile/diagnostics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "smile/errors.hpp"
#include "smile/mixup.hpp"
#include "smile/synth_data.hpp"

namespace smile {

std::string_view layer_name(ILLayer l) { return l == ILLayer::kLabel ? "label" : "feature"; }

ILLayer parse_layer(std::string_view name) {
  if (name == "label") return ILLayer::kLabel;
  if (name == "feature") return ILLayer::kFeature;
  throw std::invalid_argument("unknown layer '" + std::string(name) + "'");
}

void ILConfig::validate() const {
  if (!(0.0 <= delta_lo && delta_lo <= delta_hi && delta_hi <= 1.0)) {
    throw ConfigError("diagnostics.delta", "range must satisfy 0 <= lo <= hi <= 1");
  }
  if (!(0.0 <= lambda_lo && lambda_lo <= lambda_hi && lambda_hi <= 1.0)) {
    throw ConfigError("diagnostics.lambda", "range must satisfy 0 <= lo <= hi <= 1");
  }
  if (n_pairs < 1) throw ConfigError("diagnostics.n_pairs", "must be >= 1");
  if (n_delta_draws < 1) throw ConfigError("diagnostics.n_delta_draws", "must be >= 1");
  if (n_lambda_draws < 1) throw ConfigError("diagnostics.n_lambda_draws", "must be >= 1");
  if (!(denom_epsilon >= 0.0)) throw ConfigError("diagnostics.denom_epsilon", "must be >= 0");
}

std::optional<double> normalized_interp_distance(std::span<const double> y_it,
                                                 std::span<const double> y1,
                                                 std::span<const double> y2, double lambda,
                                                 double eps) {
  if (y_it.size() != y1.size() || y1.size() != y2.size()) {
    throw ShapeError("normalized_interp_distance: output sizes differ");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < y1.size(); ++i) {
    const double r = y_it[i] - (lambda * y1[i] + (1.0 - lambda) * y2[i]);
    const double d = y1[i] - y2[i];
    num += r * r;
    den += d * d;
  }
  den = std::sqrt(den);
  if (den < eps || den == 0.0) return std::nullopt;
  return std::sqrt(num) / den;
}

// ---------------------------------------------------------------------------

namespace {

enum : std::uint64_t { kPairTag = 0x7061, kDeltaTag = 0x646c, kLambdaTag = 0x6c6d };

Rng draw_rng(std::uint64_t seed, std::uint64_t tag, std::size_t a, std::size_t b = 0,
             std::size_t c = 0) {
  std::uint64_t s = mix_seed(seed, tag);
  s = mix_seed(s, a);
  s = mix_seed(s, b);
  s = mix_seed(s, c);
  return Rng(s);
}

std::size_t item_size(const Tensor& inputs) {
  if (inputs.rank() < 1 || inputs.dim(0) == 0) {
    throw std::invalid_argument("estimate_il: need at least one input item");
  }
  return inputs.size() / inputs.dim(0);
}

// Writes c * x + (1 - c) * x' into out.
void mix_into(std::span<double> out, std::span<const double> x, std::span<const double> xp,
              double c) {
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i] + (1.0 - c) * xp[i];
}

Tensor row_softmax(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    double* row = out.data() + r * k;
    const double m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (row[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) row[j] /= z;
  }
  return out;
}

}  // namespace

std::pair<std::size_t, std::size_t> SeededILDraws::pair(std::size_t p, std::size_t n_items) {
  if (n_items < 2) return {0, 0};
  Rng rng = draw_rng(config_.seed, kPairTag, p);
  const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n_items - 1)(rng);
  std::size_t j = std::uniform_int_distribution<std::size_t>(0, n_items - 2)(rng);
  if (j >= i) ++j;
  return {i, j};
}

std::pair<double, double> SeededILDraws::deltas(std::size_t p, std::size_t d) {
  Rng rng = draw_rng(config_.seed, kDeltaTag, p, d);
  std::uniform_real_distribution<double> u(config_.delta_lo, config_.delta_hi);
  const double d1 = u(rng);
  const double d2 = u(rng);
  return {d1, d2};
}

double SeededILDraws::lambda(std::size_t p, std::size_t d, std::size_t l) {
  Rng rng = draw_rng(config_.seed, kLambdaTag, p, d, l);
  return std::uniform_real_distribution<double>(config_.lambda_lo, config_.lambda_hi)(rng);
}

ILReport estimate_il(const BatchFn& fn, const Tensor& inputs, const ILConfig& config) {
  SeededILDraws draws(config);
  return estimate_il(fn, inputs, config, draws);
}

ILReport estimate_il(const BatchFn& fn, const Tensor& inputs, const ILConfig& config,
                     ILDraws& draws) {
  config.validate();
  const std::size_t item = item_size(inputs);
  const std::size_t n_items = inputs.dim(0);
  const std::size_t nd = config.n_delta_draws, nl = config.n_lambda_draws;

  // Per pair, one batch: [Mix_d1, Mix_d2] for every delta draw, then the
  // interpolated input for every (delta, lambda) draw.
  Shape batch_shape = inputs.shape();
  batch_shape[0] = 2 * nd + nd * nl;

  std::vector<double> scores;
  scores.reserve(config.n_pairs * nd * nl);
  ILReport report;
  report.config = config;

  for (std::size_t p = 0; p < config.n_pairs; ++p) {
    const auto [i, j] = draws.pair(p, n_items);
    if (i >= n_items || j >= n_items) throw std::out_of_range("estimate_il: pair index");
    std::span<const double> x = inputs.values().subspan(i * item, item);
    std::span<const double> xp = inputs.values().subspan(j * item, item);

    Tensor batch(batch_shape);
    std::vector<std::pair<double, double>> ds(nd);
    std::vector<double> lams(nd * nl);
    for (std::size_t d = 0; d < nd; ++d) {
      ds[d] = draws.deltas(p, d);
      mix_into(batch.values().subspan((2 * d) * item, item), x, xp, ds[d].first);
      mix_into(batch.values().subspan((2 * d + 1) * item, item), x, xp, ds[d].second);
      for (std::size_t l = 0; l < nl; ++l) {
        const double lam = draws.lambda(p, d, l);
        lams[d * nl + l] = lam;
        const double c = lam * ds[d].first + (1.0 - lam) * ds[d].second;
        mix_into(batch.values().subspan((2 * nd + d * nl + l) * item, item), x, xp, c);
      }
    }

    const Tensor out = fn(batch);
    if (out.rank() != 2 || out.dim(0) != batch_shape[0]) {
      throw ShapeError("estimate_il: model output " + to_string(out.shape()) +
                       " is not [batch, d]");
    }
    const std::size_t od = out.dim(1);
    auto row = [&](std::size_t r) { return out.values().subspan(r * od, od); };
    for (std::size_t d = 0; d < nd; ++d) {
      for (std::size_t l = 0; l < nl; ++l) {
        ++report.n_total;
        const auto s = normalized_interp_distance(row(2 * nd + d * nl + l), row(2 * d),
                                                  row(2 * d + 1), lams[d * nl + l],
                                                  config.denom_epsilon);
        if (s) {
          scores.push_back(*s);
        } else {
          ++report.n_degenerate;
        }
      }
    }
  }

  if (scores.empty()) {
    throw std::runtime_error("estimate_il: all " + std::to_string(report.n_total) +
                             " draws were degenerate");
  }
  report.n_effective = scores.size();
  double sum = 0.0;
  for (double s : scores) sum += s;
  report.mean = sum / static_cast<double>(scores.size());
  if (scores.size() > 1) {
    double ss = 0.0;
    for (double s : scores) ss += (s - report.mean) * (s - report.mean);
    report.stddev = std::sqrt(ss / static_cast<double>(scores.size() - 1));
  }
  report.std_error = report.stddev / std::sqrt(static_cast<double>(scores.size()));
  return report;
}

BatchFn feature_fn(const ModelWeights& w) {
  return [w](const Tensor& x) { return feature_extract(w, x); };
}

BatchFn label_fn(const ModelWeights& w, OutputSpace space) {
  if (!w.target_head) throw std::invalid_argument("label_fn: model has no target head");
  return [w, space](const Tensor& x) {
    Tensor logits = target_logits(w, x);
    return space == OutputSpace::kProbabilities ? row_softmax(logits) : logits;
  };
}

BatchFn layer_fn(const ModelWeights& w, const ILConfig& config) {
  return config.layer == ILLayer::kFeature ? feature_fn(w) : label_fn(w, config.label_space);
}

// ---------------------------------------------------------------------------

Pca2d pca_2d(const Tensor& points) {
  if (points.rank() != 2) throw ShapeError("pca_2d: points must be [n, d]");
  const std::size_t n = points.dim(0), d = points.dim(1);
  if (n < 2) throw std::invalid_argument("pca_2d: need at least two points");
  if (d < 2) throw ShapeError("pca_2d: need at least two dimensions");

  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Mat x = Eigen::Map<const Mat>(points.data(), static_cast<Eigen::Index>(n),
                                static_cast<Eigen::Index>(d));
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca_2d: eigensolver failed");

  Pca2d out;
  const Eigen::VectorXd& vals = eig.eigenvalues();  // ascending
  for (Eigen::Index k = vals.size() - 1; k >= 0; --k) out.eigenvalues.push_back(vals(k));
  out.total_variance = cov.trace();

  Eigen::MatrixXd comps(static_cast<Eigen::Index>(d), 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(vals.size() - 1 - c);
    for (Eigen::Index k = 0; k < v.size(); ++k) {
      if (std::abs(v(k)) > 1e-12) {
        if (v(k) < 0) v = -v;
        break;
      }
    }
    comps.col(c) = v;
    out.explained[static_cast<std::size_t>(c)] =
        out.total_variance > 0.0 ? std::max(0.0, out.eigenvalues[static_cast<std::size_t>(c)]) /
                                       out.total_variance
                                 : 0.0;
  }

  const Eigen::MatrixXd proj = x * comps;
  out.projected = Tensor({n, 2});
  out.components = Tensor({2, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < 2; ++c) {
      out.projected[r * 2 + c] =
          proj(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  }
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < d; ++k) {
      out.components[c * d + k] =
          comps(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    }
  }
  return out;
}

Trajectory feature_interp_trajectory(const BatchFn& features, const Tensor& first,
                                     const Tensor& second) {
  if (first.shape() != second.shape()) {
    throw ShapeError("feature_interp_trajectory: pair tensors differ in shape");
  }
  if (first.rank() < 1 || first.dim(0) == 0) {
    throw std::invalid_argument("feature_interp_trajectory: need at least one pair");
  }
  const std::size_t pairs = first.dim(0);
  const std::size_t item = first.size() / pairs;
  const std::size_t nc = kTrajectoryCoefficients.size();

  Shape shape = first.shape();
  shape[0] = pairs * nc;
  Tensor batch(shape);
  for (std::size_t p = 0; p < pairs; ++p) {
    for (std::size_t c = 0; c < nc; ++c) {
      mix_into(batch.values().subspan((p * nc + c) * item, item),
               first.values().subspan(p * item, item), second.values().subspan(p * item, item),
               kTrajectoryCoefficients[c]);
    }
  }

  Trajectory t;
  t.pca = pca_2d(features(batch));
  for (std::size_t p = 0; p < pairs; ++p) {
    for (std::size_t c = 0; c < nc; ++c) {
      const std::size_t r = p * nc + c;
      t.rows.push_back({p, kTrajectoryCoefficients[c], t.pca.projected[r * 2],
                        t.pca.projected[r * 2 + 1]});
    }
  }
  return t;
}

std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t n_items,
                                                              std::size_t count,
                                                              std::uint64_t seed) {
  if (n_items == 0) throw std::invalid_argument("sample_pairs: no items");
  ILConfig cfg;
  cfg.seed = seed;
  SeededILDraws draws(cfg);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t p = 0; p < count; ++p) out.push_back(draws.pair(p, n_items));
  return out;
}

void write_il_report_json(std::span<const ILReport> reports, const std::filesystem::path& path) {
  nlohmann::ordered_json doc;
  doc["reports"] = nlohmann::ordered_json::array();
  for (const ILReport& r : reports) {
    const ILConfig& c = r.config;
    nlohmann::ordered_json j;
    j["layer"] = layer_name(c.layer);
    if (!r.split.empty()) j["split"] = r.split;
    j["mean"] = r.mean;
    j["std"] = r.stddev;
    j["stderr"] = r.std_error;
    j["n_effective"] = r.n_effective;
    j["n_degenerate"] = r.n_degenerate;
    j["n_total"] = r.n_total;
    j["config"] = {
        {"layer", layer_name(c.layer)},
        {"delta", {c.delta_lo, c.delta_hi}},
        {"lambda", {c.lambda_lo, c.lambda_hi}},
        {"n_pairs", c.n_pairs},
        {"n_delta_draws", c.n_delta_draws},
        {"n_lambda_draws", c.n_lambda_draws},
        {"denom_epsilon", c.denom_epsilon},
        {"label_space", c.label_space == OutputSpace::kLogits ? "logits" : "probabilities"},
        {"seed", c.seed},
    };
    doc["reports"].push_back(std::move(j));
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << doc.dump(2) << '\n';
}

void write_trajectory_csv(const Trajectory& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.precision(17);
  os << "pair_id,lambda,x,y\n";
  for (const TrajectoryRow& r : t.rows) {
    os << r.pair_id << ',' << r.lambda << ',' << r.x << ',' << r.y << '\n';
  }
}

}  // namespace smile
