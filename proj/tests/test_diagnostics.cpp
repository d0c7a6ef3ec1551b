#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "smile/diagnostics.hpp"
#include "smile/errors.hpp"
#include "test_util.hpp"

namespace smile {
namespace {

namespace fs = std::filesystem;
using testing::Gen;

// Rows of x [N, din] mapped through W [din, dout] plus b, optionally tanh.
BatchFn dense_fn(Tensor w, Tensor b, bool nonlinear, double scale = 1.0) {
  return [w = std::move(w), b = std::move(b), nonlinear, scale](const Tensor& x) {
    const std::size_t n = x.dim(0), din = w.dim(0), dout = w.dim(1);
    Tensor out({n, dout});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < dout; ++c) {
        double s = b[c];
        for (std::size_t k = 0; k < din; ++k) s += x[r * din + k] * w[k * dout + c];
        out[r * dout + c] = scale * (nonlinear ? std::tanh(s) : s);
      }
    }
    return out;
  };
}

BatchFn random_dense(Gen& g, std::size_t din, std::size_t dout, bool nonlinear,
                     double scale = 1.0) {
  return dense_fn(testing::random_tensor(g, {din, dout}, -1.5, 1.5),
                  testing::random_tensor(g, {dout}), nonlinear, scale);
}

std::vector<double> row_of(const Tensor& t, std::size_t r) {
  const std::size_t d = t.dim(1);
  return {t.values().begin() + static_cast<std::ptrdiff_t>(r * d),
          t.values().begin() + static_cast<std::ptrdiff_t>((r + 1) * d)};
}

TEST(InterpDistance, HandExamples) {
  const std::vector<double> y1{0, 0}, y2{2, 0}, on{1, 0}, off{1, 1}, tiny{1e-9, 0}, short_{1.0};
  EXPECT_EQ(*normalized_interp_distance(on, y1, y2, 0.5, 1e-8), 0.0);
  EXPECT_DOUBLE_EQ(*normalized_interp_distance(off, y1, y2, 0.5, 1e-8), 0.5);
  // lam weights y1: at lam = 1 the reference point is y1 itself.
  EXPECT_DOUBLE_EQ(*normalized_interp_distance(off, y1, y2, 1.0, 1e-8),
                   std::sqrt(2.0) / 2.0);
  EXPECT_FALSE(normalized_interp_distance(off, y1, y1, 0.5, 1e-8).has_value());
  EXPECT_FALSE(normalized_interp_distance(off, y1, tiny, 0.5, 1e-8).has_value());
  EXPECT_THROW(normalized_interp_distance(off, y1, short_, 0.5, 1e-8), ShapeError);
}

// Draws taken verbatim from fixed tables.
class TableDraws final : public ILDraws {
 public:
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  std::vector<std::pair<double, double>> deltas_;
  std::vector<double> lambdas;
  std::size_t nd = 1, nl = 1;

  std::pair<std::size_t, std::size_t> pair(std::size_t p, std::size_t) override {
    return pairs[p];
  }
  std::pair<double, double> deltas(std::size_t p, std::size_t d) override {
    return deltas_[p * nd + d];
  }
  double lambda(std::size_t p, std::size_t d, std::size_t l) override {
    return lambdas[(p * nd + d) * nl + l];
  }
};

TEST(EstimateIL, MatchesEnumerationOracle) {
  Gen g(71);
  const BatchFn fn = random_dense(g, 3, 2, true);
  const Tensor items = testing::random_tensor(g, {4, 3});
  TableDraws draws;
  draws.pairs = {{0, 1}, {2, 3}};
  draws.nd = 2;
  draws.nl = 2;
  for (int i = 0; i < 4; ++i)
    draws.deltas_.push_back({testing::uniform(g, 0.5, 1.0), testing::uniform(g, 0.5, 1.0)});
  for (int i = 0; i < 8; ++i) draws.lambdas.push_back(testing::uniform(g, 0.0, 1.0));

  // Oracle: evaluate each mixed input on its own.
  auto eval_one = [&](const std::vector<double>& x) {
    return row_of(fn(Tensor({1, 3}, x)), 0);
  };
  auto mixed = [&](std::size_t i, std::size_t j, double c) {
    std::vector<double> x(3);
    for (std::size_t k = 0; k < 3; ++k) x[k] = c * items[i * 3 + k] + (1 - c) * items[j * 3 + k];
    return x;
  };
  std::vector<double> scores;
  for (std::size_t p = 0; p < 2; ++p) {
    const auto [i, j] = draws.pairs[p];
    for (std::size_t d = 0; d < 2; ++d) {
      const auto [d1, d2] = draws.deltas_[p * 2 + d];
      const auto y1 = eval_one(mixed(i, j, d1));
      const auto y2 = eval_one(mixed(i, j, d2));
      for (std::size_t l = 0; l < 2; ++l) {
        const double lam = draws.lambdas[(p * 2 + d) * 2 + l];
        const auto yi = eval_one(mixed(i, j, lam * d1 + (1 - lam) * d2));
        double num = 0, den = 0;
        for (std::size_t k = 0; k < 2; ++k) {
          num += std::pow(yi[k] - lam * y1[k] - (1 - lam) * y2[k], 2);
          den += std::pow(y1[k] - y2[k], 2);
        }
        scores.push_back(std::sqrt(num) / std::sqrt(den));
      }
    }
  }
  double mean = 0;
  for (double s : scores) mean += s / 8.0;

  ILConfig cfg;
  cfg.n_pairs = 2;
  cfg.n_delta_draws = 2;
  cfg.n_lambda_draws = 2;
  const ILReport r = estimate_il(fn, items, cfg, draws);
  EXPECT_EQ(r.n_total, 8u);
  EXPECT_EQ(r.n_effective, 8u);
  EXPECT_NEAR(r.mean, mean, 1e-12);
  EXPECT_GT(r.mean, 1e-3);
}

TEST(EstimateIL, AffineMapsHaveZeroLoss) {
  Gen g(72);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor items = testing::random_tensor(g, {10, 5});
    ILConfig cfg;
    cfg.n_pairs = 50;
    cfg.seed = trial;
    EXPECT_LE(estimate_il(random_dense(g, 5, 3, false), items, cfg).mean, 1e-6);
  }
}

TEST(EstimateIL, InvariantToOutputScale) {
  Gen g(73);
  const Tensor w = testing::random_tensor(g, {4, 3}, -1.5, 1.5);
  const Tensor b = testing::random_tensor(g, {3});
  const Tensor items = testing::random_tensor(g, {12, 4});
  ILConfig cfg;
  cfg.n_pairs = 40;
  const double base = estimate_il(dense_fn(w, b, true), items, cfg).mean;
  EXPECT_GT(base, 1e-3);
  for (double c : {0.1, 10.0}) {
    EXPECT_NEAR(estimate_il(dense_fn(w, b, true, c), items, cfg).mean, base, 1e-9) << c;
  }
}

TEST(EstimateIL, MoreDrawsStayWithinError) {
  Gen g(74);
  const BatchFn fn = random_dense(g, 4, 3, true);
  const Tensor items = testing::random_tensor(g, {30, 4});
  ILConfig small;
  small.n_pairs = 200;
  ILConfig big = small;
  big.n_pairs = 400;
  big.n_delta_draws = 4;
  const ILReport a = estimate_il(fn, items, small);
  const ILReport b = estimate_il(fn, items, big);
  EXPECT_EQ(b.n_total, 400u * 4u * 2u);
  EXPECT_LT(std::abs(a.mean - b.mean), 3.0 * std::max(a.std_error, b.std_error));
}

TEST(EstimateIL, SeededAndReproducible) {
  Gen g(75);
  const BatchFn fn = random_dense(g, 4, 3, true);
  const Tensor items = testing::random_tensor(g, {10, 4});
  ILConfig cfg;
  cfg.n_pairs = 20;
  EXPECT_EQ(estimate_il(fn, items, cfg).mean, estimate_il(fn, items, cfg).mean);
  ILConfig other = cfg;
  other.seed = 1;
  EXPECT_NE(estimate_il(fn, items, cfg).mean, estimate_il(fn, items, other).mean);
  SeededILDraws draws(cfg);
  for (std::size_t p = 0; p < 50; ++p) {
    const auto [i, j] = draws.pair(p, 10);
    EXPECT_NE(i, j);
    const auto [d1, d2] = draws.deltas(p, 0);
    EXPECT_GE(d1, 0.5);
    EXPECT_LE(d2, 1.0);
  }
}

TEST(EstimateIL, DegenerateDrawsAreCounted) {
  const BatchFn constant = [](const Tensor& x) { return Tensor({x.dim(0), 2}, 1.0); };
  const Tensor items({3, 2}, {0, 0, 1, 1, 2, 2});
  ILConfig cfg;
  cfg.n_pairs = 5;
  EXPECT_THROW(estimate_il(constant, items, cfg), std::runtime_error);
  // A single item pairs with itself: every draw is degenerate.
  EXPECT_THROW(estimate_il(dense_fn(Tensor({2, 1}, 1.0), Tensor({1}, 0.0), true),
                           Tensor({1, 2}, {0.3, 0.4}), cfg),
               std::runtime_error);
  EXPECT_THROW(estimate_il(constant, Tensor({0, 2}), cfg), std::invalid_argument);
}

TEST(EstimateIL, ConfigValidation) {
  auto bad = [](auto mutate) {
    ILConfig c;
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](ILConfig& c) { c.delta_lo = 0.9, c.delta_hi = 0.5; });
  bad([](ILConfig& c) { c.delta_hi = 1.5; });
  bad([](ILConfig& c) { c.lambda_lo = -0.1; });
  bad([](ILConfig& c) { c.n_pairs = 0; });
  bad([](ILConfig& c) { c.n_lambda_draws = 0; });
  EXPECT_EQ(parse_layer(layer_name(ILLayer::kLabel)), ILLayer::kLabel);
  EXPECT_THROW(parse_layer("conv"), std::invalid_argument);
}

TEST(EstimateIL, LabelLayerOnModel) {
  const Architecture a = testing::tiny_arch();
  const ModelWeights w =
      init_from_pretrained(init_source_model(a, 3), a, 4).student;
  Gen g(76);
  const Tensor items = testing::random_tensor(g, {6, 1, 6, 6}, 0.0, 1.0);
  ILConfig cfg;
  cfg.layer = ILLayer::kLabel;
  cfg.n_pairs = 10;
  const ILReport r = estimate_il(layer_fn(w, cfg), items, cfg);
  EXPECT_GE(r.mean, 0.0);
  EXPECT_EQ(label_fn(w, OutputSpace::kProbabilities)(items).dim(1), 2u);
  EXPECT_THROW(label_fn(init_source_model(a, 3)), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// PCA

TEST(Pca, PointsOnALine) {
  Tensor pts({6, 3});
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t k = 0; k < 3; ++k) pts[r * 3 + k] = (1.0 + k) * r + 0.5;
  const Pca2d p = pca_2d(pts);
  EXPECT_NEAR(p.explained[0], 1.0, 1e-12);
  EXPECT_NEAR(p.explained[1], 0.0, 1e-12);
  for (std::size_t r = 0; r < 6; ++r) EXPECT_NEAR(p.projected[r * 2 + 1], 0.0, 1e-12);
}

TEST(Pca, PlanarSquarePreservesDistances) {
  const Tensor sq({4, 2}, {0, 0, 2, 0, 2, 2, 0, 2});
  const Pca2d p = pca_2d(sq);
  auto dist = [](const Tensor& t, std::size_t a, std::size_t b) {
    return std::hypot(t[a * 2] - t[b * 2], t[a * 2 + 1] - t[b * 2 + 1]);
  };
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) EXPECT_NEAR(dist(p.projected, a, b), dist(sq, a, b), 1e-12);
}

TEST(Pca, EigenvaluesSumToTrace) {
  Gen g(77);
  const Tensor pts = testing::random_tensor(g, {20, 32});
  const Pca2d p = pca_2d(pts);
  ASSERT_EQ(p.eigenvalues.size(), 32u);
  double trace = 0.0;
  for (std::size_t k = 0; k < 32; ++k) {
    double m = 0.0, s = 0.0;
    for (std::size_t r = 0; r < 20; ++r) m += pts[r * 32 + k] / 20.0;
    for (std::size_t r = 0; r < 20; ++r) s += std::pow(pts[r * 32 + k] - m, 2);
    trace += s / 19.0;
  }
  double sum = 0.0;
  for (double e : p.eigenvalues) sum += e;
  EXPECT_NEAR(sum, trace, 1e-9);
  EXPECT_NEAR(p.total_variance, trace, 1e-9);
  EXPECT_TRUE(std::is_sorted(p.eigenvalues.rbegin(), p.eigenvalues.rend()));
  // Projected variance along each component is its eigenvalue.
  for (std::size_t c = 0; c < 2; ++c) {
    double v = 0.0;
    for (std::size_t r = 0; r < 20; ++r) v += std::pow(p.projected[r * 2 + c], 2) / 19.0;
    EXPECT_NEAR(v, p.eigenvalues[c], 1e-9);
  }
}

TEST(Pca, RejectsTooFewPoints) {
  EXPECT_THROW(pca_2d(Tensor({1, 3})), std::invalid_argument);
  EXPECT_THROW(pca_2d(Tensor({4, 1})), ShapeError);
}

// ---------------------------------------------------------------------------
// Trajectories

// Largest distance of a pair's points from the line through its ends.
double collinearity_residual(const Trajectory& t, std::size_t pair) {
  std::vector<const TrajectoryRow*> rows;
  for (const auto& r : t.rows)
    if (r.pair_id == pair) rows.push_back(&r);
  const double dx = rows.back()->x - rows.front()->x, dy = rows.back()->y - rows.front()->y;
  const double len = std::hypot(dx, dy);
  double worst = 0.0;
  for (const auto* r : rows) {
    const double cross = (r->x - rows.front()->x) * dy - (r->y - rows.front()->y) * dx;
    worst = std::max(worst, std::abs(cross) / len);
  }
  return worst;
}

TEST(Trajectory, AffineExtractorGivesLines) {
  Gen g(78);
  const BatchFn fn = random_dense(g, 8, 5, false);
  const Tensor a = testing::random_tensor(g, {4, 8});
  const Tensor b = testing::random_tensor(g, {4, 8});
  const Trajectory t = feature_interp_trajectory(fn, a, b);
  ASSERT_EQ(t.rows.size(), 20u);
  for (std::size_t p = 0; p < 4; ++p) {
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_EQ(t.rows[p * 5 + c].pair_id, p);
      EXPECT_EQ(t.rows[p * 5 + c].lambda, kTrajectoryCoefficients[c]);
    }
    EXPECT_LE(collinearity_residual(t, p), 1e-8) << p;
  }
}

TEST(Trajectory, NonlinearExtractorBends) {
  Gen g(79);
  const BatchFn fn = random_dense(g, 8, 5, true);
  const Tensor a = testing::random_tensor(g, {3, 8}, -3.0, 3.0);
  const Tensor b = testing::random_tensor(g, {3, 8}, -3.0, 3.0);
  const Trajectory t = feature_interp_trajectory(fn, a, b);
  double worst = 0.0;
  for (std::size_t p = 0; p < 3; ++p) worst = std::max(worst, collinearity_residual(t, p));
  EXPECT_GT(worst, 1e-6);
}

TEST(Trajectory, SelfPairCollapsesToPoint) {
  Gen g(80);
  const BatchFn fn = random_dense(g, 4, 3, true);
  const Tensor first = testing::random_tensor(g, {2, 4});
  const Tensor& a = first;
  Tensor second({2, 4});
  for (std::size_t k = 0; k < 4; ++k) second[k] = a[k];   // pair 0: (x, x)
  for (std::size_t k = 4; k < 8; ++k) second[k] = -a[k];  // pair 1: (x, -x)
  const Trajectory t = feature_interp_trajectory(fn, first, second);
  for (std::size_t c = 1; c < 5; ++c) {
    EXPECT_NEAR(t.rows[c].x, t.rows[0].x, 1e-12);
    EXPECT_NEAR(t.rows[c].y, t.rows[0].y, 1e-12);
  }
  EXPECT_THROW(feature_interp_trajectory(fn, first, Tensor({3, 4})), ShapeError);
}

TEST(SamplePairs, DistinctAndSeeded) {
  const auto a = sample_pairs(7, 30, 4);
  ASSERT_EQ(a.size(), 30u);
  for (const auto& [i, j] : a) {
    EXPECT_NE(i, j);
    EXPECT_LT(std::max(i, j), 7u);
  }
  EXPECT_EQ(a, sample_pairs(7, 30, 4));
  EXPECT_NE(a, sample_pairs(7, 30, 5));
  EXPECT_THROW(sample_pairs(0, 3, 1), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Writers

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "smile_test_diagnostics";
  fs::create_directories(dir);
  return dir / name;
}

TEST(Writers, ReportJson) {
  ILReport r;
  r.mean = 0.25;
  r.std_error = 0.01;
  r.n_effective = 7;
  r.n_total = 8;
  r.n_degenerate = 1;
  r.split = "test";
  r.config.layer = ILLayer::kLabel;
  const auto path = temp_file("il.json");
  write_il_report_json(std::span<const ILReport>(&r, 1), path);
  std::ifstream is(path);
  const auto doc = nlohmann::json::parse(is);
  const auto& j = doc.at("reports").at(0);
  EXPECT_EQ(j.at("layer"), "label");
  EXPECT_EQ(j.at("split"), "test");
  EXPECT_EQ(j.at("mean").get<double>(), 0.25);
  EXPECT_EQ(j.at("n_degenerate").get<int>(), 1);
  EXPECT_EQ(j.at("config").at("delta").at(0).get<double>(), 0.5);
}

TEST(Writers, TrajectoryCsv) {
  Gen g(81);
  const Trajectory t = feature_interp_trajectory(random_dense(g, 3, 3, true),
                                                 testing::random_tensor(g, {2, 3}),
                                                 testing::random_tensor(g, {2, 3}));
  const auto path = temp_file("traj.csv");
  write_trajectory_csv(t, path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "pair_id,lambda,x,y");
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 10u);
  EXPECT_EQ(lines[0].rfind("0,0.59999999999999998,", 0), 0u) << lines[0];
  EXPECT_EQ(lines[9].rfind("1,1,", 0), 0u) << lines[9];
}

}  // namespace
}  // namespace smile
