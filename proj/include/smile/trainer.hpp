#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "smile/model.hpp"
#include "smile/smile_loss.hpp"
#include "smile/synth_data.hpp"

namespace smile {

enum class TeacherUpdate { kPeriodicCopy, kEma, kFixed };

struct TeacherSchedule {
  TeacherUpdate kind = TeacherUpdate::kPeriodicCopy;
  std::size_t period = 10;
  double ema_decay = 0.99;
};

/// Called at the top of iteration k (k >= 1) with the student as it was
/// after iteration k-1.
///   periodic copy: teacher <- student_prev when k % period == 0
///   ema:           teacher <- decay * teacher + (1 - decay) * student_prev
///   fixed:         no change
/// Only the extractor and source head are touched.
void update_teacher(ModelWeights& teacher, const ModelWeights& student_prev, std::size_t k,
                    const TeacherSchedule& schedule);

struct PretrainConfig {
  double learning_rate = 0.05;
  std::size_t iterations = 1500;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 11;
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t iterations = 1500;
  std::size_t teacher_period = 10;
  std::size_t batch_size = 32;
  LossWeights weights;  // gamma_FE = 0.01, gamma_FC = 0.1
  double mix_alpha = 1.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double lr_drop_fraction = 2.0 / 3.0;
  double lr_drop_factor = 10.0;
  Mode mode = Mode::kSmile;
  TeacherUpdate teacher_update = TeacherUpdate::kPeriodicCopy;
  double ema_decay = 0.99;
  bool shared_lambda = true;
  OutputSpace source_space = OutputSpace::kProbabilities;
  std::size_t eval_every = 0;  // 0: evaluate only after the last iteration
  std::uint64_t seed = 0;

  void validate() const;
};

/// Schedule actually used for a config: SMILE-noS forces a copy every
/// iteration, SMILE-noT freezes the teacher.
TeacherSchedule effective_schedule(const TrainConfig& config);

/// First iteration (1-based) that runs at the dropped rate:
/// ceil(lr_drop_fraction * K).
std::size_t lr_drop_iteration(const TrainConfig& config);
double learning_rate_at(const TrainConfig& config, std::size_t k);

struct IterationLog {
  std::size_t iteration = 0;
  double lr = 0.0;
  double task = 0.0;
  double mxp = 0.0;
  double fe = 0.0;
  double fc = 0.0;
  double total = 0.0;
  std::uint64_t teacher_hash = 0;
};

struct EvalLog {
  std::size_t iteration = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;  // NaN-free: 0 when no eval set
};

struct Metrics {
  Mode mode = Mode::kSmile;
  LossWeights weights;
  std::vector<IterationLog> iterations;
  std::vector<EvalLog> evals;
};

struct TrainResult {
  ModelWeights student;
  ModelWeights teacher;
  Metrics metrics;
};

struct IterationView {
  std::size_t k;
  const ModelWeights& student_before;  // omega^{k-1}
  const ModelWeights& teacher;         // teacher used at iteration k
  const ModelWeights& student_after;   // omega^k
};

struct TrainOptions {
  const Dataset* eval_set = nullptr;
  /// Invoked after every SGD step. Setting it costs one weight copy per step.
  std::function<void(const IterationView&)> observer;
  std::ostream* progress = nullptr;
  std::size_t progress_every = 100;
};

struct PretrainLog {
  std::vector<double> losses;
  double train_accuracy = 0.0;
};

/// Plain cross-entropy SGD of extractor + source head on the source task.
/// Throws std::invalid_argument on an empty dataset and NonFiniteError (with
/// the iteration) on divergence.
ModelWeights pretrain_source(const Dataset& source, const Architecture& arch,
                             const PretrainConfig& config, PretrainLog* log = nullptr,
                             std::ostream* progress = nullptr);

/// Mean teacher-student fine-tuning. Returns the student after K iterations.
TrainResult train(const ModelWeights& pretrained, const Dataset& target, const Dataset& source,
                  const TrainConfig& config, const TrainOptions& options = {});

void write_metrics_csv(const Metrics& metrics, const std::filesystem::path& path);
void write_eval_csv(const Metrics& metrics, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ablation suite

struct AblationCell {
  Mode mode = Mode::kSmile;
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::map<std::string, double> extra;
};

struct AblationSummary {
  Mode mode = Mode::kSmile;
  std::size_t runs = 0;
  double train_mean = 0.0, train_std = 0.0;
  double test_mean = 0.0, test_std = 0.0;
  std::map<std::string, std::pair<double, double>> extra;  // mean, std
};

struct AblationTable {
  std::vector<AblationCell> cells;
  std::vector<AblationSummary> summaries;

  const AblationSummary& summary(Mode m) const;
  std::vector<const AblationCell*> cells_for(Mode m) const;
};

/// Extra per-cell measurements (e.g. interpolation losses) keyed by column.
using CellHook = std::function<std::map<std::string, double>(const ModelWeights& student,
                                                             Mode mode, std::uint64_t seed)>;

/// Trains every (mode, seed) cell from the same pre-trained weights. Cells
/// are independent and may run on `jobs` threads; result order is fixed
/// (modes outer, seeds inner). Requires at least two seeds.
AblationTable run_ablation_suite(const ModelWeights& pretrained, const Dataset& target_train,
                                 const Dataset& target_test, const Dataset& source,
                                 const TrainConfig& base, std::span<const Mode> modes,
                                 std::span<const std::uint64_t> seeds, const CellHook& hook = {},
                                 std::size_t jobs = 1);

/// Columns: kind,mode,seed,runs,train_acc,train_acc_std,test_acc,test_acc_std
/// followed by each extra column and its _std. kind is "cell" or "mean".
void write_ablation_csv(const AblationTable& table, const std::filesystem::path& path);
AblationTable read_ablation_csv(const std::filesystem::path& path);

}  // namespace smile
