#include "smile/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <ostream>
#include <sstream>

#include "smile/errors.hpp"
#include "smile/mixup.hpp"
#include "smile/sgd.hpp"

namespace smile {

namespace {

// Independent random streams of one training run.
enum Stream : std::uint64_t {
  kHeadInit = 1,
  kTargetBatches = 2,
  kSourceBatches = 3,
  kLambdaMxp = 4,
  kLambdaFe = 5,
  kLambdaFc = 6,
  kTargetPairs = 7,
  kSourcePairs = 8,
};

/// Draws mini-batches by walking reshuffled passes over the dataset.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = n;
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (cursor_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        cursor_ = 0;
      }
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx) {
  return {d.batch(idx), d.batch_labels(idx)};
}

void check_dataset_shape(const Dataset& d, const Architecture& a, const char* what) {
  if (d.height != a.image_size || d.width != a.image_size || d.channels != a.channels) {
    throw ShapeError(std::string(what) + " images do not match the model input shape");
  }
}

double sample_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void update_teacher(ModelWeights& teacher, const ModelWeights& student_prev, std::size_t k,
                    const TeacherSchedule& schedule) {
  if (k < 1) throw std::invalid_argument("update_teacher: iterations are 1-based");
  switch (schedule.kind) {
    case TeacherUpdate::kFixed:
      return;
    case TeacherUpdate::kPeriodicCopy:
      if (schedule.period == 0) throw std::invalid_argument("update_teacher: period must be >= 1");
      if (k % schedule.period == 0) {
        teacher.extractor = student_prev.extractor;
        teacher.source_head = student_prev.source_head;
      }
      return;
    case TeacherUpdate::kEma: {
      const double d = schedule.ema_decay;
      auto blend = [d](Tensor& t, const Tensor& s) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = d * t[i] + (1.0 - d) * s[i];
      };
      ModelWeights& t = teacher;
      const ModelWeights& s = student_prev;
      blend(t.extractor.conv1_w, s.extractor.conv1_w);
      blend(t.extractor.conv1_b, s.extractor.conv1_b);
      blend(t.extractor.conv2_w, s.extractor.conv2_w);
      blend(t.extractor.conv2_b, s.extractor.conv2_b);
      blend(t.extractor.proj_w, s.extractor.proj_w);
      blend(t.extractor.proj_b, s.extractor.proj_b);
      blend(t.source_head.weight, s.source_head.weight);
      blend(t.source_head.bias, s.source_head.bias);
      return;
    }
  }
}

void PretrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("pretrain.learning_rate", "must be > 0");
  if (iterations < 1) throw ConfigError("pretrain.iterations", "must be >= 1");
  if (batch_size < 1) throw ConfigError("pretrain.batch_size", "must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("pretrain.momentum", "must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("pretrain.weight_decay", "must be >= 0");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate", "must be > 0");
  if (iterations < 1) throw ConfigError("train.iterations", "must be >= 1");
  if (teacher_period < 1) throw ConfigError("train.teacher_period", "must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
  weights.validate();
  if (!(mix_alpha > 0.0)) throw ConfigError("train.mix_alpha", "must be > 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum", "must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
  if (!(lr_drop_fraction > 0.0 && lr_drop_fraction <= 1.0)) {
    throw ConfigError("train.lr_drop_fraction", "must be in (0, 1]");
  }
  if (!(lr_drop_factor >= 1.0)) throw ConfigError("train.lr_drop_factor", "must be >= 1");
  if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) throw ConfigError("train.ema_decay", "must be in [0, 1]");
}

TeacherSchedule effective_schedule(const TrainConfig& c) {
  switch (c.mode) {
    case Mode::kSmileNoS: return {TeacherUpdate::kPeriodicCopy, 1, c.ema_decay};
    case Mode::kSmileNoT: return {TeacherUpdate::kFixed, c.teacher_period, c.ema_decay};
    default: return {c.teacher_update, c.teacher_period, c.ema_decay};
  }
}

std::size_t lr_drop_iteration(const TrainConfig& c) {
  const double at = std::ceil(c.lr_drop_fraction * static_cast<double>(c.iterations) - 1e-9);
  return std::max<std::size_t>(1, static_cast<std::size_t>(at));
}

double learning_rate_at(const TrainConfig& c, std::size_t k) {
  return k >= lr_drop_iteration(c) ? c.learning_rate / c.lr_drop_factor : c.learning_rate;
}

ModelWeights pretrain_source(const Dataset& source, const Architecture& arch,
                             const PretrainConfig& config, PretrainLog* log,
                             std::ostream* progress) {
  config.validate();
  if (source.empty()) throw std::invalid_argument("pretrain_source: empty source dataset");
  Architecture a = arch;
  a.source_classes = source.num_classes;
  check_dataset_shape(source, a, "source");

  ModelWeights w = init_source_model(a, mix_seed(config.seed, kHeadInit));
  BatchSampler sampler(source.size(), mix_seed(config.seed, kSourceBatches));
  SgdOptions opt{config.learning_rate, config.momentum, config.weight_decay};
  SgdState state;

  for (std::size_t k = 1; k <= config.iterations; ++k) {
    const Batch b = make_batch(source, sampler.next(config.batch_size));
    ad::Tape tape;
    BoundModel m = bind(tape, w, Binding::kTrainable);
    ad::Var logits = apply_head(m.source, extract_features(m, tape.constant(b.inputs)));
    ad::Var loss;
    try {
      loss = ad::softmax_cross_entropy(logits,
                                       tape.constant(one_hot(b.labels, a.source_classes)));
      tape.backward(loss);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("pretrain diverged at iteration " + std::to_string(k) + ": " +
                           e.what());
    }
    auto params = w.parameters();
    auto vars = m.vars();
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (std::size_t i = 0; i < params.size(); ++i) {
      ps.push_back(params[i].tensor);
      gs.push_back(tape.grad(vars[i]));
    }
    sgd_step(ps, gs, opt, state);
    if (log) log->losses.push_back(loss.value().item());
    if (progress && (k % 100 == 0 || k == config.iterations)) {
      *progress << "pretrain " << k << "/" << config.iterations
                << " loss=" << loss.value().item() << "\n";
    }
  }
  if (log) log->train_accuracy = accuracy(source_logits(w, source.inputs()), source.labels);
  return w;
}

TrainResult train(const ModelWeights& pretrained, const Dataset& target, const Dataset& source,
                  const TrainConfig& config, const TrainOptions& options) {
  config.validate();
  if (target.empty()) throw std::invalid_argument("train: empty target dataset");
  const Mode mode = config.mode;
  const bool want_mxp = uses_mixup_term(mode);
  const bool want_fe = uses_feature_term(mode);
  const bool want_fc = uses_source_term(mode);
  if (want_fc && source.empty()) throw std::invalid_argument("train: empty source dataset");

  Architecture arch = pretrained.arch;
  arch.target_classes = target.num_classes;
  check_dataset_shape(target, arch, "target");
  if (want_fc) {
    check_dataset_shape(source, arch, "source");
    if (source.num_classes != arch.source_classes) {
      throw ShapeError("train: source dataset class count differs from the checkpoint");
    }
  }

  const std::uint64_t seed = config.seed;
  auto [student, teacher] = init_from_pretrained(pretrained, arch, mix_seed(seed, kHeadInit));
  const TeacherSchedule schedule = effective_schedule(config);

  BatchSampler target_sampler(target.size(), mix_seed(seed, kTargetBatches));
  BatchSampler source_sampler(std::max<std::size_t>(source.size(), 1),
                              mix_seed(seed, kSourceBatches));
  Rng lambda_mxp(mix_seed(seed, kLambdaMxp));
  Rng lambda_fe(mix_seed(seed, kLambdaFe));
  Rng lambda_fc(mix_seed(seed, kLambdaFc));
  Rng target_pairs(mix_seed(seed, kTargetPairs));
  Rng source_pairs(mix_seed(seed, kSourcePairs));

  SgdState state;
  TrainResult result;
  result.metrics.mode = mode;
  result.metrics.weights = config.weights;
  result.metrics.iterations.reserve(config.iterations);

  const Tensor train_inputs = target.inputs();
  const Tensor eval_inputs = options.eval_set ? options.eval_set->inputs() : Tensor();
  auto evaluate = [&](std::size_t k) {
    EvalLog e;
    e.iteration = k;
    e.train_accuracy = accuracy(target_logits(student, train_inputs), target.labels);
    if (options.eval_set) {
      e.test_accuracy = accuracy(target_logits(student, eval_inputs), options.eval_set->labels);
    }
    result.metrics.evals.push_back(e);
  };

  for (std::size_t k = 1; k <= config.iterations; ++k) {
    if (want_fe || want_fc) update_teacher(teacher, student, k, schedule);

    const Batch tgt = make_batch(target, target_sampler.next(config.batch_size));
    MixDraws draws;
    if (want_mxp || want_fe || want_fc) {
      const double shared = sample_lambda(config.mix_alpha, lambda_mxp);
      draws.lambda_mxp = shared;
      draws.lambda_fe = config.shared_lambda ? shared : sample_lambda(config.mix_alpha, lambda_fe);
      draws.lambda_fc = config.shared_lambda ? shared : sample_lambda(config.mix_alpha, lambda_fc);
    }
    if (want_mxp || want_fe) draws.target_pairing = pair_batch(tgt.labels.size(), target_pairs);
    Batch src;
    if (want_fc) {
      src = make_batch(source, source_sampler.next(config.batch_size));
      draws.source_pairing = pair_batch(src.labels.size(), source_pairs);
    }

    ad::Tape tape;
    BoundModel sm = bind(tape, student, Binding::kTrainable);
    Network student_net = as_network(sm);
    Network teacher_net;
    if (want_fe || want_fc) teacher_net = as_network(bind(tape, teacher, Binding::kFrozen));

    ObjectiveTerms terms;
    try {
      terms = total_objective(tape, student_net, teacher_net, tgt, src, draws,
                              {mode, config.weights, config.source_space});
      tape.backward(terms.total);
    } catch (const NonFiniteError& e) {
      throw NonFiniteError("training diverged at iteration " + std::to_string(k) + ": " +
                           e.what());
    }

    std::optional<ModelWeights> before;
    if (options.observer) before = student;

    auto params = student.parameters();
    auto vars = sm.vars();
    std::vector<Tensor*> ps;
    std::vector<const Tensor*> gs;
    for (std::size_t i = 0; i < params.size(); ++i) {
      ps.push_back(params[i].tensor);
      gs.push_back(tape.grad(vars[i]));
    }
    const double lr = learning_rate_at(config, k);
    sgd_step(ps, gs, {lr, config.momentum, config.weight_decay}, state);

    IterationLog row;
    row.iteration = k;
    row.lr = lr;
    row.task = terms.task;
    row.mxp = terms.mxp;
    row.fe = terms.fe;
    row.fc = terms.fc;
    row.total = terms.total.value().item();
    row.teacher_hash = weights_fingerprint(teacher);
    result.metrics.iterations.push_back(row);

    if (options.observer) options.observer({k, *before, teacher, student});
    if (config.eval_every && k % config.eval_every == 0 && k != config.iterations) evaluate(k);
    if (options.progress && options.progress_every && k % options.progress_every == 0) {
      *options.progress << mode_name(mode) << " " << k << "/" << config.iterations
                        << " total=" << row.total << " task=" << row.task << "\n";
    }
  }
  evaluate(config.iterations);

  result.student = std::move(student);
  result.teacher = std::move(teacher);
  return result;
}

void write_metrics_csv(const Metrics& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.precision(17);
  os << "iteration,lr,task,mxp,fe,fc,total,gamma_fe,gamma_fc,mode,teacher_hash\n";
  for (const IterationLog& r : m.iterations) {
    os << r.iteration << ',' << r.lr << ',' << r.task << ',' << r.mxp << ',' << r.fe << ','
       << r.fc << ',' << r.total << ',' << m.weights.fe << ',' << m.weights.fc << ','
       << mode_name(m.mode) << ',' << std::hex << r.teacher_hash << std::dec << '\n';
  }
}

void write_eval_csv(const Metrics& m, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.precision(17);
  os << "iteration,train_acc,test_acc\n";
  for (const EvalLog& e : m.evals) {
    os << e.iteration << ',' << e.train_accuracy << ',' << e.test_accuracy << '\n';
  }
}

// ---------------------------------------------------------------------------
// Ablation

const AblationSummary& AblationTable::summary(Mode m) const {
  for (const auto& s : summaries)
    if (s.mode == m) return s;
  throw std::out_of_range("no summary for mode " + std::string(mode_name(m)));
}

std::vector<const AblationCell*> AblationTable::cells_for(Mode m) const {
  std::vector<const AblationCell*> out;
  for (const auto& c : cells)
    if (c.mode == m) out.push_back(&c);
  return out;
}

namespace {

void summarise(AblationTable& table, std::span<const Mode> modes) {
  table.summaries.clear();
  for (Mode mode : modes) {
    AblationSummary s;
    s.mode = mode;
    std::vector<double> tr, te;
    std::map<std::string, std::vector<double>> extra;
    for (const AblationCell* c : table.cells_for(mode)) {
      tr.push_back(c->train_accuracy);
      te.push_back(c->test_accuracy);
      for (const auto& [k, v] : c->extra) extra[k].push_back(v);
    }
    s.runs = tr.size();
    s.train_mean = mean_of(tr);
    s.train_std = sample_std(tr, s.train_mean);
    s.test_mean = mean_of(te);
    s.test_std = sample_std(te, s.test_mean);
    for (const auto& [k, v] : extra) {
      const double mu = mean_of(v);
      s.extra[k] = {mu, sample_std(v, mu)};
    }
    table.summaries.push_back(std::move(s));
  }
}

}  // namespace

AblationTable run_ablation_suite(const ModelWeights& pretrained, const Dataset& target_train,
                                 const Dataset& target_test, const Dataset& source,
                                 const TrainConfig& base, std::span<const Mode> modes,
                                 std::span<const std::uint64_t> seeds, const CellHook& hook,
                                 std::size_t jobs) {
  if (seeds.size() < 2) throw std::invalid_argument("run_ablation_suite: need at least two seeds");
  if (modes.empty()) throw std::invalid_argument("run_ablation_suite: no modes");
  base.validate();

  struct Job {
    Mode mode;
    std::uint64_t seed;
  };
  std::vector<Job> work;
  for (Mode m : modes)
    for (std::uint64_t s : seeds) work.push_back({m, s});

  auto run_cell = [&](const Job& j) {
    TrainConfig cfg = base;
    cfg.mode = j.mode;
    cfg.seed = j.seed;
    TrainOptions opts;
    opts.eval_set = &target_test;
    TrainResult r = train(pretrained, target_train, source, cfg, opts);
    AblationCell cell;
    cell.mode = j.mode;
    cell.seed = j.seed;
    cell.train_accuracy = r.metrics.evals.back().train_accuracy;
    cell.test_accuracy = r.metrics.evals.back().test_accuracy;
    if (hook) cell.extra = hook(r.student, j.mode, j.seed);
    return cell;
  };

  AblationTable table;
  table.cells.resize(work.size());
  jobs = std::max<std::size_t>(1, jobs);
  for (std::size_t start = 0; start < work.size(); start += jobs) {
    const std::size_t stop = std::min(work.size(), start + jobs);
    if (jobs == 1) {
      table.cells[start] = run_cell(work[start]);
      continue;
    }
    std::vector<std::future<AblationCell>> pending;
    for (std::size_t i = start; i < stop; ++i) {
      pending.push_back(std::async(std::launch::async, run_cell, std::cref(work[i])));
    }
    for (std::size_t i = start; i < stop; ++i) table.cells[i] = pending[i - start].get();
  }
  summarise(table, modes);
  return table;
}

void write_ablation_csv(const AblationTable& table, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.precision(17);
  std::vector<std::string> extra_cols;
  for (const auto& c : table.cells)
    for (const auto& [k, v] : c.extra)
      if (std::find(extra_cols.begin(), extra_cols.end(), k) == extra_cols.end())
        extra_cols.push_back(k);
  std::sort(extra_cols.begin(), extra_cols.end());

  os << "kind,mode,seed,runs,train_acc,train_acc_std,test_acc,test_acc_std";
  for (const auto& k : extra_cols) os << ',' << k << ',' << k << "_std";
  os << '\n';
  for (const auto& c : table.cells) {
    os << "cell," << mode_name(c.mode) << ',' << c.seed << ",1," << c.train_accuracy << ",0,"
       << c.test_accuracy << ",0";
    for (const auto& k : extra_cols) {
      auto it = c.extra.find(k);
      os << ',' << (it == c.extra.end() ? 0.0 : it->second) << ",0";
    }
    os << '\n';
  }
  for (const auto& s : table.summaries) {
    os << "mean," << mode_name(s.mode) << ",," << s.runs << ',' << s.train_mean << ','
       << s.train_std << ',' << s.test_mean << ',' << s.test_std;
    for (const auto& k : extra_cols) {
      auto it = s.extra.find(k);
      if (it == s.extra.end()) {
        os << ",0,0";
      } else {
        os << ',' << it->second.first << ',' << it->second.second;
      }
    }
    os << '\n';
  }
}

namespace {

void parse_ablation_row(AblationTable& table, const std::vector<std::string>& header,
                        const std::vector<std::string>& f) {
  const Mode mode = parse_mode(f[1]);
  if (f[0] == "cell") {
    AblationCell c;
    c.mode = mode;
    c.seed = std::stoull(f[2]);
    c.train_accuracy = std::stod(f[4]);
    c.test_accuracy = std::stod(f[6]);
    for (std::size_t i = 8; i + 1 < f.size(); i += 2) c.extra[header[i]] = std::stod(f[i]);
    table.cells.push_back(std::move(c));
  } else if (f[0] == "mean") {
    AblationSummary s;
    s.mode = mode;
    s.runs = std::stoull(f[3]);
    s.train_mean = std::stod(f[4]);
    s.train_std = std::stod(f[5]);
    s.test_mean = std::stod(f[6]);
    s.test_std = std::stod(f[7]);
    for (std::size_t i = 8; i + 1 < f.size(); i += 2) {
      s.extra[header[i]] = {std::stod(f[i]), std::stod(f[i + 1])};
    }
    table.summaries.push_back(std::move(s));
  } else {
    throw FormatError("unknown row kind '" + f[0] + "'");
  }
}

}  // namespace

AblationTable read_ablation_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
  };
  std::string line;
  if (!std::getline(is, line)) throw FormatError("empty ablation summary");
  const auto header = split(line);
  if (header.size() < 8 || header[0] != "kind") throw FormatError("bad ablation summary header");

  AblationTable table;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size()) throw FormatError("ragged ablation summary row");
    try {
      parse_ablation_row(table, header, f);
    } catch (const std::invalid_argument& e) {
      throw FormatError("bad ablation summary row: " + std::string(e.what()));
    } catch (const std::out_of_range& e) {
      throw FormatError("bad ablation summary row: " + std::string(e.what()));
    }
  }
  return table;
}

}  // namespace smile
