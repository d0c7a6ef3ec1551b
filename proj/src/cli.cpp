#include "smile/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "smile/errors.hpp"
#include "smile/mixup.hpp"

namespace smile::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Errors carried to the single-line report

struct MissingArtifact : std::runtime_error {
  MissingArtifact(fs::path p, std::string producer)
      : std::runtime_error("missing " + p.string()),
        path(std::move(p)),
        producer(std::move(producer)) {}
  fs::path path;
  std::string producer;
};


// Values in the error line are single tokens; spaces would break parsing.
std::string token(std::string s) {
  for (char& c : s)
    if (c == ' ' || c == '\n' || c == '\t') c = '_';
  return s;
}

// ---------------------------------------------------------------------------
// Config reading

std::string teacher_update_name(TeacherUpdate t) {
  switch (t) {
    case TeacherUpdate::kPeriodicCopy: return "periodic-copy";
    case TeacherUpdate::kEma: return "ema";
    case TeacherUpdate::kFixed: return "fixed";
  }
  return "?";
}

std::string space_name(OutputSpace s) {
  return s == OutputSpace::kLogits ? "logits" : "probabilities";
}

/// Reads one JSON object, remembering which keys were consumed so leftovers
/// can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string prefix) : prefix_(std::move(prefix)) {
    if (!doc.is_object()) throw ConfigError(prefix_.empty() ? "<root>" : prefix_, "must be an object");
    doc_ = &doc;
  }

  std::string field(const std::string& key) const {
    return prefix_.empty() ? key : prefix_ + "." + key;
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = doc_->find(key);
    return it == doc_->end() ? nullptr : &*it;
  }

  void number(const std::string& key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(field(key), "expected a number");
      out = v->get<double>();
    }
  }

  template <class Int>
  void count(const std::string& key, Int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(field(key), "expected an integer");
      if (v->is_number_unsigned()) {
        out = static_cast<Int>(v->get<std::uint64_t>());
      } else {
        const auto i = v->get<std::int64_t>();
        if (i < 0) throw ConfigError(field(key), "must be >= 0");
        out = static_cast<Int>(i);
      }
    }
  }

  void boolean(const std::string& key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
      out = v->get<bool>();
    }
  }

  void string(const std::string& key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(field(key), "expected a string");
      out = v->get<std::string>();
    }
  }

  void range(const std::string& key, double& lo, double& hi) {
    if (const json* v = find(key)) {
      if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) {
        throw ConfigError(field(key), "expected [lo, hi]");
      }
      lo = (*v)[0].get<double>();
      hi = (*v)[1].get<double>();
    }
  }

  template <class T, class Parse>
  void enumerated(const std::string& key, T& out, Parse parse) {
    std::string s;
    string(key, s);
    if (s.empty() && !doc_->contains(key)) return;
    try {
      out = parse(s);
    } catch (const std::invalid_argument&) {
      throw ConfigError(field(key), "unknown value '" + s + "'");
    }
  }

  const json* subsection(const std::string& key) { return find(key); }

  void finish() const {
    for (auto it = doc_->begin(); it != doc_->end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown field");
    }
  }

 private:
  const json* doc_ = nullptr;
  std::string prefix_;
  std::set<std::string> seen_;
};

TeacherUpdate parse_teacher_update(const std::string& s) {
  if (s == "periodic-copy") return TeacherUpdate::kPeriodicCopy;
  if (s == "ema") return TeacherUpdate::kEma;
  if (s == "fixed") return TeacherUpdate::kFixed;
  throw std::invalid_argument(s);
}

OutputSpace parse_space(const std::string& s) {
  if (s == "logits") return OutputSpace::kLogits;
  if (s == "probabilities") return OutputSpace::kProbabilities;
  throw std::invalid_argument(s);
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like section.key=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].empty()) throw ConfigError(path, "empty path component");
    if (!node->is_object()) throw ConfigError(path, "parent is not a section");
    if (i + 1 == parts.size()) {
      (*node)[parts[i]] = value;
    } else {
      node = &(*node)[parts[i]];
      if (node->is_null()) *node = json::object();
    }
  }
}

void read_task(Section s, ExperimentConfig& c) {
  TaskSpec& t = c.task;
  s.count("image_size", t.image_size);
  s.count("channels", t.channels);
  s.count("source_classes", t.source_classes);
  s.count("target_classes", t.target_classes);
  s.count("source_per_class", t.source_per_class);
  s.count("target_per_class", t.target_per_class);
  s.count("test_per_class", c.test_per_class);
  s.number("noise", t.noise);
  s.number("rotation_degrees", t.distortion.rotation_degrees);
  s.number("contrast_gain", t.distortion.contrast_gain);
  s.number("brightness_shift", t.distortion.brightness_shift);
  s.number("sampling_rate", c.sampling_rate);
  s.count("seed", t.seed);
  s.finish();
}

void read_model(Section s, Architecture& a) {
  s.count("conv1_channels", a.conv1_channels);
  s.count("conv2_channels", a.conv2_channels);
  s.count("kernel_size", a.kernel_size);
  s.count("feature_dim", a.feature_dim);
  s.finish();
}

void read_pretrain(Section s, PretrainConfig& p) {
  s.number("learning_rate", p.learning_rate);
  s.count("iterations", p.iterations);
  s.count("batch_size", p.batch_size);
  s.number("momentum", p.momentum);
  s.number("weight_decay", p.weight_decay);
  s.count("seed", p.seed);
  s.finish();
}

void read_train(Section s, TrainConfig& t) {
  s.number("learning_rate", t.learning_rate);
  s.count("iterations", t.iterations);
  s.count("teacher_period", t.teacher_period);
  s.count("batch_size", t.batch_size);
  s.number("gamma_fe", t.weights.fe);
  s.number("gamma_fc", t.weights.fc);
  s.number("mix_alpha", t.mix_alpha);
  s.number("momentum", t.momentum);
  s.number("weight_decay", t.weight_decay);
  s.number("lr_drop_fraction", t.lr_drop_fraction);
  s.number("lr_drop_factor", t.lr_drop_factor);
  s.enumerated("mode", t.mode, [](const std::string& v) { return parse_mode(v); });
  s.enumerated("teacher_update", t.teacher_update, parse_teacher_update);
  s.number("ema_decay", t.ema_decay);
  s.boolean("shared_lambda", t.shared_lambda);
  s.enumerated("source_space", t.source_space, parse_space);
  s.count("eval_every", t.eval_every);
  s.count("seed", t.seed);
  s.finish();
}

void read_ablation(Section s, AblationSection& a) {
  if (const json* v = s.find("modes")) {
    if (!v->is_array()) throw ConfigError(s.field("modes"), "expected a list of mode names");
    a.modes.clear();
    for (const json& m : *v) {
      if (!m.is_string()) throw ConfigError(s.field("modes"), "expected a list of mode names");
      try {
        a.modes.push_back(parse_mode(m.get<std::string>()));
      } catch (const std::invalid_argument&) {
        throw ConfigError(s.field("modes"), "unknown mode '" + m.get<std::string>() + "'");
      }
    }
  }
  if (const json* v = s.find("seeds")) {
    if (!v->is_array()) throw ConfigError(s.field("seeds"), "expected a list of integers");
    a.seeds.clear();
    for (const json& x : *v) {
      if (!x.is_number_unsigned()) {
        throw ConfigError(s.field("seeds"), "expected a list of non-negative integers");
      }
      a.seeds.push_back(x.get<std::uint64_t>());
    }
  }
  s.count("jobs", a.jobs);
  s.boolean("interpolation_loss", a.interpolation_loss);
  s.finish();
}

void read_diagnostics(Section s, ExperimentConfig& c) {
  ILConfig& d = c.diagnostics;
  if (const json* v = s.find("layers")) {
    if (!v->is_array()) throw ConfigError(s.field("layers"), "expected a list of layer names");
    c.il_layers.clear();
    for (const json& l : *v) {
      try {
        c.il_layers.push_back(parse_layer(l.is_string() ? l.get<std::string>() : ""));
      } catch (const std::invalid_argument&) {
        throw ConfigError(s.field("layers"), "layers are 'label' or 'feature'");
      }
    }
  }
  s.range("delta", d.delta_lo, d.delta_hi);
  s.range("lambda", d.lambda_lo, d.lambda_hi);
  s.count("n_pairs", d.n_pairs);
  s.count("n_delta_draws", d.n_delta_draws);
  s.count("n_lambda_draws", d.n_lambda_draws);
  s.number("denom_epsilon", d.denom_epsilon);
  s.enumerated("label_space", d.label_space, parse_space);
  s.count("seed", d.seed);
  s.count("trajectory_pairs", c.trajectory_pairs);
  s.finish();
}

// ---------------------------------------------------------------------------
// Artifacts

struct Paths {
  fs::path dir;
  fs::path source() const { return dir / "source.bin"; }
  fs::path target_train() const { return dir / "target_train.bin"; }
  fs::path target_test() const { return dir / "target_test.bin"; }
  fs::path pretrained() const { return dir / "pretrained.ckpt"; }
  fs::path student() const { return dir / "student.ckpt"; }
};

void require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) throw MissingArtifact(p, producer);
}

struct Data {
  Dataset source, train, test;
};

Data load_data(const Paths& p) {
  require(p.source(), "gen-data");
  require(p.target_train(), "gen-data");
  require(p.target_test(), "gen-data");
  return {load_dataset(p.source()), load_dataset(p.target_train()), load_dataset(p.target_test())};
}

ModelWeights load_pretrained(const Paths& p, const ExperimentConfig& c) {
  require(p.pretrained(), "pretrain");
  ModelWeights w = load_checkpoint(p.pretrained());
  Architecture expected = c.architecture();
  expected.target_classes = w.arch.target_classes;
  if (!(w.arch == expected)) {
    throw ShapeError("pretrained.ckpt was built for a different architecture than the config");
  }
  return w;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::uint64_t dataset_hash(const Dataset& d) {
  std::uint64_t h = fingerprint(Tensor({d.pixels.size()}, d.pixels));
  std::vector<double> labels(d.labels.begin(), d.labels.end());
  return fingerprint(Tensor({labels.size()}, labels), h);
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(const ExperimentConfig& c, const Paths& p, std::ostream& out) {
  const auto templates = class_templates(c.task);
  Dataset source = generate_source(c.task);
  Dataset pool = derive_target(c.task, templates, c.task.target_per_class, 1).data;
  Dataset train = stratified_subsample(pool, c.sampling_rate, mix_seed(c.seed, 0x7375));
  Dataset test = derive_target(c.task, templates, c.test_per_class, 2).data;
  save_dataset(source, p.source());
  save_dataset(train, p.target_train());
  save_dataset(test, p.target_test());
  for (const auto& [name, d] : {std::pair<const char*, const Dataset*>{"source", &source},
                                {"target_train", &train},
                                {"target_test", &test}}) {
    out << "dataset " << name << " n=" << d->size() << " classes=" << d->num_classes
        << " hash=" << hex64(dataset_hash(*d)) << "\n";
  }
}

void cmd_pretrain(const ExperimentConfig& c, const Paths& p, std::ostream& out) {
  require(p.source(), "gen-data");
  const Dataset source = load_dataset(p.source());
  PretrainLog log;
  ModelWeights w = pretrain_source(source, c.architecture(), c.pretrain, &log, &out);
  save_checkpoint(w, p.pretrained());
  std::ofstream csv(p.dir / "pretrain_loss.csv", std::ios::trunc);
  csv.precision(17);
  csv << "iteration,loss\n";
  for (std::size_t i = 0; i < log.losses.size(); ++i) csv << i + 1 << ',' << log.losses[i] << '\n';
  out << "pretrained train_acc=" << log.train_accuracy
      << " hash=" << hex64(weights_fingerprint(w)) << "\n";
}

void cmd_train(const ExperimentConfig& c, const Paths& p, std::ostream& out) {
  const ModelWeights pre = load_pretrained(p, c);
  const Data d = load_data(p);
  TrainOptions opts;
  opts.eval_set = &d.test;
  opts.progress = &out;
  TrainResult r = train(pre, d.train, d.source, c.train, opts);
  save_checkpoint(r.student, p.student());
  write_metrics_csv(r.metrics, p.dir / "metrics.csv");
  write_eval_csv(r.metrics, p.dir / "eval.csv");
  const EvalLog& e = r.metrics.evals.back();
  out << "trained mode=" << mode_name(c.train.mode) << " train_acc=" << e.train_accuracy
      << " test_acc=" << e.test_accuracy << " hash=" << hex64(weights_fingerprint(r.student))
      << "\n";
}

std::string il_column(ILLayer layer, const char* split) {
  return std::string(layer_name(layer)) + "_il_" + split;
}

void cmd_ablate(const ExperimentConfig& c, const Paths& p, std::ostream& out) {
  const ModelWeights pre = load_pretrained(p, c);
  const Data d = load_data(p);
  CellHook hook;
  if (c.ablation.interpolation_loss) {
    hook = [&](const ModelWeights& w, Mode, std::uint64_t) {
      std::map<std::string, double> cols;
      for (ILLayer layer : c.il_layers) {
        ILConfig ic = c.diagnostics;
        ic.layer = layer;
        cols[il_column(layer, "train")] = estimate_il(layer_fn(w, ic), d.train.inputs(), ic).mean;
        cols[il_column(layer, "test")] = estimate_il(layer_fn(w, ic), d.test.inputs(), ic).mean;
      }
      return cols;
    };
  }
  out << "ablation modes=" << c.ablation.modes.size() << " seeds=" << c.ablation.seeds.size()
      << " jobs=" << c.ablation.jobs << "\n";
  AblationTable t = run_ablation_suite(pre, d.train, d.test, d.source, c.train, c.ablation.modes,
                                       c.ablation.seeds, hook, c.ablation.jobs);
  write_ablation_csv(t, p.dir / "ablation_summary.csv");
  for (const AblationSummary& s : t.summaries) {
    out << "mode=" << mode_name(s.mode) << " test_acc=" << s.test_mean << "+-" << s.test_std;
    for (const auto& [k, v] : s.extra) out << ' ' << k << '=' << v.first;
    out << "\n";
  }
}

// Affine map of the flattened input, for checking the estimator end to end.
BatchFn affine_stub(std::size_t in_dim, std::size_t out_dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto w = std::make_shared<std::vector<double>>(in_dim * out_dim);
  auto b = std::make_shared<std::vector<double>>(out_dim);
  for (double& v : *w) v = g(rng) / std::sqrt(static_cast<double>(in_dim));
  for (double& v : *b) v = g(rng);
  return [=](const Tensor& x) {
    const std::size_t n = x.dim(0);
    if (x.size() != n * in_dim) throw ShapeError("affine stub: unexpected input size");
    Tensor y({n, out_dim});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t o = 0; o < out_dim; ++o) {
        double s = (*b)[o];
        for (std::size_t i = 0; i < in_dim; ++i) s += (*w)[o * in_dim + i] * x[r * in_dim + i];
        y[r * out_dim + o] = s;
      }
    return y;
  };
}

void cmd_diagnose(const ExperimentConfig& c, const Paths& p, bool stub, std::ostream& out) {
  require(p.target_train(), "gen-data");
  require(p.target_test(), "gen-data");
  const Dataset train = load_dataset(p.target_train());
  const Dataset test = load_dataset(p.target_test());

  std::optional<ModelWeights> w;
  if (!stub) {
    require(p.student(), "train");
    w = load_checkpoint(p.student());
  }
  const Architecture a = c.architecture();
  auto fn_for = [&](const ILConfig& ic) {
    if (stub) {
      const std::size_t out_dim = ic.layer == ILLayer::kFeature ? a.feature_dim : test.num_classes;
      return affine_stub(test.sample_size(), out_dim, mix_seed(c.seed, 0x6166 + out_dim));
    }
    return layer_fn(*w, ic);
  };

  std::vector<ILReport> reports;
  for (ILLayer layer : c.il_layers) {
    ILConfig ic = c.diagnostics;
    ic.layer = layer;
    for (const auto& [split, data] : {std::pair<const char*, const Dataset*>{"train", &train},
                                      {"test", &test}}) {
      ILReport r = estimate_il(fn_for(ic), data->inputs(), ic);
      r.split = split;
      out << "il layer=" << layer_name(layer) << " split=" << split << " mean=" << r.mean
          << " stderr=" << r.std_error << " n_effective=" << r.n_effective << "\n";
      reports.push_back(std::move(r));
    }
  }
  write_il_report_json(reports, p.dir / "il_report.json");

  const auto pairs = sample_pairs(test.size(), c.trajectory_pairs, mix_seed(c.seed, 0x7472));
  std::vector<std::size_t> first, second;
  for (const auto& [i, j] : pairs) {
    first.push_back(i);
    second.push_back(j);
  }
  ILConfig feat = c.diagnostics;
  feat.layer = ILLayer::kFeature;
  const Trajectory t = feature_interp_trajectory(fn_for(feat), test.batch(first), test.batch(second));
  write_trajectory_csv(t, p.dir / "pca_traj.csv");
  out << "trajectory pairs=" << pairs.size() << " rows=" << t.rows.size()
      << " explained=" << t.pca.explained[0] << "," << t.pca.explained[1] << "\n";
}

std::string pm(double mean, double sd, int precision) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << mean << " ± " << sd;
  return os.str();
}

void cmd_report(const Paths& p, std::ostream& out) {
  require(p.dir / "ablation_summary.csv", "ablate");
  const AblationTable t = read_ablation_csv(p.dir / "ablation_summary.csv");
  if (t.summaries.empty()) throw FormatError("ablation_summary.csv has no summary rows");

  auto extra = [](const AblationSummary& s, const std::string& k) -> std::optional<std::pair<double, double>> {
    auto it = s.extra.find(k);
    if (it == s.extra.end()) return std::nullopt;
    return it->second;
  };
  auto cell = [&](const AblationSummary& s, const std::string& k) {
    auto v = extra(s, k);
    return v ? pm(v->first, v->second, 4) : std::string("n/a");
  };

  std::ofstream md(p.dir / "report.md", std::ios::trunc);
  md << "# Desk-scale results\n\n";
  md << "## Test accuracy by mode\n\n| Mode | Runs | Train acc (%) | Test acc (%) |\n|---|---|---|---|\n";
  for (const auto& s : t.summaries) {
    md << "| " << mode_name(s.mode) << " | " << s.runs << " | "
       << pm(100 * s.train_mean, 100 * s.train_std, 2) << " | "
       << pm(100 * s.test_mean, 100 * s.test_std, 2) << " |\n";
  }
  for (const char* layer : {"label", "feature"}) {
    md << "\n## " << (std::string(layer) == "label" ? "Label" : "Feature")
       << " interpolation loss\n\n| Mode | Train | Test |\n|---|---|---|\n";
    for (const auto& s : t.summaries) {
      md << "| " << mode_name(s.mode) << " | " << cell(s, std::string(layer) + "_il_train")
         << " | " << cell(s, std::string(layer) + "_il_test") << " |\n";
    }
  }

  std::ofstream csv(p.dir / "report.csv", std::ios::trunc);
  csv.precision(17);
  const std::vector<std::string> cols{"label_il_train", "label_il_test", "feature_il_train",
                                      "feature_il_test"};
  csv << "mode,runs,train_acc,train_acc_std,test_acc,test_acc_std";
  for (const auto& k : cols) csv << ',' << k << ',' << k << "_std";
  csv << '\n';
  for (const auto& s : t.summaries) {
    csv << mode_name(s.mode) << ',' << s.runs << ',' << s.train_mean << ',' << s.train_std << ','
        << s.test_mean << ',' << s.test_std;
    for (const auto& k : cols) {
      auto v = extra(s, k);
      if (v) {
        csv << ',' << v->first << ',' << v->second;
      } else {
        csv << ",,";
      }
    }
    csv << '\n';
  }
  out << "report modes=" << t.summaries.size() << " written=" << (p.dir / "report.md").string()
      << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------

Architecture ExperimentConfig::architecture() const {
  Architecture a = model;
  a.image_size = task.image_size;
  a.channels = task.channels;
  a.source_classes = task.source_classes;
  a.target_classes = task.target_classes;
  return a;
}

void ExperimentConfig::validate() const {
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  task.validate();
  if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) {
    throw ConfigError("task.sampling_rate", "must be in (0, 1]");
  }
  if (test_per_class < 1) throw ConfigError("task.test_per_class", "must be >= 1");
  try {
    architecture().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("model", e.what());
  }
  pretrain.validate();
  train.validate();
  if (ablation.modes.empty()) throw ConfigError("ablation.modes", "must list at least one mode");
  if (ablation.seeds.size() < 2) throw ConfigError("ablation.seeds", "need at least two seeds");
  if (ablation.jobs < 1) throw ConfigError("ablation.jobs", "must be >= 1");
  diagnostics.validate();
  if (il_layers.empty()) throw ConfigError("diagnostics.layers", "must list at least one layer");
  if (trajectory_pairs < 1) throw ConfigError("diagnostics.trajectory_pairs", "must be >= 1");
}

ExperimentConfig parse_config(const json& input, const std::vector<std::string>& overrides) {
  json doc = input.is_null() ? json::object() : input;
  if (!doc.is_object()) throw ConfigError("<root>", "config must be an object");
  for (const std::string& o : overrides) apply_override(doc, o);

  ExperimentConfig c;
  Section root(doc, "");
  root.count("seed", c.seed);
  c.task.seed = c.seed;
  c.pretrain.seed = mix_seed(c.seed, 0x7072);
  c.train.seed = c.seed;
  c.diagnostics.seed = mix_seed(c.seed, 0x696c);

  std::string dir = c.output_dir.string();
  root.string("output_dir", dir);
  c.output_dir = dir;

  auto section = [&](const char* name, auto&& reader) {
    if (const json* s = root.subsection(name)) reader(Section(*s, name));
  };
  section("task", [&](Section s) { read_task(std::move(s), c); });
  section("model", [&](Section s) { read_model(std::move(s), c.model); });
  section("pretrain", [&](Section s) { read_pretrain(std::move(s), c.pretrain); });
  section("train", [&](Section s) { read_train(std::move(s), c.train); });
  section("ablation", [&](Section s) { read_ablation(std::move(s), c.ablation); });
  section("diagnostics", [&](Section s) { read_diagnostics(std::move(s), c); });
  root.finish();

  if (const char* env = std::getenv(kOutputDirEnv); env && *env) c.output_dir = env;
  c.validate();
  return c;
}

ExperimentConfig load_config(const fs::path* path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (path) {
    std::ifstream is(*path);
    if (!is) throw ConfigError("--config", "cannot read " + path->string());
    try {
      doc = json::parse(is, nullptr, true, /*ignore_comments=*/true);
    } catch (const json::parse_error& e) {
      throw ConfigError("--config", std::string("parse error: ") + e.what());
    }
  }
  return parse_config(doc, overrides);
}

json to_json(const ExperimentConfig& c) {
  json modes = json::array();
  for (Mode m : c.ablation.modes) modes.push_back(mode_name(m));
  json layers = json::array();
  for (ILLayer l : c.il_layers) layers.push_back(layer_name(l));
  const TaskSpec& t = c.task;
  const TrainConfig& tr = c.train;
  const ILConfig& d = c.diagnostics;
  return json{
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"task",
       {{"image_size", t.image_size},
        {"channels", t.channels},
        {"source_classes", t.source_classes},
        {"target_classes", t.target_classes},
        {"source_per_class", t.source_per_class},
        {"target_per_class", t.target_per_class},
        {"test_per_class", c.test_per_class},
        {"noise", t.noise},
        {"rotation_degrees", t.distortion.rotation_degrees},
        {"contrast_gain", t.distortion.contrast_gain},
        {"brightness_shift", t.distortion.brightness_shift},
        {"sampling_rate", c.sampling_rate},
        {"seed", t.seed}}},
      {"model",
       {{"conv1_channels", c.model.conv1_channels},
        {"conv2_channels", c.model.conv2_channels},
        {"kernel_size", c.model.kernel_size},
        {"feature_dim", c.model.feature_dim}}},
      {"pretrain",
       {{"learning_rate", c.pretrain.learning_rate},
        {"iterations", c.pretrain.iterations},
        {"batch_size", c.pretrain.batch_size},
        {"momentum", c.pretrain.momentum},
        {"weight_decay", c.pretrain.weight_decay},
        {"seed", c.pretrain.seed}}},
      {"train",
       {{"learning_rate", tr.learning_rate},
        {"iterations", tr.iterations},
        {"teacher_period", tr.teacher_period},
        {"batch_size", tr.batch_size},
        {"gamma_fe", tr.weights.fe},
        {"gamma_fc", tr.weights.fc},
        {"mix_alpha", tr.mix_alpha},
        {"momentum", tr.momentum},
        {"weight_decay", tr.weight_decay},
        {"lr_drop_fraction", tr.lr_drop_fraction},
        {"lr_drop_factor", tr.lr_drop_factor},
        {"mode", mode_name(tr.mode)},
        {"teacher_update", teacher_update_name(tr.teacher_update)},
        {"ema_decay", tr.ema_decay},
        {"shared_lambda", tr.shared_lambda},
        {"source_space", space_name(tr.source_space)},
        {"eval_every", tr.eval_every},
        {"seed", tr.seed}}},
      {"ablation",
       {{"modes", modes},
        {"seeds", c.ablation.seeds},
        {"jobs", c.ablation.jobs},
        {"interpolation_loss", c.ablation.interpolation_loss}}},
      {"diagnostics",
       {{"layers", layers},
        {"delta", {d.delta_lo, d.delta_hi}},
        {"lambda", {d.lambda_lo, d.lambda_hi}},
        {"n_pairs", d.n_pairs},
        {"n_delta_draws", d.n_delta_draws},
        {"n_lambda_draws", d.n_lambda_draws},
        {"denom_epsilon", d.denom_epsilon},
        {"label_space", space_name(d.label_space)},
        {"seed", d.seed},
        {"trajectory_pairs", c.trajectory_pairs}}},
  };
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Self-distilled mixup transfer-learning lab"};
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  bool dump = false;
  bool stub = false;
  app.add_option("-c,--config", config_path, "JSON config file");
  app.add_option("-s,--set", overrides, "Override a field, e.g. train.mode=SMILE")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_flag("--dump-config", dump, "Print the resolved config before running");

  const std::vector<std::pair<const char*, const char*>> commands{
      {"gen-data", "Generate source, target-train and target-test datasets"},
      {"pretrain", "Pre-train extractor and source head on the source task"},
      {"train", "Fine-tune on the target task"},
      {"ablate", "Train every (mode, seed) cell and summarise"},
      {"diagnose", "Interpolation losses and PCA trajectories of the student"},
      {"report", "Assemble summary tables from the ablation results"},
  };
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    if (std::string(name) == "diagnose") {
      sub->add_flag("--affine-stub", stub, "Measure an affine stand-in instead of the student");
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error kind=usage reason=" << token(e.what()) << "\n";
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const fs::path cfg_path(config_path);
    const ExperimentConfig cfg = load_config(config_path.empty() ? nullptr : &cfg_path, overrides);
    if (dump) out << to_json(cfg).dump(2) << "\n";
    const Paths paths{cfg.output_dir};
    fs::create_directories(paths.dir);

    if (command == "gen-data") cmd_gen_data(cfg, paths, out);
    else if (command == "pretrain") cmd_pretrain(cfg, paths, out);
    else if (command == "train") cmd_train(cfg, paths, out);
    else if (command == "ablate") cmd_ablate(cfg, paths, out);
    else if (command == "diagnose") cmd_diagnose(cfg, paths, stub, out);
    else if (command == "report") cmd_report(paths, out);
    return 0;
  } catch (const ConfigError& e) {
    err << "error kind=config field=" << token(e.field()) << " reason=" << token(e.reason())
        << "\n";
    return 2;
  } catch (const MissingArtifact& e) {
    err << "error kind=missing_artifact path=" << token(e.path.string())
        << " hint=run_" << e.producer << "_first\n";
    return 3;
  } catch (const FormatError& e) {
    err << "error kind=format reason=" << token(e.what()) << "\n";
    return 4;
  } catch (const NonFiniteError& e) {
    err << "error kind=divergence reason=" << token(e.what()) << "\n";
    return 5;
  } catch (const std::exception& e) {
    err << "error kind=runtime command=" << command << " reason=" << token(e.what()) << "\n";
    return 1;
  }
}

}  // namespace smile::cli
