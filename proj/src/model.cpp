#include "smile/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "smile/binary_io.hpp"
#include "smile/errors.hpp"
#include "smile/synth_data.hpp"

namespace smile {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Head fresh_head(std::size_t d, std::size_t classes, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  Head h;
  h.weight = uniform({d, classes}, bound, rng);
  h.bias = uniform({classes}, bound, rng);
  return h;
}

}  // namespace

void Architecture::validate() const {
  if (image_size < 1) throw ConfigError("model.image_size", "must be >= 1");
  if (channels < 1) throw ConfigError("model.channels", "must be >= 1");
  if (conv1_channels < 1) throw ConfigError("model.conv1_channels", "must be >= 1");
  if (conv2_channels < 1) throw ConfigError("model.conv2_channels", "must be >= 1");
  if (kernel_size % 2 == 0) throw ConfigError("model.kernel_size", "must be odd");
  if (feature_dim < 1) throw ConfigError("model.feature_dim", "must be >= 1");
  if (source_classes < 1) throw ConfigError("model.source_classes", "must be >= 1");
  if (target_classes < 1) throw ConfigError("model.target_classes", "must be >= 1");
}

std::vector<NamedParam> ModelWeights::parameters() {
  std::vector<NamedParam> p = {
      {"fe.conv1.w", &extractor.conv1_w}, {"fe.conv1.b", &extractor.conv1_b},
      {"fe.conv2.w", &extractor.conv2_w}, {"fe.conv2.b", &extractor.conv2_b},
      {"fe.proj.w", &extractor.proj_w},   {"fe.proj.b", &extractor.proj_b},
      {"src.w", &source_head.weight},     {"src.b", &source_head.bias},
  };
  if (target_head) {
    p.push_back({"tgt.w", &target_head->weight});
    p.push_back({"tgt.b", &target_head->bias});
  }
  return p;
}

std::vector<const Tensor*> ModelWeights::parameters() const {
  std::vector<const Tensor*> out;
  for (const NamedParam& p : const_cast<ModelWeights*>(this)->parameters()) {
    out.push_back(p.tensor);
  }
  return out;
}

ModelWeights init_source_model(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  const std::size_t k = arch.kernel_size;
  auto he = [](std::size_t fan_in) { return std::sqrt(6.0 / static_cast<double>(fan_in)); };
  ModelWeights w;
  w.arch = arch;
  w.extractor.conv1_w = uniform({arch.conv1_channels, arch.channels, k, k},
                                he(arch.channels * k * k), rng);
  w.extractor.conv1_b = Tensor({arch.conv1_channels}, 0.0);
  w.extractor.conv2_w = uniform({arch.conv2_channels, arch.conv1_channels, k, k},
                                he(arch.conv1_channels * k * k), rng);
  w.extractor.conv2_b = Tensor({arch.conv2_channels}, 0.0);
  w.extractor.proj_w = uniform({arch.conv2_channels, arch.feature_dim},
                               he(arch.conv2_channels), rng);
  w.extractor.proj_b = Tensor({arch.feature_dim}, 0.0);
  const double hb = 1.0 / std::sqrt(static_cast<double>(arch.feature_dim));
  w.source_head.weight = uniform({arch.feature_dim, arch.source_classes}, hb, rng);
  w.source_head.bias = Tensor({arch.source_classes}, 0.0);
  return w;
}

StudentTeacher init_from_pretrained(const ModelWeights& pretrained, const Architecture& arch,
                                    std::uint64_t seed) {
  arch.validate();
  Architecture expected = arch;
  expected.target_classes = pretrained.arch.target_classes;
  if (!(pretrained.arch == expected)) {
    throw ShapeError("init_from_pretrained: checkpoint architecture does not match config");
  }
  const Extractor& e = pretrained.extractor;
  const std::size_t k = arch.kernel_size;
  if (e.conv1_w.shape() != Shape{arch.conv1_channels, arch.channels, k, k} ||
      e.conv2_w.shape() != Shape{arch.conv2_channels, arch.conv1_channels, k, k} ||
      e.proj_w.shape() != Shape{arch.conv2_channels, arch.feature_dim} ||
      pretrained.source_head.weight.shape() != Shape{arch.feature_dim, arch.source_classes}) {
    throw ShapeError("init_from_pretrained: tensor shapes do not match architecture");
  }

  StudentTeacher st;
  st.teacher = teacher_snapshot(pretrained);
  st.teacher.arch = arch;
  st.student = st.teacher;
  std::mt19937_64 rng(mix_seed(seed, 0x7467));
  st.student.target_head = fresh_head(arch.feature_dim, arch.target_classes, rng);
  return st;
}

ModelWeights snapshot(const ModelWeights& w) { return w; }

ModelWeights teacher_snapshot(const ModelWeights& student) {
  ModelWeights t;
  t.arch = student.arch;
  t.extractor = student.extractor;
  t.source_head = student.source_head;
  return t;
}

std::uint64_t weights_fingerprint(const ModelWeights& w) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Tensor* t : w.parameters()) h = fingerprint(*t, h);
  return h;
}

std::vector<ad::Var> BoundModel::vars() const {
  std::vector<ad::Var> v = {conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b,
                            source.weight, source.bias};
  if (target) {
    v.push_back(target->weight);
    v.push_back(target->bias);
  }
  return v;
}

BoundModel bind(ad::Tape& tape, const ModelWeights& w, Binding binding) {
  auto leaf = [&](const Tensor& t) {
    return binding == Binding::kTrainable ? tape.parameter(t) : tape.constant(t);
  };
  BoundModel m;
  m.conv1_w = leaf(w.extractor.conv1_w);
  m.conv1_b = leaf(w.extractor.conv1_b);
  m.conv2_w = leaf(w.extractor.conv2_w);
  m.conv2_b = leaf(w.extractor.conv2_b);
  m.proj_w = leaf(w.extractor.proj_w);
  m.proj_b = leaf(w.extractor.proj_b);
  m.source = {leaf(w.source_head.weight), leaf(w.source_head.bias)};
  if (w.target_head) m.target = BoundHead{leaf(w.target_head->weight), leaf(w.target_head->bias)};
  return m;
}

ad::Var extract_features(const BoundModel& m, ad::Var x) {
  ad::Var h = ad::relu(ad::conv2d(x, m.conv1_w, m.conv1_b));
  h = ad::relu(ad::conv2d(h, m.conv2_w, m.conv2_b));
  h = ad::global_avg_pool(h);
  return ad::relu(ad::add_bias(ad::matmul(h, m.proj_w), m.proj_b));
}

ad::Var apply_head(const BoundHead& h, ad::Var features) {
  return ad::add_bias(ad::matmul(features, h.weight), h.bias);
}

Network as_network(const BoundModel& m) {
  Network net;
  net.features = [m](ad::Var x) { return extract_features(m, x); };
  if (m.target) {
    net.target_head = [h = *m.target](ad::Var f) { return apply_head(h, f); };
  }
  net.source_head = [h = m.source](ad::Var f) { return apply_head(h, f); };
  return net;
}

namespace {

void check_input(const ModelWeights& w, const Tensor& x) {
  const Architecture& a = w.arch;
  if (x.rank() != 4 || x.dim(1) != a.channels || x.dim(2) != a.image_size ||
      x.dim(3) != a.image_size) {
    throw ShapeError("model input " + to_string(x.shape()) + " does not match [N," +
                     std::to_string(a.channels) + "," + std::to_string(a.image_size) + "," +
                     std::to_string(a.image_size) + "]");
  }
}

}  // namespace

Tensor feature_extract(const ModelWeights& w, const Tensor& x) {
  check_input(w, x);
  ad::Tape tape;
  BoundModel m = bind(tape, w, Binding::kFrozen);
  return extract_features(m, tape.constant(x)).value();
}

Tensor target_logits(const ModelWeights& w, const Tensor& x) {
  if (!w.target_head) throw std::logic_error("target_logits: model has no target head");
  check_input(w, x);
  ad::Tape tape;
  BoundModel m = bind(tape, w, Binding::kFrozen);
  return apply_head(*m.target, extract_features(m, tape.constant(x))).value();
}

Tensor source_logits(const ModelWeights& w, const Tensor& x) {
  check_input(w, x);
  ad::Tape tape;
  BoundModel m = bind(tape, w, Binding::kFrozen);
  return apply_head(m.source, extract_features(m, tape.constant(x))).value();
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw ShapeError("accuracy: logits/labels mismatch");
  }
  if (labels.empty()) return 0.0;
  const std::size_t cols = logits.dim(1);
  std::size_t hits = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const double* row = logits.data() + r * cols;
    const auto best = static_cast<int>(std::max_element(row, row + cols) - row);
    hits += best == labels[r];
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  binio::write_int<std::uint32_t>(os, kVersion);
  const Architecture& a = w.arch;
  for (std::size_t v : {a.image_size, a.channels, a.conv1_channels, a.conv2_channels,
                        a.kernel_size, a.feature_dim, a.source_classes, a.target_classes}) {
    binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(v));
  }
  binio::write_int<std::uint8_t>(os, w.target_head ? 1 : 0);
  auto params = const_cast<ModelWeights&>(w).parameters();
  binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const NamedParam& p : params) {
    binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor->rank()));
    for (std::size_t d : p.tensor->shape()) binio::write_int<std::uint64_t>(os, d);
    for (double v : p.tensor->values()) binio::write_double(os, v);
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

ModelWeights load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated checkpoint header");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("bad checkpoint magic");
  const auto version = binio::read_int<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelWeights w;
  Architecture& a = w.arch;
  for (std::size_t* f : {&a.image_size, &a.channels, &a.conv1_channels, &a.conv2_channels,
                         &a.kernel_size, &a.feature_dim, &a.source_classes, &a.target_classes}) {
    *f = binio::read_int<std::uint32_t>(is, "architecture");
  }
  // Shapes below are checked against a freshly initialised model of the
  // same architecture.
  ModelWeights reference = init_source_model(a, 0);
  if (binio::read_int<std::uint8_t>(is, "head flag")) {
    w.target_head = Head{};
    reference.target_head = Head{Tensor({a.feature_dim, a.target_classes}),
                                 Tensor({a.target_classes})};
  }
  auto params = w.parameters();
  auto expected = reference.parameters();
  const auto count = binio::read_int<std::uint32_t>(is, "tensor count");
  if (count != params.size()) throw FormatError("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto len = binio::read_int<std::uint32_t>(is, "name length");
    if (len > 256) throw FormatError("checkpoint tensor name too long");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint name");
    if (name != params[i].name) throw FormatError("unexpected tensor '" + name + "'");
    const auto rank = binio::read_int<std::uint32_t>(is, "rank");
    if (rank > 8) throw FormatError("checkpoint rank too large");
    Shape shape(rank);
    for (auto& d : shape) d = binio::read_int<std::uint64_t>(is, "dims");
    if (shape != expected[i].tensor->shape()) {
      throw FormatError("tensor '" + name + "' has shape " + to_string(shape));
    }
    std::vector<double> values(element_count(shape));
    for (double& v : values) v = binio::read_double(is, "values");
    *params[i].tensor = Tensor(std::move(shape), std::move(values));
  }
  return w;
}

}  // namespace smile
