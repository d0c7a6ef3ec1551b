#include "smile/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "smile/binary_io.hpp"
#include "smile/errors.hpp"

namespace smile {

namespace {

constexpr char kMagic[4] = {'S', 'M', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

// Stream ids for the independent random sources of one spec.
constexpr std::uint64_t kTemplateStream = 0x7e3a;
constexpr std::uint64_t kSourceNoiseStream = 0x50c0;
constexpr std::uint64_t kClassPickStream = 0xc1a5;

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Sample Dataset::sample(std::size_t i) const {
  auto img = image(i);
  return {Tensor({height, width, channels}, std::vector<double>(img.begin(), img.end())),
          labels.at(i), domain};
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  Tensor out({indices.size(), channels, height, width});
  const std::size_t hw = height * width;
  for (std::size_t n = 0; n < indices.size(); ++n) {
    if (indices[n] >= size()) throw std::out_of_range("Dataset::batch: index out of range");
    const double* src = pixels.data() + indices[n] * sample_size();
    double* dst = out.data() + n * sample_size();
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t c = 0; c < channels; ++c) dst[c * hw + p] = src[p * channels + c];
  }
  return out;
}

Tensor Dataset::inputs() const {
  std::vector<std::size_t> all(size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  return batch(all);
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
  return counts;
}

void TaskSpec::validate() const {
  if (image_size < 3) throw ConfigError("task.image_size", "must be >= 3");
  if (channels < 1) throw ConfigError("task.channels", "must be >= 1");
  if (source_classes < 1) throw ConfigError("task.source_classes", "must be >= 1");
  if (target_classes < 1) throw ConfigError("task.target_classes", "must be >= 1");
  if (target_classes > source_classes) {
    throw ConfigError("task.target_classes", "must not exceed task.source_classes");
  }
  if (source_per_class < 1) throw ConfigError("task.source_per_class", "must be >= 1");
  if (target_per_class < 1) throw ConfigError("task.target_per_class", "must be >= 1");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw ConfigError("task.noise", "must be >= 0");
  if (!std::isfinite(distortion.rotation_degrees)) {
    throw ConfigError("task.distortion.rotation_degrees", "must be finite");
  }
  if (!(distortion.contrast_gain > 0.0) || !std::isfinite(distortion.contrast_gain)) {
    throw ConfigError("task.distortion.contrast_gain", "must be > 0");
  }
  if (!std::isfinite(distortion.brightness_shift)) {
    throw ConfigError("task.distortion.brightness_shift", "must be finite");
  }
}

std::vector<Tensor> class_templates(const TaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(mix_seed(spec.seed, kTemplateStream));
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  std::uniform_real_distribution<double> freq(2.0, 5.0);  // cycles per image
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

  const std::size_t S = spec.image_size;
  const double centre = 0.5 * static_cast<double>(S - 1);
  std::vector<Tensor> out;
  out.reserve(spec.source_classes);
  for (std::size_t c = 0; c < spec.source_classes; ++c) {
    Tensor t({S, S, spec.channels});
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      struct Grating { double kx, ky, phi; } g[2];
      for (auto& gr : g) {
        const double th = angle(rng);
        const double k = 2.0 * std::numbers::pi * freq(rng) / static_cast<double>(S);
        gr = {k * std::cos(th), k * std::sin(th), phase(rng)};
      }
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double u = static_cast<double>(x) - centre;
          const double v = static_cast<double>(y) - centre;
          double val = 0.5;
          for (const auto& gr : g) val += 0.25 * std::sin(gr.kx * u + gr.ky * v + gr.phi);
          t[(y * S + x) * spec.channels + ch] = clip01(val);
        }
    }
    out.push_back(std::move(t));
  }
  return out;
}

namespace {

Dataset sample_from_templates(std::span<const Tensor> templates, std::size_t per_class,
                              double noise, Domain domain, std::uint64_t seed) {
  const Shape& shape = templates.front().shape();
  Dataset d;
  d.height = shape[0];
  d.width = shape[1];
  d.channels = shape[2];
  d.num_classes = templates.size();
  d.domain = domain;

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t n = templates.size() * per_class;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  d.pixels.resize(n * d.sample_size());
  d.labels.resize(n);
  for (std::size_t slot = 0; slot < n; ++slot) {
    const std::size_t cls = order[slot] / per_class;
    const Tensor& t = templates[cls];
    double* dst = d.pixels.data() + slot * d.sample_size();
    for (std::size_t p = 0; p < d.sample_size(); ++p) {
      dst[p] = noise > 0.0 ? clip01(t[p] + noise * gauss(rng)) : t[p];
    }
    d.labels[slot] = static_cast<int>(cls);
  }
  return d;
}

}  // namespace

Dataset generate_source(const TaskSpec& spec) {
  const auto templates = class_templates(spec);
  return sample_from_templates(templates, spec.source_per_class, spec.noise, Domain::kSource,
                               mix_seed(spec.seed, kSourceNoiseStream));
}

Tensor distort(const Tensor& image, const Distortion& d) {
  if (image.rank() != 3) throw ShapeError("distort: expected [H,W,C] image");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  Tensor rotated = image;
  if (d.rotation_degrees != 0.0) {
    const double a = d.rotation_degrees * std::numbers::pi / 180.0;
    const double ca = std::cos(a), sa = std::sin(a);
    const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
    auto at = [&](std::ptrdiff_t y, std::ptrdiff_t x, std::size_t c) {
      y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(H) - 1);
      x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(W) - 1);
      return image[(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C + c];
    };
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        // Inverse map: output pixel samples the input rotated by -a.
        const double u = static_cast<double>(x) - cx, v = static_cast<double>(y) - cy;
        const double sx = ca * u + sa * v + cx;
        const double sy = -sa * u + ca * v + cy;
        const double fx = std::floor(sx), fy = std::floor(sy);
        const double tx = sx - fx, ty = sy - fy;
        const auto ix = static_cast<std::ptrdiff_t>(fx), iy = static_cast<std::ptrdiff_t>(fy);
        for (std::size_t c = 0; c < C; ++c) {
          rotated[(y * W + x) * C + c] =
              (1 - ty) * ((1 - tx) * at(iy, ix, c) + tx * at(iy, ix + 1, c)) +
              ty * ((1 - tx) * at(iy + 1, ix, c) + tx * at(iy + 1, ix + 1, c));
        }
      }
  }
  if (d.contrast_gain != 1.0 || d.brightness_shift != 0.0) {
    for (double& v : rotated.values()) {
      v = clip01(0.5 + d.contrast_gain * (v - 0.5) + d.brightness_shift);
    }
  }
  return rotated;
}

TargetTask derive_target(const TaskSpec& spec, std::span<const Tensor> source_templates,
                         std::size_t per_class, std::uint64_t noise_stream) {
  spec.validate();
  if (source_templates.size() < spec.target_classes) {
    throw ConfigError("task.target_classes", "more target classes than source templates");
  }
  if (per_class < 1) throw ConfigError("task.target_per_class", "must be >= 1");

  std::vector<int> classes(source_templates.size());
  std::iota(classes.begin(), classes.end(), 0);
  std::mt19937_64 pick(mix_seed(spec.seed, kClassPickStream));
  std::shuffle(classes.begin(), classes.end(), pick);
  classes.resize(spec.target_classes);

  TargetTask task;
  task.source_classes = classes;
  for (int c : classes) {
    task.templates.push_back(spec.distortion.is_identity()
                                 ? source_templates[static_cast<std::size_t>(c)]
                                 : distort(source_templates[static_cast<std::size_t>(c)],
                                           spec.distortion));
  }
  task.data = sample_from_templates(task.templates, per_class, spec.noise, Domain::kTarget,
                                    mix_seed(spec.seed, 0x7a90 + noise_stream));
  return task;
}

Dataset stratified_subsample(const Dataset& dataset, double rate, std::uint64_t seed) {
  if (dataset.empty()) throw std::invalid_argument("stratified_subsample: empty dataset");
  if (!(rate > 0.0 && rate <= 1.0)) {
    throw std::invalid_argument("stratified_subsample: rate must be in (0, 1]");
  }
  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    by_class.at(static_cast<std::size_t>(dataset.labels[i])).push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> keep;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    // Tolerance absorbs representation error (0.3 * 10 = 3.0000000000000004).
    const double want = std::ceil(rate * static_cast<double>(members.size()) - 1e-9);
    const auto take = std::clamp<std::size_t>(static_cast<std::size_t>(want), 1, members.size());
    std::shuffle(members.begin(), members.end(), rng);
    keep.insert(keep.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(keep.begin(), keep.end());

  Dataset out = dataset;
  out.pixels.clear();
  out.labels.clear();
  out.pixels.reserve(keep.size() * dataset.sample_size());
  for (std::size_t i : keep) {
    auto img = dataset.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(dataset.labels[i]);
  }
  return out;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  binio::write_int<std::uint32_t>(os, kVersion);
  binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(d.height));
  binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(d.width));
  binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(d.channels));
  binio::write_int<std::uint64_t>(os, d.size());
  binio::write_int<std::uint32_t>(os, static_cast<std::uint32_t>(d.num_classes));
  binio::write_int<std::uint8_t>(os, static_cast<std::uint8_t>(d.domain));
  for (double v : d.pixels) binio::write_double(os, v);
  for (int y : d.labels) binio::write_int<std::int32_t>(os, y);
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4)) throw FormatError("truncated dataset header");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("bad dataset magic");
  const auto version = binio::read_int<std::uint32_t>(is, "version");
  if (version != kVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(version));
  }
  Dataset d;
  d.height = binio::read_int<std::uint32_t>(is, "height");
  d.width = binio::read_int<std::uint32_t>(is, "width");
  d.channels = binio::read_int<std::uint32_t>(is, "channels");
  const auto count = binio::read_int<std::uint64_t>(is, "count");
  d.num_classes = binio::read_int<std::uint32_t>(is, "class count");
  const auto domain = binio::read_int<std::uint8_t>(is, "domain");
  if (domain > 1) throw FormatError("bad domain tag");
  d.domain = static_cast<Domain>(domain);
  d.pixels.resize(count * d.sample_size());
  for (double& v : d.pixels) v = binio::read_double(is, "pixels");
  d.labels.resize(count);
  for (int& y : d.labels) {
    y = binio::read_int<std::int32_t>(is, "labels");
    if (y < 0 || static_cast<std::size_t>(y) >= d.num_classes) {
      throw FormatError("label out of range");
    }
  }
  return d;
}

void export_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.precision(17);
  for (std::size_t p = 0; p < d.sample_size(); ++p) os << 'p' << p << ',';
  os << "label\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.image(i)) os << v << ',';
    os << d.labels[i] << '\n';
  }
}

}  // namespace smile
