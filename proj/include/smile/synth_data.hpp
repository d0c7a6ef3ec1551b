#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "smile/tensor.hpp"

namespace smile {

enum class Domain : std::uint8_t { kSource = 0, kTarget = 1 };

struct Sample {
  Tensor input;  // [H, W, C], values in [0, 1]
  int label = 0;
  Domain domain = Domain::kSource;
};

/// Labelled images stored contiguously, HWC per sample.
struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  Domain domain = Domain::kSource;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::size_t sample_size() const noexcept { return height * width * channels; }

  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * sample_size(), sample_size()};
  }
  Sample sample(std::size_t i) const;

  /// Selected samples as an NCHW batch.
  Tensor batch(std::span<const std::size_t> indices) const;
  /// Every sample as an NCHW batch.
  Tensor inputs() const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;

  /// Samples per class, indexed by label.
  std::vector<std::size_t> class_counts() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct Distortion {
  double rotation_degrees = 30.0;
  double contrast_gain = 0.8;
  double brightness_shift = 0.05;

  bool is_identity() const {
    return rotation_degrees == 0.0 && contrast_gain == 1.0 && brightness_shift == 0.0;
  }
};

struct TaskSpec {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t source_classes = 20;
  std::size_t target_classes = 5;
  std::size_t source_per_class = 50;
  std::size_t target_per_class = 40;
  double noise = 0.3;
  Distortion distortion;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// One fixed template per source class, [H, W, C]. Each channel is a sum of
/// two oriented sinusoidal gratings with class-specific orientation,
/// frequency and phase, centred at 0.5 and bounded in [0, 1].
std::vector<Tensor> class_templates(const TaskSpec& spec);

/// clip(T_c + N(0, noise^2)) for every source class, balanced and shuffled.
Dataset generate_source(const TaskSpec& spec);

struct TargetTask {
  Dataset data;
  std::vector<int> source_classes;  // target label k came from source class source_classes[k]
  std::vector<Tensor> templates;    // distorted templates, one per target label
};

/// Picks `target_classes` source classes (seeded by spec.seed), applies the
/// distortion, relabels 0..C_tgt-1 and samples `per_class` fresh noisy images
/// per class. `noise_stream` separates independent draws (train pool vs test).
TargetTask derive_target(const TaskSpec& spec, std::span<const Tensor> source_templates,
                         std::size_t per_class, std::uint64_t noise_stream = 1);

/// Rotates about the image centre (bilinear, edge-clamped), then applies
/// 0.5 + gain * (t - 0.5) + shift, clipped to [0, 1].
Tensor distort(const Tensor& image, const Distortion& d);

/// Keeps ceil(rate * n_c) samples of every class (at least one), chosen by a
/// seeded shuffle; surviving samples keep their original order.
Dataset stratified_subsample(const Dataset& dataset, double rate, std::uint64_t seed);

/// Binary layout (little endian):
///   magic "SMDS", u32 version (=1), u32 H, u32 W, u32 C, u64 count,
///   u32 class count, u8 domain, then count*H*W*C f64 pixels (HWC per
///   sample), then count i32 labels.
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// One row per sample: flattened pixels p0..pN-1, then label.
void export_csv(const Dataset& dataset, const std::filesystem::path& path);

/// splitmix64 finaliser; derives independent sub-seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace smile
