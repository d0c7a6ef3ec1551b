#pragma once

// Feature extractor + classifier heads.
//
//   x [N,C,H,W] -> conv3x3 -> relu -> conv3x3 -> relu -> global mean pool
//               -> dense(d) -> relu                      = features [N,d]
//   features -> affine head                              = logits [N,classes]
//
// A model always carries the source head (z'_src for the student, z''_src for
// the teacher). The target head only exists on the student.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "smile/autodiff.hpp"
#include "smile/tensor.hpp"

namespace smile {

struct Architecture {
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t kernel_size = 3;
  std::size_t feature_dim = 32;
  std::size_t source_classes = 20;
  std::size_t target_classes = 5;

  void validate() const;
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct Extractor {
  Tensor conv1_w, conv1_b;  // [c1,C,k,k], [c1]
  Tensor conv2_w, conv2_b;  // [c2,c1,k,k], [c2]
  Tensor proj_w, proj_b;    // [c2,d], [d]
  friend bool operator==(const Extractor&, const Extractor&) = default;
};

struct Head {
  Tensor weight;  // [d, classes]
  Tensor bias;    // [classes]
  friend bool operator==(const Head&, const Head&) = default;
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

struct ModelWeights {
  Architecture arch;
  Extractor extractor;
  Head source_head;
  std::optional<Head> target_head;

  /// Fixed order: extractor, source head, then target head when present.
  std::vector<NamedParam> parameters();
  std::vector<const Tensor*> parameters() const;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

/// Fresh extractor + source head for pre-training (He-uniform convs and
/// projection, zero biases, head uniform in [-1/sqrt(d), 1/sqrt(d)]).
ModelWeights init_source_model(const Architecture& arch, std::uint64_t seed);

struct StudentTeacher {
  ModelWeights student;
  ModelWeights teacher;
};

/// Student and teacher both copy the pre-trained extractor and source head;
/// the student gets a fresh target head (weights and bias uniform in
/// [-1/sqrt(d), 1/sqrt(d)]). Throws ShapeError if `pretrained` was built for a
/// different architecture.
StudentTeacher init_from_pretrained(const ModelWeights& pretrained, const Architecture& arch,
                                    std::uint64_t seed);

/// Independent deep copy.
ModelWeights snapshot(const ModelWeights& w);
/// Deep copy without the target head, as used for the teacher.
ModelWeights teacher_snapshot(const ModelWeights& student);

std::uint64_t weights_fingerprint(const ModelWeights& w);

// ---------------------------------------------------------------------------
// Tape binding

struct BoundHead {
  ad::Var weight, bias;
};

struct BoundModel {
  ad::Var conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
  BoundHead source;
  std::optional<BoundHead> target;

  /// Same order as ModelWeights::parameters().
  std::vector<ad::Var> vars() const;
};

enum class Binding { kTrainable, kFrozen };

BoundModel bind(ad::Tape& tape, const ModelWeights& w, Binding binding);

ad::Var extract_features(const BoundModel& m, ad::Var x);
ad::Var apply_head(const BoundHead& h, ad::Var features);

/// Callable view of a network on a tape; the loss terms only see this, so
/// tests can substitute purpose-built (e.g. affine) networks.
struct Network {
  std::function<ad::Var(ad::Var)> features;
  std::function<ad::Var(ad::Var)> target_head;  // features -> target logits
  std::function<ad::Var(ad::Var)> source_head;  // features -> source logits
};

Network as_network(const BoundModel& m);

// ---------------------------------------------------------------------------
// Tape-free evaluation on NCHW batches.

Tensor feature_extract(const ModelWeights& w, const Tensor& x);
Tensor target_logits(const ModelWeights& w, const Tensor& x);
Tensor source_logits(const ModelWeights& w, const Tensor& x);

/// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& logits, const std::vector<int>& labels);

// ---------------------------------------------------------------------------
// Checkpoints. Layout (little endian): magic "SMCK", u32 version (=1),
// 8 x u32 architecture fields (image_size, channels, conv1, conv2, kernel,
// feature_dim, source_classes, target_classes), u8 has_target_head,
// u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
// rank x u64 dims, f64 values.

void save_checkpoint(const ModelWeights& w, const std::filesystem::path& path);
ModelWeights load_checkpoint(const std::filesystem::path& path);

}  // namespace smile
