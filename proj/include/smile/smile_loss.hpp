#pragma once

// Loss terms of the self-distilled mixup objective.
//
//   task   = mean_i CE(z(x_i), y_i)
//   L_MXP  = mean_i (1-l) CE(z(m_i), y_i) + l CE(z(m_i), y_j),  m_i = mix(x_i, x_j, l)
//   L_FE   = mean_i || FE_s(m_i) - mix(FE_t(x_i), FE_t(x_j), l) ||^2      (target batch)
//   L_FC   = mean_i || z'_src(m_i) - mix(z''_src(x_i), z''_src(x_j), l) ||^2  (source batch)
//   L_Tri  = g_FE * L_FE + g_FC * L_FC + L_MXP
//   total  = task + L_Tri  (or a mode-dependent subset)
//
// Teacher outputs are detached: no gradient reaches teacher weights.

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "smile/autodiff.hpp"
#include "smile/model.hpp"
#include "smile/tensor.hpp"

namespace smile {

struct Batch {
  Tensor inputs;            // [N, C, H, W]
  std::vector<int> labels;  // N
};

struct LossWeights {
  double fe = 0.01;
  double fc = 0.1;
  void validate() const;
};

/// Space in which the source-domain term compares student and teacher.
enum class OutputSpace { kLogits, kProbabilities };

enum class Mode {
  kFineTune,     // FT: task only
  kMixup,        // D-SMILE (fine-tune + mixup): task + L_MXP
  kFeatureMix,   // FT w/ M-FE: task + g_FE L_FE
  kSourceMix,    // FT w/ M-FC: task + g_FC L_FC
  kSmile,        // task + L_Tri
  kSmileNoS,     // SMILE, teacher = latest student
  kSmileNoT,     // SMILE, teacher fixed at the pre-trained model
};

std::string_view mode_name(Mode m);
/// Accepts the names produced by mode_name plus "FT+MXP" for kMixup.
Mode parse_mode(std::string_view name);

bool uses_mixup_term(Mode m);
bool uses_feature_term(Mode m);
bool uses_source_term(Mode m);
inline bool uses_teacher(Mode m) { return uses_feature_term(m) || uses_source_term(m); }

/// Row-wise one-hot encoding; throws std::out_of_range on a bad label.
Tensor one_hot(const std::vector<int>& labels, std::size_t classes);

ad::Var task_loss(ad::Tape& tape, const Network& student, const Batch& batch);

ad::Var mixup_loss(ad::Tape& tape, const Network& student, const Batch& batch, double lambda,
                   const std::vector<std::size_t>& pairing);

ad::Var feature_mixup_loss(ad::Tape& tape, const Network& student, const Network& teacher,
                           const Batch& batch, double lambda,
                           const std::vector<std::size_t>& pairing);

ad::Var source_label_mixup_loss(ad::Tape& tape, const Network& student, const Network& teacher,
                                const Batch& source_batch, double lambda,
                                const std::vector<std::size_t>& pairing,
                                OutputSpace space = OutputSpace::kLogits);

/// One Monte-Carlo draw of the mixing randomness for an iteration.
struct MixDraws {
  double lambda_mxp = 0.5;
  double lambda_fe = 0.5;
  double lambda_fc = 0.5;
  std::vector<std::size_t> target_pairing;
  std::vector<std::size_t> source_pairing;
};

struct TripletTerms {
  ad::Var total;
  ad::Var mxp, fe, fc;
};

ad::Var combine_triplet(ad::Var fe, ad::Var fc, ad::Var mxp, const LossWeights& weights);

TripletTerms triplet_loss(ad::Tape& tape, const Network& student, const Network& teacher,
                          const Batch& target_batch, const Batch& source_batch,
                          const MixDraws& draws, const LossWeights& weights,
                          OutputSpace space = OutputSpace::kLogits);

struct ObjectiveConfig {
  Mode mode = Mode::kSmile;
  LossWeights weights;
  OutputSpace source_space = OutputSpace::kLogits;
};

/// Scalar terms are reported unweighted; inactive terms read 0.
struct ObjectiveTerms {
  ad::Var total;
  double task = 0.0;
  double mxp = 0.0;
  double fe = 0.0;
  double fc = 0.0;
};

/// Builds the mode's objective on `tape`. `teacher` and `source_batch` are
/// only consulted when the mode needs them.
ObjectiveTerms total_objective(ad::Tape& tape, const Network& student, const Network& teacher,
                               const Batch& target_batch, const Batch& source_batch,
                               const MixDraws& draws, const ObjectiveConfig& config);

}  // namespace smile
