#include "smile/smile_loss.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "smile/errors.hpp"
#include "smile/mixup.hpp"

namespace smile {

void LossWeights::validate() const {
  if (!(fe >= 0.0) || !std::isfinite(fe)) throw ConfigError("train.gamma_fe", "must be >= 0");
  if (!(fc >= 0.0) || !std::isfinite(fc)) throw ConfigError("train.gamma_fc", "must be >= 0");
}

std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kFineTune: return "FT";
    case Mode::kMixup: return "D-SMILE";
    case Mode::kFeatureMix: return "M-FE";
    case Mode::kSourceMix: return "M-FC";
    case Mode::kSmile: return "SMILE";
    case Mode::kSmileNoS: return "SMILE-noS";
    case Mode::kSmileNoT: return "SMILE-noT";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  for (Mode m : {Mode::kFineTune, Mode::kMixup, Mode::kFeatureMix, Mode::kSourceMix,
                 Mode::kSmile, Mode::kSmileNoS, Mode::kSmileNoT}) {
    if (name == mode_name(m)) return m;
  }
  if (name == "FT+MXP") return Mode::kMixup;
  throw std::invalid_argument("unknown mode '" + std::string(name) + "'");
}

bool uses_mixup_term(Mode m) {
  return m == Mode::kMixup || m == Mode::kSmile || m == Mode::kSmileNoS || m == Mode::kSmileNoT;
}
bool uses_feature_term(Mode m) {
  return m == Mode::kFeatureMix || m == Mode::kSmile || m == Mode::kSmileNoS ||
         m == Mode::kSmileNoT;
}
bool uses_source_term(Mode m) {
  return m == Mode::kSourceMix || m == Mode::kSmile || m == Mode::kSmileNoS ||
         m == Mode::kSmileNoT;
}

Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  Tensor t({labels.size(), classes}, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " outside [0, " +
                              std::to_string(classes) + ")");
    }
    t[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return t;
}

namespace {

void check_batch(const Batch& b) {
  if (b.inputs.rank() < 1 || b.inputs.dim(0) != b.labels.size()) {
    throw ShapeError("batch: " + std::to_string(b.labels.size()) + " labels for inputs " +
                     to_string(b.inputs.shape()));
  }
  if (b.labels.empty()) throw ShapeError("batch: empty");
}

void check_pairing(const std::vector<std::size_t>& pairing, std::size_t n) {
  if (pairing.size() != n) throw ShapeError("pairing size does not match batch");
  for (std::size_t j : pairing) {
    if (j >= n) throw ShapeError("pairing index out of range");
  }
}

std::vector<int> permuted(const std::vector<int>& labels, const std::vector<std::size_t>& p) {
  std::vector<int> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = labels[p[i]];
  return out;
}

ad::Var mixed_inputs(ad::Tape& tape, const Batch& b, double lambda,
                     const std::vector<std::size_t>& pairing) {
  return tape.constant(mix(b.inputs, gather_rows(b.inputs, pairing), lambda));
}

// Mixup cross-entropy given the student's features on the mixed inputs.
ad::Var mixup_from_features(const Network& student, ad::Var mixed_features, const Batch& b,
                            double lambda, const std::vector<std::size_t>& pairing) {
  ad::Var logits = student.target_head(mixed_features);
  ad::Tape& tape = *logits.tape();
  const std::size_t classes = logits.shape().at(1);
  ad::Var ce_i = ad::softmax_cross_entropy(logits, tape.constant(one_hot(b.labels, classes)));
  ad::Var ce_j = ad::softmax_cross_entropy(
      logits, tape.constant(one_hot(permuted(b.labels, pairing), classes)));
  return ad::add(ad::scale(ce_i, 1.0 - lambda), ad::scale(ce_j, lambda));
}

// Mean squared distance between student outputs and mixed (detached) teacher
// outputs, averaged over the batch.
ad::Var distill_to_mix(ad::Var student_out, ad::Var teacher_out, double lambda,
                       const std::vector<std::size_t>& pairing) {
  ad::Tape& tape = *student_out.tape();
  const Tensor& t = teacher_out.value();
  if (student_out.shape() != t.shape()) {
    throw ShapeError("student/teacher output shape mismatch " + to_string(student_out.shape()) +
                     " vs " + to_string(t.shape()));
  }
  ad::Var target = tape.constant(mix(t, gather_rows(t, pairing), lambda));
  const double n = static_cast<double>(student_out.shape().at(0));
  return ad::scale(ad::sum_squares(ad::sub(student_out, target)), 1.0 / n);
}

ad::Var source_mix_term(ad::Tape& tape, const Network& student, const Network& teacher,
                        const Batch& b, double lambda, const std::vector<std::size_t>& pairing,
                        OutputSpace space) {
  ad::Var student_out = student.source_head(student.features(mixed_inputs(tape, b, lambda, pairing)));
  ad::Var teacher_out = teacher.source_head(teacher.features(tape.constant(b.inputs)));
  if (space == OutputSpace::kProbabilities) {
    student_out = ad::softmax(student_out);
    teacher_out = ad::softmax(teacher_out);
  }
  return distill_to_mix(student_out, ad::detach(teacher_out), lambda, pairing);
}

}  // namespace

ad::Var task_loss(ad::Tape& tape, const Network& student, const Batch& batch) {
  check_batch(batch);
  ad::Var logits = student.target_head(student.features(tape.constant(batch.inputs)));
  return ad::softmax_cross_entropy(logits,
                                   tape.constant(one_hot(batch.labels, logits.shape().at(1))));
}

ad::Var mixup_loss(ad::Tape& tape, const Network& student, const Batch& batch, double lambda,
                   const std::vector<std::size_t>& pairing) {
  check_batch(batch);
  check_pairing(pairing, batch.labels.size());
  ad::Var f = student.features(mixed_inputs(tape, batch, lambda, pairing));
  return mixup_from_features(student, f, batch, lambda, pairing);
}

ad::Var feature_mixup_loss(ad::Tape& tape, const Network& student, const Network& teacher,
                           const Batch& batch, double lambda,
                           const std::vector<std::size_t>& pairing) {
  check_batch(batch);
  check_pairing(pairing, batch.labels.size());
  ad::Var f = student.features(mixed_inputs(tape, batch, lambda, pairing));
  ad::Var t = ad::detach(teacher.features(tape.constant(batch.inputs)));
  return distill_to_mix(f, t, lambda, pairing);
}

ad::Var source_label_mixup_loss(ad::Tape& tape, const Network& student, const Network& teacher,
                                const Batch& source_batch, double lambda,
                                const std::vector<std::size_t>& pairing, OutputSpace space) {
  check_batch(source_batch);
  check_pairing(pairing, source_batch.labels.size());
  return source_mix_term(tape, student, teacher, source_batch, lambda, pairing, space);
}

ad::Var combine_triplet(ad::Var fe, ad::Var fc, ad::Var mxp, const LossWeights& weights) {
  return ad::add(ad::add(ad::scale(fe, weights.fe), ad::scale(fc, weights.fc)), mxp);
}

TripletTerms triplet_loss(ad::Tape& tape, const Network& student, const Network& teacher,
                          const Batch& target_batch, const Batch& source_batch,
                          const MixDraws& draws, const LossWeights& weights,
                          OutputSpace space) {
  weights.validate();
  TripletTerms t;
  t.mxp = mixup_loss(tape, student, target_batch, draws.lambda_mxp, draws.target_pairing);
  t.fe = feature_mixup_loss(tape, student, teacher, target_batch, draws.lambda_fe,
                            draws.target_pairing);
  t.fc = source_label_mixup_loss(tape, student, teacher, source_batch, draws.lambda_fc,
                                 draws.source_pairing, space);
  t.total = combine_triplet(t.fe, t.fc, t.mxp, weights);
  return t;
}

ObjectiveTerms total_objective(ad::Tape& tape, const Network& student, const Network& teacher,
                               const Batch& target_batch, const Batch& source_batch,
                               const MixDraws& draws, const ObjectiveConfig& config) {
  config.weights.validate();
  check_batch(target_batch);
  const Mode mode = config.mode;
  const bool want_mxp = uses_mixup_term(mode);
  const bool want_fe = uses_feature_term(mode);
  const bool want_fc = uses_source_term(mode);
  if (want_mxp || want_fe) check_pairing(draws.target_pairing, target_batch.labels.size());

  ObjectiveTerms out;
  ad::Var task = task_loss(tape, student, target_batch);
  out.task = task.value().item();

  // L_MXP and L_FE read the student's features on the same mixed batch when
  // they share lambda; compute that forward once.
  ad::Var mixed_features;
  auto features_at = [&](double lambda) {
    if (mixed_features.valid() && lambda == draws.lambda_mxp && want_mxp) return mixed_features;
    return student.features(mixed_inputs(tape, target_batch, lambda, draws.target_pairing));
  };

  ad::Var mxp, fe, fc;
  if (want_mxp) {
    mixed_features = features_at(draws.lambda_mxp);
    mxp = mixup_from_features(student, mixed_features, target_batch, draws.lambda_mxp,
                              draws.target_pairing);
    out.mxp = mxp.value().item();
  }
  if (want_fe) {
    ad::Var f = features_at(draws.lambda_fe);
    ad::Var t = ad::detach(teacher.features(tape.constant(target_batch.inputs)));
    fe = distill_to_mix(f, t, draws.lambda_fe, draws.target_pairing);
    out.fe = fe.value().item();
  }
  if (want_fc) {
    check_batch(source_batch);
    check_pairing(draws.source_pairing, source_batch.labels.size());
    fc = source_mix_term(tape, student, teacher, source_batch, draws.lambda_fc,
                         draws.source_pairing, config.source_space);
    out.fc = fc.value().item();
  }

  switch (mode) {
    case Mode::kFineTune:
      out.total = task;
      break;
    case Mode::kMixup:
      out.total = ad::add(task, mxp);
      break;
    case Mode::kFeatureMix:
      out.total = ad::add(task, ad::scale(fe, config.weights.fe));
      break;
    case Mode::kSourceMix:
      out.total = ad::add(task, ad::scale(fc, config.weights.fc));
      break;
    case Mode::kSmile:
    case Mode::kSmileNoS:
    case Mode::kSmileNoT:
      out.total = ad::add(task, combine_triplet(fe, fc, mxp, config.weights));
      break;
  }
  return out;
}

}  // namespace smile
