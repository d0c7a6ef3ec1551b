#pragma once

// Finite-difference cases for every primitive and for the full objective,
// shared by the unit tests and the acceptance binary.

#include <functional>
#include <string>
#include <vector>

#include "smile/grad_check.hpp"
#include "smile/mixup.hpp"
#include "smile/smile_loss.hpp"
#include "test_util.hpp"

namespace smile::testing {

struct GradCase {
  ScalarGraph graph;
  std::vector<Tensor> point;
};

struct PrimitiveCase {
  std::string name;
  std::function<GradCase(Gen&)> make;
};

// Reduces any output to a scalar through a fixed random contraction so every
// output coordinate influences the checked value.
inline ad::Var contract(ad::Var out, const Tensor& weights) {
  return ad::mean(ad::mul(out, out.tape()->constant(weights)));
}

inline std::vector<PrimitiveCase> primitive_cases() {
  using ad::Var;
  std::vector<PrimitiveCase> cases;
  auto binary = [&](std::string name, Var (*op)(Var, Var)) {
    cases.push_back({name, [op](Gen& g) {
                       const Shape s{3, 4};
                       Tensor r = random_tensor(g, s);
                       return GradCase{[op, r](ad::Tape&, std::span<const Var> p) {
                                         return contract(op(p[0], p[1]), r);
                                       },
                                       {random_tensor(g, s), random_tensor(g, s)}};
                     }});
  };
  binary("add", ad::add);
  binary("sub", ad::sub);
  binary("mul", ad::mul);

  cases.push_back({"scale", [](Gen& g) {
                     const double f = uniform(g, -3.0, 3.0);
                     Tensor r = random_tensor(g, {2, 5});
                     return GradCase{[f, r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::scale(p[0], f), r);
                                     },
                                     {random_tensor(g, {2, 5})}};
                   }});
  cases.push_back({"matmul", [](Gen& g) {
                     Tensor r = random_tensor(g, {3, 2});
                     return GradCase{[r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::matmul(p[0], p[1]), r);
                                     },
                                     {random_tensor(g, {3, 4}), random_tensor(g, {4, 2})}};
                   }});
  cases.push_back({"add_bias", [](Gen& g) {
                     Tensor r = random_tensor(g, {3, 4});
                     return GradCase{[r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::add_bias(p[0], p[1]), r);
                                     },
                                     {random_tensor(g, {3, 4}), random_tensor(g, {4})}};
                   }});
  cases.push_back({"conv2d", [](Gen& g) {
                     Tensor r = random_tensor(g, {2, 3, 4, 5});
                     return GradCase{[r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::conv2d(p[0], p[1], p[2]), r);
                                     },
                                     {random_tensor(g, {2, 2, 4, 5}), random_tensor(g, {3, 2, 3, 3}),
                                      random_tensor(g, {3})}};
                   }});
  cases.push_back({"relu", [](Gen& g) {
                     Tensor r = random_tensor(g, {4, 3});
                     return GradCase{[r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::relu(p[0]), r);
                                     },
                                     {kink_free_tensor(g, {4, 3})}};
                   }});
  cases.push_back({"global_avg_pool", [](Gen& g) {
                     Tensor r = random_tensor(g, {2, 3});
                     return GradCase{[r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::global_avg_pool(p[0]), r);
                                     },
                                     {random_tensor(g, {2, 3, 3, 4})}};
                   }});
  cases.push_back({"mean", [](Gen& g) {
                     return GradCase{[](ad::Tape&, std::span<const Var> p) { return ad::mean(p[0]); },
                                     {random_tensor(g, {3, 5})}};
                   }});
  cases.push_back({"sum_squares", [](Gen& g) {
                     return GradCase{
                         [](ad::Tape&, std::span<const Var> p) { return ad::sum_squares(p[0]); },
                         {random_tensor(g, {3, 5})}};
                   }});
  cases.push_back({"softmax", [](Gen& g) {
                     Tensor r = random_tensor(g, {3, 4});
                     return GradCase{[r](ad::Tape&, std::span<const Var> p) {
                                       return contract(ad::softmax(p[0]), r);
                                     },
                                     {random_tensor(g, {3, 4}, -3.0, 3.0)}};
                   }});
  cases.push_back({"softmax_cross_entropy", [](Gen& g) {
                     Tensor target = random_distribution(g, 3, 4);
                     return GradCase{[target](ad::Tape& t, std::span<const Var> p) {
                                       return ad::softmax_cross_entropy(p[0], t.constant(target));
                                     },
                                     {random_tensor(g, {3, 4}, -3.0, 3.0)}};
                   }});
  return cases;
}

/// Two-parameter network: feature f = relu(a * x - 0.5) for a scalar
/// weight a; both heads are logits = f * b * basis with a fixed basis, so the
/// whole objective depends on just (a, b). Inputs are [N,1,1,1].
inline Network scalar_network(ad::Var a, ad::Var b, std::size_t src_classes,
                              std::size_t tgt_classes) {
  ad::Tape& tape = *a.tape();
  auto head = [&tape, b](std::size_t classes, double tilt) {
    Tensor basis({1, classes});
    for (std::size_t c = 0; c < classes; ++c) basis[c] = tilt * (static_cast<double>(c) - 0.7);
    return [&tape, b, basis](ad::Var f) {
      return ad::matmul(f, ad::matmul(b, tape.constant(basis)));
    };
  };
  Network n;
  n.features = [a, &tape](ad::Var x) {
    const std::size_t N = x.shape().at(0);
    ad::Var flat = tape.constant(x.value().reshaped({N, 1}));
    return ad::relu(ad::add_bias(ad::matmul(flat, a), tape.constant(Tensor({1}, -0.5))));
  };
  n.target_head = head(tgt_classes, 1.0);
  n.source_head = head(src_classes, -0.8);
  return n;
}

/// Full SMILE objective on the two-parameter network. Parameters are
/// a [1,1] and b [1,1]; the teacher uses fixed (a_t, b_t).
inline GradCase smile_objective_case(Gen& g, OutputSpace space = OutputSpace::kLogits) {
  const std::size_t n = 4;
  Batch tgt{random_tensor(g, {n, 1, 1, 1}, 0.2, 1.0), random_labels(g, n, 3)};
  Batch src{random_tensor(g, {n, 1, 1, 1}, 0.2, 1.0), random_labels(g, n, 4)};
  MixDraws d;
  d.lambda_mxp = uniform(g, 0.1, 0.9);
  d.lambda_fe = d.lambda_mxp;
  d.lambda_fc = d.lambda_mxp;
  d.target_pairing = random_permutation(g, n);
  d.source_pairing = random_permutation(g, n);
  const double at = uniform(g, 0.5, 1.5), bt = uniform(g, 0.5, 1.5);
  ObjectiveConfig cfg{Mode::kSmile, {0.01, 0.1}, space};
  auto graph = [=](ad::Tape& tape, std::span<const ad::Var> p) {
    Network student = scalar_network(p[0], p[1], 4, 3);
    Network teacher = scalar_network(tape.constant(Tensor({1, 1}, at)),
                                     tape.constant(Tensor({1, 1}, bt)), 4, 3);
    return total_objective(tape, student, teacher, tgt, src, d, cfg).total;
  };
  return {graph, {Tensor({1, 1}, uniform(g, 0.5, 1.5)), Tensor({1, 1}, uniform(g, 0.5, 1.5))}};
}

}  // namespace smile::testing
