#include <gtest/gtest.h>

#include <cmath>

#include "gradient_suite.hpp"
#include "smile/errors.hpp"

namespace smile {
namespace {

using testing::Gen;

// Direct loop implementation of "same" zero-padded stride-1 convolution.
Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = w.dim(0), k = w.dim(2);
  const long pad = static_cast<long>(k / 2);
  Tensor out({N, O, H, W});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          double s = b[o];
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < k; ++a)
              for (std::size_t d = 0; d < k; ++d) {
                const long y = static_cast<long>(i + a) - pad;
                const long z = static_cast<long>(j + d) - pad;
                if (y < 0 || z < 0 || y >= static_cast<long>(H) || z >= static_cast<long>(W)) continue;
                s += x[((n * C + c) * H + y) * W + z] * w[((o * C + c) * k + a) * k + d];
              }
          out[((n * O + o) * H + i) * W + j] = s;
        }
  return out;
}

TEST(Forward, ReluDefinition) {
  ad::Tape t;
  auto y = ad::relu(t.constant(Tensor({3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(y.value(), Tensor({3}, {0.0, 0.0, 2.0}));
}

TEST(Forward, MatmulIdentity) {
  ad::Tape t;
  Tensor m({2, 2}, {3, 4, 5, 6});
  auto y = ad::matmul(t.constant(Tensor({2, 2}, {1, 0, 0, 1})), t.constant(m));
  EXPECT_EQ(y.value(), m);
}

TEST(Forward, ConvIdentityKernelPassesInputAndGradient) {
  ad::Tape t;
  Gen g(4);
  Tensor x = testing::random_tensor(g, {1, 1, 3, 3});
  auto xv = t.parameter(x);
  auto y = ad::conv2d(xv, t.constant(Tensor({1, 1, 1, 1}, 1.0)), t.constant(Tensor({1}, 0.0)));
  EXPECT_EQ(y.value(), x);
  t.backward(ad::sum_squares(ad::sub(y, t.constant(Tensor({1, 1, 3, 3}, 0.0)))));
  // d/dx sum(y^2) = 2y: identity conv hands the upstream gradient straight through.
  for (std::size_t i = 0; i < 9; ++i) EXPECT_DOUBLE_EQ((*t.grad(xv))[i], 2.0 * x[i]);
}

TEST(Forward, ConvMatchesLoopOracle) {
  Gen g(5);
  for (int trial = 0; trial < 5; ++trial) {
    ad::Tape t;
    Tensor x = testing::random_tensor(g, {2, 3, 5, 4});
    Tensor w = testing::random_tensor(g, {4, 3, 3, 3});
    Tensor b = testing::random_tensor(g, {4});
    auto y = ad::conv2d(t.constant(x), t.constant(w), t.constant(b));
    EXPECT_LT(testing::max_abs_diff(y.value(), naive_conv(x, w, b)), 1e-12);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  ad::Tape t;
  Tensor target({1, 4}, {0, 0, 1, 0});
  auto l = ad::softmax_cross_entropy(t.constant(Tensor({1, 4}, 0.7)), t.constant(target));
  EXPECT_NEAR(l.value().item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, SaturatedCaseIsStable) {
  ad::Tape t;
  auto l = ad::softmax_cross_entropy(t.constant(Tensor({1, 2}, {30.0, -30.0})),
                                     t.constant(Tensor({1, 2}, {1.0, 0.0})));
  EXPECT_NEAR(l.value().item(), 0.0, 1e-20);
  auto far = ad::softmax_cross_entropy(t.constant(Tensor({1, 2}, {800.0, -800.0})),
                                       t.constant(Tensor({1, 2}, {0.0, 1.0})));
  EXPECT_NEAR(far.value().item(), 1600.0, 1e-9);
}

TEST(CrossEntropy, LinearInTarget) {
  Gen g(6);
  for (int trial = 0; trial < 50; ++trial) {
    ad::Tape t;
    auto logits = t.constant(testing::random_tensor(g, {3, 5}, -4.0, 4.0));
    Tensor p = testing::random_distribution(g, 3, 5);
    Tensor q = testing::random_distribution(g, 3, 5);
    const double a = testing::uniform(g, 0.0, 1.0);
    Tensor mixed({3, 5});
    for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] = a * p[i] + (1.0 - a) * q[i];
    const double lhs = ad::softmax_cross_entropy(logits, t.constant(mixed)).value().item();
    const double rhs = a * ad::softmax_cross_entropy(logits, t.constant(p)).value().item() +
                       (1.0 - a) * ad::softmax_cross_entropy(logits, t.constant(q)).value().item();
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(CrossEntropy, RejectsNonDistributionTarget) {
  ad::Tape t;
  auto logits = t.constant(Tensor({1, 2}, 0.0));
  EXPECT_THROW(ad::softmax_cross_entropy(logits, t.constant(Tensor({1, 2}, {0.5, 0.6}))),
               std::invalid_argument);
  EXPECT_THROW(ad::softmax_cross_entropy(logits, t.constant(Tensor({1, 2}, {1.5, -0.5}))),
               std::invalid_argument);
  EXPECT_THROW(ad::softmax_cross_entropy(logits, t.constant(Tensor({1, 3}, {1, 0, 0}))),
               ShapeError);
}

TEST(Backward, SquareAtThree) {
  ad::Tape t;
  auto x = t.parameter(Tensor({1}, 3.0));
  t.backward(ad::sum_squares(x));
  EXPECT_DOUBLE_EQ((*t.grad(x))[0], 6.0);
}

TEST(Backward, MeanOfRelu) {
  ad::Tape t;
  auto x = t.parameter(Tensor({2}, {-1.0, 2.0}));
  t.backward(ad::mean(ad::relu(x)));
  EXPECT_EQ(*t.grad(x), Tensor({2}, {0.0, 0.5}));
}

TEST(Backward, RootMustBeScalar) {
  ad::Tape t;
  auto x = t.parameter(Tensor({2}, 1.0));
  EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Backward, EveryReachableLeafGetsGradOfItsShape) {
  ad::Tape t;
  Gen g(7);
  auto a = t.parameter(testing::random_tensor(g, {2, 3}));
  auto b = t.parameter(testing::random_tensor(g, {3, 4}));
  auto unused = t.parameter(testing::random_tensor(g, {5}));
  auto c = t.constant(testing::random_tensor(g, {4}));
  t.backward(ad::mean(ad::add_bias(ad::matmul(a, b), c)));
  ASSERT_NE(t.grad(a), nullptr);
  ASSERT_NE(t.grad(b), nullptr);
  EXPECT_EQ(t.grad(a)->shape(), a.shape());
  EXPECT_EQ(t.grad(b)->shape(), b.shape());
  EXPECT_EQ(t.grad(unused), nullptr);
  EXPECT_EQ(t.grad(c), nullptr);
}

TEST(Backward, DetachBlocksGradient) {
  ad::Tape t;
  auto x = t.parameter(Tensor({2}, {1.0, 2.0}));
  auto y = ad::add(x, ad::detach(ad::scale(x, 3.0)));
  t.backward(ad::sum_squares(y));
  // y = x + const(3x) = 4x numerically, but only the direct path carries gradient: 2*y*1.
  EXPECT_EQ(*t.grad(x), Tensor({2}, {8.0, 16.0}));
}

TEST(Backward, RepeatedPassesAreBitIdentical) {
  Gen g(8);
  Tensor x = testing::random_tensor(g, {2, 2, 4, 4});
  Tensor w = testing::random_tensor(g, {3, 2, 3, 3});
  auto run = [&] {
    ad::Tape t;
    auto xv = t.parameter(x);
    auto wv = t.parameter(w);
    auto y = ad::global_avg_pool(ad::relu(ad::conv2d(xv, wv, t.constant(Tensor({3}, 0.1)))));
    t.backward(ad::sum_squares(y));
    return std::pair{*t.grad(xv), *t.grad(wv)};
  };
  auto [gx1, gw1] = run();
  auto [gx2, gw2] = run();
  EXPECT_EQ(gx1, gx2);
  EXPECT_EQ(gw1, gw2);
}

TEST(Tape, InputsPrecedeConsumers) {
  ad::Tape t;
  Gen g(9);
  auto a = t.parameter(testing::random_tensor(g, {2, 2}));
  auto b = ad::relu(ad::matmul(a, a));
  auto c = ad::mean(ad::mul(b, a));
  for (ad::Var v : {b, c}) {
    for (std::size_t in : t.inputs(v)) EXPECT_LT(in, v.id());
  }
}

TEST(Tape, NonFiniteOutputThrows) {
  ad::Tape t;
  auto big = t.constant(Tensor({1, 1}, 1e200));
  EXPECT_THROW(ad::mul(big, big), NonFiniteError);
  EXPECT_THROW(t.constant(Tensor({1}, std::nan(""))), NonFiniteError);
}

TEST(Tape, ShapeMismatchThrows) {
  ad::Tape t;
  auto a = t.constant(Tensor({2, 3}));
  auto b = t.constant(Tensor({2, 2}));
  EXPECT_THROW(ad::add(a, b), ShapeError);
  EXPECT_THROW(ad::matmul(a, a), ShapeError);
  EXPECT_THROW(ad::add_bias(a, t.constant(Tensor({2}))), ShapeError);
}

TEST(Tape, MixingTapesThrows) {
  ad::Tape t1, t2;
  EXPECT_THROW(ad::add(t1.constant(Tensor({1})), t2.constant(Tensor({1}))), std::logic_error);
}

TEST(ApplyPrimitive, DispatchMatchesNamedOps) {
  ad::Tape t;
  Gen g(10);
  auto a = t.constant(testing::random_tensor(g, {2, 3}));
  auto b = t.constant(testing::random_tensor(g, {2, 3}));
  std::vector<ad::Var> ab{a, b};
  EXPECT_EQ(ad::apply_primitive(ad::Op::kAdd, ab).value(), ad::add(a, b).value());
  EXPECT_EQ(ad::apply_primitive(ad::Op::kMul, ab).value(), ad::mul(a, b).value());
  std::vector<ad::Var> one{a};
  EXPECT_EQ(ad::apply_primitive(ad::Op::kScale, one, -2.5).value(), ad::scale(a, -2.5).value());
  EXPECT_EQ(ad::apply_primitive(ad::Op::kSoftmax, one).value(), ad::softmax(a).value());
}

// Finite differences over every primitive, 10 random points each.
TEST(GradCheck, EveryPrimitiveAtTenPoints) {
  for (const auto& c : testing::primitive_cases()) {
    Gen g(std::hash<std::string>{}(c.name));
    for (int point = 0; point < 10; ++point) {
      testing::GradCase gc = c.make(g);
      GradCheckReport r = grad_check(gc.graph, gc.point);
      EXPECT_TRUE(r.passed) << c.name << " point " << point << " max rel " << r.max_rel_error;
      EXPECT_LE(r.max_rel_error, 1e-4) << c.name;
    }
  }
}

TEST(GradCheck, SquareAtThree) {
  std::vector<Tensor> p{Tensor({1}, 3.0)};
  auto r = grad_check([](ad::Tape&, std::span<const ad::Var> v) { return ad::sum_squares(v[0]); },
                      p);
  ASSERT_EQ(r.entries.size(), 1u);
  EXPECT_NEAR(r.entries[0].analytic, 6.0, 1e-12);
  EXPECT_NEAR(r.entries[0].numeric, 6.0, 1e-6);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, CorruptedBackwardRuleFails) {
  // x^2 recorded with a backward rule that is off by a factor of 1.5.
  auto bad_square = [](ad::Var x) {
    Tensor out = x.value();
    for (double& v : out.values()) v *= v;
    std::vector<ad::Var> in{x};
    return x.tape()->record(
        ad::Op::kCustom, in, out,
        [](const Tensor& g, const Tensor&, std::span<const Tensor* const> inputs,
           std::span<Tensor* const> grads) {
          if (!grads[0]) return;
          for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += 3.0 * (*inputs[0])[i] * g[i];
        });
  };
  std::vector<Tensor> p{Tensor({3}, {0.5, -1.0, 2.0})};
  auto r = grad_check(
      [&](ad::Tape&, std::span<const ad::Var> v) { return ad::mean(bad_square(v[0])); }, p);
  EXPECT_FALSE(r.passed);
  EXPECT_GT(r.max_rel_error, 0.1);
}

TEST(GradCheck, FullSmileObjectiveOnTwoParameterNet) {
  Gen g(11);
  for (OutputSpace space : {OutputSpace::kLogits, OutputSpace::kProbabilities}) {
    for (int point = 0; point < 10; ++point) {
      testing::GradCase gc = testing::smile_objective_case(g, space);
      GradCheckReport r = grad_check(gc.graph, gc.point);
      EXPECT_TRUE(r.passed) << "point " << point << " max rel " << r.max_rel_error;
    }
  }
}

}  // namespace
}  // namespace smile
