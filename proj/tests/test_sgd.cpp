#include <gtest/gtest.h>

#include <cmath>

#include "smile/errors.hpp"
#include "smile/sgd.hpp"
#include "test_util.hpp"

namespace smile {
namespace {

double one_step(double param, double grad, const SgdOptions& o) {
  Tensor p({1}, param), g({1}, grad);
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  SgdState state;
  sgd_step(ps, gs, o, state);
  return p[0];
}

TEST(Sgd, PlainStep) {
  EXPECT_DOUBLE_EQ(one_step(1.0, 0.5, {0.1, 0.0, 0.0}), 0.95);
}

TEST(Sgd, DecayOnly) {
  EXPECT_DOUBLE_EQ(one_step(1.0, 0.0, {0.1, 0.0, 0.1}), 0.99);
}

TEST(Sgd, TwoMomentumSteps) {
  Tensor p({1}, 0.0), g({1}, 1.0);
  Tensor* ps[] = {&p};
  const Tensor* gs[] = {&g};
  SgdState state;
  const SgdOptions o{0.1, 0.9, 0.0};
  sgd_step(ps, gs, o, state);
  EXPECT_NEAR(p[0], -0.1, 1e-15);
  sgd_step(ps, gs, o, state);
  EXPECT_NEAR(p[0], -0.29, 1e-15);
}

// Property: matches a scalar re-implementation of the update over random
// sequences, for every coordinate.
TEST(Sgd, MatchesScalarRecurrence) {
  testing::Gen g(21);
  for (int trial = 0; trial < 20; ++trial) {
    const SgdOptions o{testing::uniform(g, 1e-3, 0.5), testing::uniform(g, 0.0, 0.99),
                       testing::uniform(g, 0.0, 0.1)};
    Tensor p = testing::random_tensor(g, {2, 3});
    std::vector<double> ref(p.values().begin(), p.values().end()), vel(6, 0.0);
    SgdState state;
    for (int step = 0; step < 5; ++step) {
      Tensor grad = testing::random_tensor(g, {2, 3});
      for (std::size_t i = 0; i < 6; ++i) {
        vel[i] = o.momentum * vel[i] + (grad[i] + o.weight_decay * ref[i]);
        ref[i] -= o.learning_rate * vel[i];
      }
      Tensor* ps[] = {&p};
      const Tensor* gs[] = {&grad};
      sgd_step(ps, gs, o, state);
    }
    for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(p[i], ref[i]);
  }
}

TEST(Sgd, NullGradientLeavesParameterUntouched) {
  Tensor a({2}, 1.0), b({2}, 1.0), g({2}, 1.0);
  Tensor* ps[] = {&a, &b};
  const Tensor* gs[] = {&g, nullptr};
  SgdState state;
  sgd_step(ps, gs, {0.1, 0.9, 0.1}, state);
  EXPECT_NE(a[0], 1.0);
  EXPECT_EQ(b, Tensor({2}, 1.0));
}

TEST(Sgd, NonFiniteGradientRejectedBeforeAnyUpdate) {
  Tensor a({1}, 1.0), b({1}, 1.0);
  Tensor ga({1}, 0.5), gb({1}, std::numeric_limits<double>::infinity());
  Tensor* ps[] = {&a, &b};
  const Tensor* gs[] = {&ga, &gb};
  SgdState state;
  EXPECT_THROW(sgd_step(ps, gs, {0.1, 0.0, 0.0}, state), NonFiniteError);
  EXPECT_EQ(a[0], 1.0);
}

TEST(Sgd, ShapeMismatchRejected) {
  Tensor a({2}, 1.0), g({3}, 1.0);
  Tensor* ps[] = {&a};
  const Tensor* gs[] = {&g};
  SgdState state;
  EXPECT_THROW(sgd_step(ps, gs, {}, state), ShapeError);
}

TEST(Sgd, RejectsNonPositiveLearningRate) {
  Tensor a({1}, 1.0), g({1}, 1.0);
  Tensor* ps[] = {&a};
  const Tensor* gs[] = {&g};
  SgdState state;
  EXPECT_THROW(sgd_step(ps, gs, {0.0, 0.9, 0.0}, state), std::invalid_argument);
}

}  // namespace
}  // namespace smile
