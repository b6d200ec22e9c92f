#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <string>

#include "dselect/error.hpp"
#include "dselect/gate.hpp"
#include "dselect/optim.hpp"

namespace dselect::optim {
namespace {

using ParamMap = std::map<std::string, Tensor>;

OptimizerConfig config(OptimizerKind kind, double lr) {
  OptimizerConfig c;
  c.kind = kind;
  c.learning_rate = lr;
  return c;
}

TEST(Optimizer, SgdStep) {
  Optimizer opt(config(OptimizerKind::sgd, 0.1));
  ParamMap p{{"w", Tensor::scalar(1.0)}};
  opt.step(p, {{"w", Tensor::scalar(2.0)}});
  EXPECT_DOUBLE_EQ(p.at("w").item(), 0.8);
  EXPECT_EQ(opt.steps_taken(), 1u);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  for (double g : {-3.0, 1e-3, 250.0}) {
    Optimizer opt(config(OptimizerKind::adam, 0.01));
    ParamMap p{{"w", Tensor::vector({0.5, -0.5})}};
    opt.step(p, {{"w", Tensor::vector({g, -g})}});
    EXPECT_NEAR(p.at("w")[0], 0.5 - 0.01 * (g > 0 ? 1 : -1), 1e-6);
    EXPECT_NEAR(p.at("w")[1], -0.5 + 0.01 * (g > 0 ? 1 : -1), 1e-6);
  }
}

TEST(Optimizer, AdamMatchesHandComputedSecondStep) {
  OptimizerConfig c = config(OptimizerKind::adam, 0.1);
  Optimizer opt(c);
  ParamMap p{{"w", Tensor::scalar(0.0)}};
  opt.step(p, {{"w", Tensor::scalar(1.0)}});
  opt.step(p, {{"w", Tensor::scalar(-2.0)}});
  double m = 0.0, v = 0.0, w = 0.0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? 1.0 : -2.0;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t));
    const double vh = v / (1 - std::pow(c.beta2, t));
    w -= c.learning_rate * mh / (std::sqrt(vh) + c.epsilon);
  }
  EXPECT_NEAR(p.at("w").item(), w, 1e-15);
}

TEST(Optimizer, AdagradZeroGradientLeavesParameter) {
  Optimizer opt(config(OptimizerKind::adagrad, 0.5));
  ParamMap p{{"w", Tensor::vector({1.25, -4.0})}};
  opt.step(p, {{"w", Tensor::vector({0.0, 0.0})}});
  EXPECT_EQ(p.at("w")[0], 1.25);
  EXPECT_EQ(p.at("w")[1], -4.0);
}

TEST(Optimizer, AdagradStep) {
  OptimizerConfig c = config(OptimizerKind::adagrad, 0.5);
  Optimizer opt(c);
  ParamMap p{{"w", Tensor::scalar(1.0)}};
  opt.step(p, {{"w", Tensor::scalar(2.0)}});
  EXPECT_NEAR(p.at("w").item(), 1.0 - 0.5 * 2.0 / std::sqrt(c.adagrad_initial + 4.0), 1e-15);
}

TEST(Optimizer, OnlyParametersWithGradientsMove) {
  Optimizer opt(config(OptimizerKind::adam, 0.1));
  ParamMap p{{"a", Tensor::scalar(1.0)}, {"b", Tensor::scalar(2.0)}};
  opt.step(p, {{"a", Tensor::scalar(1.0)}});
  EXPECT_NE(p.at("a").item(), 1.0);
  EXPECT_EQ(p.at("b").item(), 2.0);
}

TEST(Optimizer, NonFiniteGradientNamesParameterAndMutatesNothing) {
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adagrad}) {
    Optimizer opt(config(kind, 0.1));
    ParamMap p{{"alpha", Tensor::scalar(1.0)}, {"beta", Tensor::scalar(2.0)}};
    const GradientMap g{{"alpha", Tensor::scalar(1.0)},
                        {"beta", Tensor::scalar(std::numeric_limits<double>::quiet_NaN())}};
    try {
      opt.step(p, g);
      FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
      EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos) << e.what();
    }
    EXPECT_EQ(p.at("alpha").item(), 1.0);
    EXPECT_EQ(p.at("beta").item(), 2.0);
    EXPECT_EQ(opt.steps_taken(), 0u);
  }
}

TEST(Optimizer, DeterministicUpdates) {
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adagrad}) {
    Optimizer a(config(kind, 0.05)), b(config(kind, 0.05));
    ParamMap pa{{"w", Tensor::vector({0.3, -1.7, 2.2})}}, pb = pa;
    for (int i = 0; i < 20; ++i) {
      const GradientMap g{{"w", Tensor::vector({std::sin(i), std::cos(i), 0.1 * i})}};
      a.step(pa, g);
      b.step(pb, g);
    }
    EXPECT_TRUE(pa.at("w") == pb.at("w"));
  }
}

TEST(Optimizer, SgdDescendsConvexQuadratic) {
  Optimizer opt(config(OptimizerKind::sgd, 0.05));
  ParamMap p{{"x", Tensor::scalar(3.0)}};
  double last = 9.0;
  for (int i = 0; i < 100; ++i) {
    opt.step(p, {{"x", Tensor::scalar(2.0 * p.at("x").item())}});
    const double loss = p.at("x").item() * p.at("x").item();
    ASSERT_LT(loss, last);
    last = loss;
  }
}

TEST(Optimizer, ConfigValidation) {
  OptimizerConfig c;
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = OptimizerConfig{};
  c.beta1 = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_optimizer_kind("rmsprop"), ConfigError);
  EXPECT_EQ(parse_optimizer_kind(optimizer_name(OptimizerKind::adagrad)), OptimizerKind::adagrad);
}

TEST(Schedule, LogEvenValues) {
  Schedule s;
  s.start = 1.0;
  s.end = 0.01;
  s.steps = 3;
  EXPECT_DOUBLE_EQ(schedule_value(s, 0), 1.0);
  EXPECT_NEAR(schedule_value(s, 1), 0.1, 1e-15);
  EXPECT_DOUBLE_EQ(schedule_value(s, 2), 0.01);
  EXPECT_DOUBLE_EQ(schedule_value(s, 50), 0.01);
}

TEST(Schedule, LinearAndConstant) {
  Schedule s;
  s.start = 2.0;
  s.end = 0.0;
  s.steps = 5;
  s.spacing = Spacing::linear;
  EXPECT_DOUBLE_EQ(schedule_value(s, 2), 1.0);
  EXPECT_DOUBLE_EQ(schedule_value(s, 4), 0.0);
  s.start = s.end = 0.7;
  s.spacing = Spacing::log_even;
  for (std::size_t i : {0u, 3u, 99u}) EXPECT_EQ(schedule_value(s, i), 0.7);
}

TEST(Schedule, Monotone) {
  Schedule s;
  s.start = 5.0;
  s.end = 1e-3;
  s.steps = 1000;
  double last = schedule_value(s, 0);
  for (std::size_t i = 1; i < 1100; ++i) {
    const double v = schedule_value(s, i);
    ASSERT_LE(v, last);
    last = v;
  }
}

TEST(Schedule, Validation) {
  Schedule s;
  s.target = ScheduleTarget::smooth_step_gamma;
  s.steps = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  s.steps = 10;
  s.end = -1.0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(parse_schedule_target("lr"), ConfigError);
  EXPECT_THROW(parse_spacing("cubic"), ConfigError);
}

// Once gamma drops below 2|z| for every entry, S(z) is exactly binary.
TEST(Schedule, GammaAnnealingBinarizesEncodings) {
  Rng rng(3);
  const Tensor z = gate::init_z(4, 4, 1.0, rng);
  double smallest = 1.0;
  for (double v : z.data()) smallest = std::min(smallest, std::abs(v));
  Schedule s;
  s.start = 1.0;
  s.end = 1e-6;
  s.steps = 200;
  bool binary_seen = false;
  for (std::size_t i = 0; i < 200; ++i) {
    const double gamma = schedule_value(s, i);
    bool binary = true;
    for (double v : z.data()) {
      const double e = gate::smooth_step(v, gamma);
      binary = binary && (e == 0.0 || e == 1.0);
    }
    EXPECT_EQ(binary, gamma <= 2.0 * smallest) << "gamma " << gamma;
    binary_seen = binary_seen || binary;
  }
  EXPECT_TRUE(binary_seen);
}

TEST(EarlyStopping, Patience) {
  EarlyStopping es(2);
  EXPECT_FALSE(es.update(1.0));
  EXPECT_FALSE(es.update(0.5));
  EXPECT_FALSE(es.update(0.6));
  EXPECT_EQ(es.evaluations_since_best(), 1u);
  EXPECT_TRUE(es.update(0.5));
  EXPECT_EQ(es.best(), 0.5);
}

TEST(EarlyStopping, ImprovementResets) {
  EarlyStopping es(2, 0.1);
  EXPECT_FALSE(es.update(1.0));
  EXPECT_FALSE(es.update(0.95));  // not below best - min_delta
  EXPECT_FALSE(es.update(0.8));
  EXPECT_EQ(es.evaluations_since_best(), 0u);
  EXPECT_FALSE(es.update(0.85));
  EXPECT_TRUE(es.update(0.79));
}

}  // namespace
}  // namespace dselect::optim
