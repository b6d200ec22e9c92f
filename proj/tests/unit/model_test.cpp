#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dselect/error.hpp"
#include "dselect/gate.hpp"
#include "dselect/model.hpp"
#include "dselect/optim.hpp"
#include "dselect/synth.hpp"
#include "dselect/trainer.hpp"

namespace dselect::model {
namespace {

Tensor random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x(Shape{rows, cols});
  for (double& v : x.data()) v = standard_normal(rng);
  return x;
}

ModelSpec small_spec(GateKind kind, std::size_t tasks = 2) {
  ModelSpec s;
  s.input_dim = 3;
  s.tasks = tasks;
  s.expert.widths = {4};
  s.gate.kind = kind;
  s.gate.n_experts = 4;
  s.gate.k = 2;
  return s;
}

// Predictions of the training graph for a batch.
Tensor graph_predictions(const MoeModel& m, const Tensor& x) {
  Bindings b;
  m.bind_parameters(b);
  b.bind(kInputLeaf, x);
  b.set(kLabelLeaf, Tensor(Shape{x.dim(0), m.spec().tasks}));
  b.set(kGumbelNoiseLeaf, Tensor(Shape{m.spec().tasks, m.spec().gate.n_experts}));
  return evaluate(m.graph().graph, b)[m.graph().predictions.value];
}

TEST(Model, OneHotGateEqualsSingleExpert) {
  ModelSpec s = small_spec(GateKind::dselect_static, 1);
  MoeModel m(s);
  Rng rng(1);
  m.initialize(rng);
  for (std::size_t j = 0; j < 4; ++j) {
    std::vector<double> w(4, 0.0);
    w[j] = 1.0;
    const auto p = gate::construct_from_weights(w, 2, s.gate.gamma);
    m.set_parameter("gate0.alpha", Tensor::vector(p.alpha));
    m.set_parameter("gate0.z", p.z);
    const Predictor pred(m);
    const Tensor x = random_batch(5, 3, 10 + j);
    for (std::size_t r = 0; r < 5; ++r) {
      const std::span<const double> xr(x.data().data() + r * 3, 3);
      const ForwardResult out = moe_forward(m, xr, 0);
      EXPECT_NEAR(out.output, pred.tower(0, pred.expert_output(j, xr)), 1e-12);
      EXPECT_EQ(out.evaluated, std::vector<std::size_t>{j});
    }
  }
}

TEST(Model, HalfHalfMixtureOfTwoExperts) {
  ModelSpec s;
  s.input_dim = 1;
  s.tasks = 1;
  s.expert.widths = {1};
  s.gate.kind = GateKind::softmax;
  s.gate.n_experts = 2;
  s.tower.identity = true;
  MoeModel m(s);
  Rng rng(2);
  m.initialize(rng);
  // relu(0 * x + b): constant outputs 1 and 3.
  m.set_parameter("expert0.w0", Tensor::matrix(1, 1, {0.0}));
  m.set_parameter("expert0.b0", Tensor::vector({1.0}));
  m.set_parameter("expert1.w0", Tensor::matrix(1, 1, {0.0}));
  m.set_parameter("expert1.b0", Tensor::vector({3.0}));
  m.set_parameter("gate0.logits", Tensor::vector({0.0, 0.0}));
  const std::vector<double> x{0.7};
  const ForwardResult out = moe_forward(m, x, 0);
  EXPECT_DOUBLE_EQ(out.output, 2.0);
  EXPECT_EQ(out.evaluated, (std::vector<std::size_t>{0, 1}));
}

TEST(Model, SparseGateSkipsUnselectedExperts) {
  ModelSpec s = small_spec(GateKind::topk, 1);
  s.gate.n_experts = 6;
  MoeModel m(s);
  Rng rng(3);
  m.initialize(rng);
  m.set_parameter("gate0.logits", Tensor::vector({0.0, 5.0, 0.0, 0.0, 4.0, 0.0}));
  const std::vector<double> x{0.1, 0.2, 0.3};
  EXPECT_EQ(moe_forward(m, x, 0).evaluated, (std::vector<std::size_t>{1, 4}));
}

class PredictorMatchesGraph : public ::testing::TestWithParam<GateKind> {};

TEST_P(PredictorMatchesGraph, ForAllGateKinds) {
  ModelSpec s = small_spec(GetParam(), 2);
  s.gate.n_experts = 5;
  s.gate.per_example = true;
  s.expert.widths = {4, 3};
  s.expert.output = ExpertOutput::vector;
  s.tower.hidden = {2};
  MoeModel m(s);
  Rng rng(4);
  m.initialize(rng);
  // Nudge the static gates off their symmetric initial point.
  for (auto& [name, t] : m.parameters()) {
    if (name.starts_with("gate")) {
      for (double& v : t.data()) v += 0.2 * standard_normal(rng);
    }
  }
  const Tensor x = random_batch(7, 3, 5);
  const Tensor graph = graph_predictions(m, x);
  const Predictor pred(m);
  for (std::size_t r = 0; r < 7; ++r) {
    const auto out = pred.predict(std::span<const double>(x.data().data() + r * 3, 3));
    for (std::size_t t = 0; t < 2; ++t) EXPECT_NEAR(out[t], graph.at(r, t), 1e-12);
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, PredictorMatchesGraph,
                         ::testing::Values(GateKind::dselect_static, GateKind::dselect_per_example, GateKind::topk,
                                           GateKind::softmax, GateKind::ablation_anneal,
                                           GateKind::ablation_entropy),
                         [](const auto& info) { return std::string(gate_kind_name(info.param)); });

TEST(Model, SharedBottom) {
  ModelSpec s;
  s.shared_bottom = true;
  s.input_dim = 3;
  s.tasks = 2;
  s.expert.widths = {5};
  MoeModel m(s);
  Rng rng(6);
  m.initialize(rng);
  // bottom 5*3+5, towers 2*(5+1)
  EXPECT_EQ(m.trainable_count(), 20u + 12u);
  const Predictor pred(m);
  const std::vector<double> x{0.5, -0.1, 2.0};
  const auto h = pred.bottom_output(x);
  EXPECT_NEAR(shared_bottom_forward(m, x, 1), pred.tower(1, h), 1e-15);

  m.set_parameter("bottom.w0", Tensor(Shape{5, 3}));
  m.set_parameter("bottom.b0", Tensor(Shape{5}));
  const Predictor zero(m);
  for (double v : zero.bottom_output(x)) EXPECT_EQ(v, 0.0);
  EXPECT_DOUBLE_EQ(shared_bottom_forward(m, x, 0), m.parameter("tower0.b0")[0]);

  const Tensor xs = random_batch(4, 3, 7);
  const Tensor g = graph_predictions(m, xs);
  for (std::size_t r = 0; r < 4; ++r) {
    const auto out = zero.predict(std::span<const double>(xs.data().data() + r * 3, 3));
    EXPECT_NEAR(out[0], g.at(r, 0), 1e-12);
  }
}

TEST(Model, LossComposition) {
  ModelSpec s = small_spec(GateKind::dselect_static, 2);
  s.task_weights = {1.0, 0.0};
  s.gate.lambda = 0.5;
  MoeModel m(s);
  Rng rng(8);
  m.initialize(rng);
  const Tensor x = random_batch(6, 3, 9);
  const Tensor y = random_batch(6, 2, 10);
  Bindings b;
  m.bind_parameters(b);
  b.bind(kInputLeaf, x);
  b.bind(kLabelLeaf, y);
  const TrainingGraph& tg = m.graph();
  NodeValues v = evaluate(tg.graph, b);
  const double task0 = v[tg.task_losses.value][0];
  const double reg = v[tg.regularizer->value].item();
  EXPECT_NEAR(v[tg.loss.value].item(), task0 + reg, 1e-12);
  EXPECT_GT(reg, 0.0);

  // Saturated encodings: the entropy term is exactly zero.
  m.set_parameter("gate0.z", Tensor::matrix(2, 2, {1, -1, -1, 1}));
  m.set_parameter("gate1.z", Tensor::matrix(2, 2, {1, 1, -1, -1}));
  Bindings b2;
  m.bind_parameters(b2);
  b2.bind(kInputLeaf, x);
  b2.bind(kLabelLeaf, y);
  v = evaluate(tg.graph, b2);
  EXPECT_EQ(v[tg.regularizer->value].item(), 0.0);
  EXPECT_DOUBLE_EQ(v[tg.loss.value].item(), v[tg.task_losses.value][0]);
}

TEST(Model, LossMatchesManualSquaredError) {
  ModelSpec s = small_spec(GateKind::softmax, 1);
  MoeModel m(s);
  Rng rng(11);
  m.initialize(rng);
  const Tensor x = random_batch(5, 3, 12);
  const Tensor y = random_batch(5, 1, 13);
  Bindings b;
  m.bind_parameters(b);
  b.bind(kInputLeaf, x);
  b.bind(kLabelLeaf, y);
  const double loss = evaluate(m.graph().graph, b)[m.graph().loss.value].item();
  const Predictor pred(m);
  double want = 0.0;
  for (std::size_t r = 0; r < 5; ++r) {
    const double p = pred.forward(std::span<const double>(x.data().data() + r * 3, 3), 0).output;
    want += (p - y[r]) * (p - y[r]) / 5.0;
  }
  EXPECT_NEAR(loss, want, 1e-12);
}

TEST(Model, PerExampleRegularizerIsBatchMean) {
  ModelSpec s = small_spec(GateKind::dselect_per_example, 1);
  s.gate.lambda = 1.0;
  MoeModel m(s);
  Rng rng(14);
  m.initialize(rng);
  const Tensor x = random_batch(6, 3, 15);
  Bindings b;
  m.bind_parameters(b);
  b.bind(kInputLeaf, x);
  b.set(kLabelLeaf, Tensor(Shape{6, 1}));
  const double reg = evaluate(m.graph().graph, b)[m.graph().regularizer->value].item();
  gate::PerExampleDSelectParams p;
  p.n_experts = 4;
  p.k = 2;
  p.input_dim = 3;
  p.lambda = 1.0;
  p.g = m.parameter("gate0.G");
  p.g_bias = m.parameter("gate0.G_bias").values();
  for (std::size_t i = 0; i < 2; ++i) {
    p.w.push_back(m.parameter("gate0.W" + std::to_string(i)));
    p.w_bias.push_back(m.parameter("gate0.W" + std::to_string(i) + "_bias").values());
  }
  double want = 0.0;
  for (std::size_t r = 0; r < 6; ++r) want += gate::omega_per_example(p, std::span<const double>(x.data().data() + r * 3, 3)) / 6.0;
  EXPECT_NEAR(reg, want, 1e-12);
}

TEST(Model, Errors) {
  ModelSpec s = small_spec(GateKind::topk, 1);
  s.gate.k = 5;
  EXPECT_THROW(MoeModel{s}, ConfigError);
  MoeModel m(small_spec(GateKind::softmax, 1));
  Rng rng(1);
  m.initialize(rng);
  EXPECT_THROW(m.set_parameter("expert0.w0", Tensor(Shape{2, 2})), ShapeError);
  EXPECT_THROW(m.parameter("nope"), Error);
  const std::vector<double> bad{1.0};
  EXPECT_THROW(moe_forward(m, bad, 0), DomainError);
  const std::vector<double> x{1.0, 2.0, 3.0};
  EXPECT_THROW(moe_forward(m, x, 3), DomainError);
  EXPECT_THROW(parse_gate_kind("median"), ConfigError);
}

// --- recovery model -----------------------------------------------------------

synth::RecoveryDataset small_recovery(std::uint64_t seed) {
  synth::RecoveryConfig c;
  c.samples = 400;
  c.seed = seed;
  return synth::gen_recovery_data(c);
}

TEST(RecoveryModel, CopiesAndCounts) {
  const auto data = small_recovery(3);
  GateSpec g;
  g.kind = GateKind::dselect_static;
  Rng rng(4);
  const RecoveryModel rm = build_recovery_model(data.source, g, rng);
  ASSERT_EQ(rm.true_experts.size(), 4u);
  EXPECT_TRUE(std::is_sorted(rm.true_experts.begin(), rm.true_experts.end()));
  EXPECT_EQ(rm.model.gate_parameter_count(), 20u);
  EXPECT_EQ(rm.model.spec().gate.n_experts, 16u);
  EXPECT_EQ(rm.model.spec().gate.k, 4u);
  // Each true expert is a bitwise copy of one generator expert.
  std::size_t matched = 0;
  for (std::size_t pos : rm.true_experts) {
    for (const auto& src : data.source.experts) {
      if (rm.model.parameter("expert" + std::to_string(pos) + ".w0") == src.w &&
          rm.model.parameter("expert" + std::to_string(pos) + ".b0") == src.b) {
        ++matched;
      }
    }
  }
  EXPECT_EQ(matched, 4u);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_FALSE(rm.model.is_trainable("expert" + std::to_string(i) + ".w0"));
}

TEST(RecoveryModel, SamePlacementAcrossGateKinds) {
  const auto data = small_recovery(5);
  GateSpec a, b;
  a.kind = GateKind::dselect_static;
  b.kind = GateKind::topk;
  Rng r1(6), r2(6);
  EXPECT_EQ(build_recovery_model(data.source, a, r1).true_experts, build_recovery_model(data.source, b, r2).true_experts);
}

TEST(RecoveryModel, FrozenExpertsUnchangedByTraining) {
  const auto data = small_recovery(7);
  GateSpec g;
  g.kind = GateKind::dselect_static;
  g.lambda = 0.01;
  Rng rng(8);
  RecoveryModel rm = build_recovery_model(data.source, g, rng);
  std::map<std::string, Tensor> before;
  for (const auto& [name, t] : rm.model.parameters()) {
    if (name.starts_with("expert")) before[name] = t;
  }
  // Gradients never mention frozen tensors.
  Bindings b;
  rm.model.bind_parameters(b);
  const synth::Dataset batch = data.data.slice(0, 32);
  b.bind(kInputLeaf, batch.x);
  b.bind(kLabelLeaf, batch.y);
  for (const auto& [name, grad] : gradient(rm.model.graph().graph, rm.model.graph().loss, b)) {
    EXPECT_FALSE(name.starts_with("expert")) << name;
  }
  const Tensor z0 = rm.model.parameter("gate0.z");
  train::TrainOptions o;
  o.epochs = 3;
  o.batch_size = 32;
  o.patience = 0;
  train::train(rm.model, data.data, o);
  for (const auto& [name, t] : before) EXPECT_TRUE(rm.model.parameter(name) == t) << name;
  EXPECT_FALSE(rm.model.parameter("gate0.z") == z0);
}

}  // namespace
}  // namespace dselect::model
