#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

#include "dselect/config.hpp"
#include "dselect/error.hpp"
#include "dselect/io.hpp"

namespace dselect {
namespace {

using config::ExperimentConfig;

// Random configuration touching every serialized field.
ExperimentConfig random_config(std::mt19937_64& rng) {
  using model::GateKind;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto pick = [&](auto... options) {
    const std::vector<std::common_type_t<decltype(options)...>> v{options...};
    return v[rng() % v.size()];
  };
  const auto real = [&] { return std::ldexp(u(rng), static_cast<int>(rng() % 20) - 10); };
  ExperimentConfig c;
  c.experiment = pick(config::ExperimentKind::recovery, config::ExperimentKind::group_synth,
                      config::ExperimentKind::custom);
  c.seed = rng();
  c.gate.kind = pick(GateKind::dselect_static, GateKind::dselect_per_example, GateKind::topk, GateKind::softmax,
                     GateKind::gumbel, GateKind::ablation_anneal, GateKind::ablation_entropy);
  c.gate.per_example = rng() % 2;
  c.gate.n_experts = 2 + rng() % 30;
  c.gate.k = 1 + rng() % c.gate.n_experts;
  c.gate.gamma = real();
  c.gate.lambda = real();
  c.gate.xi = real();
  c.gate.temperature = real();
  c.gate.use_bias = rng() % 2;
  c.optimizer.kind = pick(optim::OptimizerKind::sgd, optim::OptimizerKind::adam, optim::OptimizerKind::adagrad);
  c.optimizer.learning_rate = real();
  c.optimizer.epsilon = real();
  c.optimizer.adagrad_initial = real();
  c.batch_size = 1 + rng() % 512;
  c.epochs = 1 + rng() % 300;
  c.patience = rng() % 20;
  c.eval_every = rng() % 100;
  c.max_steps = rng() % 10000;
  c.schedule.target = pick(optim::ScheduleTarget::none, optim::ScheduleTarget::smooth_step_gamma,
                           optim::ScheduleTarget::gumbel_temperature, optim::ScheduleTarget::ablation_temperature);
  c.schedule.start = real();
  c.schedule.end = real();
  c.schedule.steps = rng() % 1000;
  c.schedule.spacing = pick(optim::Spacing::linear, optim::Spacing::log_even);
  c.expert_units.assign(1 + rng() % 3, 0);
  for (auto& w : c.expert_units) w = 1 + rng() % 16;
  c.expert_output = pick(model::ExpertOutput::sum, model::ExpertOutput::vector);
  c.tower_hidden.assign(rng() % 3, 0);
  for (auto& w : c.tower_hidden) w = 1 + rng() % 8;
  c.tower_identity = rng() % 2;
  c.shared_bottom = rng() % 2;
  c.loss = pick(model::LossKind::squared_error, model::LossKind::cross_entropy);
  c.task_weights.assign(rng() % 4, 0.0);
  for (double& w : c.task_weights) w = u(rng);
  c.samples = 2 + rng() % 100000;
  c.features = 1 + rng() % 20;
  c.groups = 1 + rng() % 8;
  c.tasks_per_group = 1 + rng() % 16;
  c.experts_per_group = 1 + rng() % 8;
  c.units_per_expert = 1 + rng() % 8;
  c.correlation = u(rng);
  c.split_train = rng() % 100;
  c.split_val = rng() % 100;
  c.split_test = rng() % 100;
  c.data_file = pick(std::string(), std::string("data/set.csv"));
  c.save_data = rng() % 2;
  c.trajectory_every = 1 + rng() % 100;
  if (rng() % 2) c.sweep["gate.lambda"] = {"0.001", "0.1"};
  if (rng() % 2) c.sweep["optimizer.learning_rate"] = {"0.01"};
  c.sweep_trials = 1 + rng() % 5;
  c.sweep_sample = rng() % 5;
  c.sweep_sample_seed = rng();
  return c;
}

TEST(Config, RoundTripProperty) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 300; ++trial) {
    const ExperimentConfig c = random_config(rng);
    const std::string text = config::serialize(c);
    const ExperimentConfig back = config::parse(text);
    ASSERT_TRUE(back == c) << text;
    ASSERT_EQ(config::serialize(back), text);
  }
}

TEST(Config, SerializesEveryKnownKey) {
  const std::string text = "\n" + config::serialize(ExperimentConfig{});
  for (const std::string& key : config::known_keys()) {
    EXPECT_NE(text.find("\n" + key + " = "), std::string::npos) << key;
  }
}

TEST(Config, CommentsBlankLinesAndDefaults) {
  const ExperimentConfig c = config::parse(
      "# a comment\n\n  gate.kind = topk   # trailing\noptimizer.learning_rate = 0.5\n"
      "model.expert_units = 8 4\nsweep.gate.lambda = 0.01, 0.1\n");
  EXPECT_EQ(c.gate.kind, model::GateKind::topk);
  EXPECT_EQ(c.optimizer.learning_rate, 0.5);
  EXPECT_EQ(c.expert_units, (std::vector<std::size_t>{8, 4}));
  EXPECT_EQ(c.sweep.at("gate.lambda"), (std::vector<std::string>{"0.01", "0.1"}));
  EXPECT_EQ(c.epochs, ExperimentConfig{}.epochs);
}

TEST(Config, Errors) {
  EXPECT_THROW(config::parse("gate.colour = red\n"), ConfigError);
  EXPECT_THROW(config::parse("gate.k = 2\ngate.k = 3\n"), ConfigError);
  EXPECT_THROW(config::parse("gate.k\n"), ConfigError);
  EXPECT_THROW(config::parse("gate.k = -1\n"), ConfigError);
  EXPECT_THROW(config::parse("gate.gamma = fast\n"), ConfigError);
  EXPECT_THROW(config::parse("sweep.gate.nothing = 1, 2\n"), ConfigError);
  EXPECT_THROW(config::parse("sweep.gate.lambda = 0.1, , 0.2\n"), ConfigError);
  EXPECT_THROW(config::parse("sweep.gate.lambda = 0.1, x\n"), ConfigError);
  try {
    config::parse("seed = 1\ngate.k = 2\ngate.k = 3\n");
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Config, Validation) {
  ExperimentConfig c;
  EXPECT_NO_THROW(config::validate(c));
  c.gate.k = 9;
  EXPECT_THROW(config::validate(c), ConfigError);
  c = ExperimentConfig{};
  c.gate.kind = model::GateKind::topk;
  c.schedule.target = optim::ScheduleTarget::smooth_step_gamma;
  c.schedule.start = 1.0;
  c.schedule.end = 0.1;
  EXPECT_THROW(config::validate(c), ConfigError);
  c = ExperimentConfig{};
  c.experiment = config::ExperimentKind::custom;
  EXPECT_THROW(config::validate(c), ConfigError);
}

TEST(Config, GetAndSetValue) {
  ExperimentConfig c;
  config::set_value(c, "gate.lambda", "0.25");
  EXPECT_EQ(c.gate.lambda, 0.25);
  EXPECT_EQ(config::get_value(c, "gate.lambda"), "0.25");
  EXPECT_THROW(config::get_value(c, "nope"), ConfigError);
}

TEST(FormatDouble, ShortestExactText) {
  EXPECT_EQ(io::format_double(0.1), "0.10000000000000001");
  EXPECT_EQ(io::parse_double(io::format_double(0.1)), 0.1);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 2000; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
    ASSERT_EQ(io::parse_double(io::format_double(v)), v);
  }
  EXPECT_THROW(io::parse_double("1.5x"), ConfigError);
  EXPECT_THROW(io::parse_double(""), ConfigError);
}

TEST(Checkpoint, RoundTrip) {
  io::Checkpoint c;
  c.tensors["gate0.z"] = Tensor::matrix(2, 3, {0.1, -1e-300, 3.0, 1.0 / 3.0, 0.0, -7.5});
  c.tensors["tower0.b0"] = Tensor::vector({0.125});
  c.tensors["s"] = Tensor::scalar(2.5);
  c.meta["gamma_now"] = 0.001;
  const std::string text = io::serialize_checkpoint(c);
  EXPECT_EQ(text.substr(0, text.find('\n')), "dselect-checkpoint 1");
  const io::Checkpoint back = io::parse_checkpoint(text);
  EXPECT_EQ(back.tensors, c.tensors);
  EXPECT_EQ(back.meta, c.meta);

  const auto path = std::filesystem::temp_directory_path() / "dselect_checkpoint_test" / "ckpt.txt";
  std::filesystem::create_directories(path.parent_path());
  io::save_checkpoint(path, c);
  EXPECT_EQ(io::load_checkpoint(path).tensors, c.tensors);
  std::filesystem::remove_all(path.parent_path());
}

TEST(Checkpoint, Malformed) {
  EXPECT_THROW(io::parse_checkpoint("not a checkpoint\n"), Error);
  EXPECT_THROW(io::parse_checkpoint("dselect-checkpoint 1\ntensor w 1 3\n1 2\n"), Error);
}

TEST(AtomicWrite, LeavesNoTemporaries) {
  const auto dir = std::filesystem::temp_directory_path() / "dselect_atomic_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir / "a.txt", "first");
  io::write_text_atomic(dir / "a.txt", "second");
  EXPECT_EQ(io::read_text(dir / "a.txt"), "second");
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir)) ++files;
  EXPECT_EQ(files, 1u);
  EXPECT_THROW(io::read_text(dir / "missing.txt"), Error);
  std::filesystem::remove_all(dir);
}

TEST(Text, SplitAndTrim) {
  EXPECT_EQ(io::split("a,b,,c", ','), (std::vector<std::string>{"a", "b", "", "c"}));
  EXPECT_EQ(io::trim("  x y \t"), "x y");
}

}  // namespace
}  // namespace dselect
