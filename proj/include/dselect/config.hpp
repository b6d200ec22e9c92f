#pragma once

// Experiment configuration. The text form is one `key = value` per line with
// `#` comments and dotted keys; lists are whitespace separated. Lines of the
// form `sweep.<key> = v1, v2, ...` declare a grid over <key> for `sweep`.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dselect/model.hpp"
#include "dselect/optim.hpp"

namespace dselect::config {

enum class ExperimentKind { recovery, group_synth, custom };

const char* experiment_name(ExperimentKind kind);
ExperimentKind parse_experiment_kind(std::string_view name);

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::group_synth;
  std::uint64_t seed = 1;
  std::string out = "runs/default";

  model::GateSpec gate;

  optim::OptimizerConfig optimizer;
  std::size_t batch_size = 128;
  std::size_t epochs = 50;
  std::size_t patience = 10;    // evaluations without improvement; 0 disables early stopping
  std::size_t eval_every = 0;   // steps between validation evaluations; 0 = once per epoch
  std::size_t max_steps = 0;    // 0 = no cap

  optim::Schedule schedule;     // steps = 0 spans the whole run

  std::vector<std::size_t> expert_units{4};
  model::ExpertOutput expert_output = model::ExpertOutput::sum;
  std::vector<std::size_t> tower_hidden;
  bool tower_identity = true;
  bool shared_bottom = false;
  model::LossKind loss = model::LossKind::squared_error;
  std::vector<double> task_weights;

  std::size_t samples = 14000;
  std::size_t features = 10;
  std::size_t groups = 2;
  std::size_t tasks_per_group = 8;
  std::size_t experts_per_group = 4;
  std::size_t units_per_expert = 4;
  double correlation = 0.8;
  std::size_t split_train = 0;  // all three zero: proportional defaults
  std::size_t split_val = 0;
  std::size_t split_test = 0;
  std::string data_file;        // custom experiments
  bool save_data = false;

  std::size_t trajectory_every = 50;
  std::string checkpoint;       // input checkpoint for `metrics`

  std::map<std::string, std::vector<std::string>> sweep;
  std::size_t sweep_trials = 1;
  std::size_t sweep_sample = 0;  // 0 = every grid point
  std::uint64_t sweep_sample_seed = 7;

  bool operator==(const ExperimentConfig&) const = default;
};

// Known keys in serialization order.
const std::vector<std::string>& known_keys();

ExperimentConfig parse(const std::string& text);
std::string serialize(const ExperimentConfig& config);
ExperimentConfig load(const std::string& path);

// Sets one key from its text value; ConfigError for unknown keys or values.
void set_value(ExperimentConfig& config, const std::string& key, const std::string& value);
std::string get_value(const ExperimentConfig& config, const std::string& key);

// Range checks on the assembled configuration.
void validate(const ExperimentConfig& config);

}  // namespace dselect::config
