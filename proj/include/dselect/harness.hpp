#pragma once

// Experiment runners behind the command-line tool: single training runs,
// grid sweeps with the regularization validity filter, the frozen-expert
// recovery study and the grouped-task study.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dselect/config.hpp"
#include "dselect/error.hpp"
#include "dselect/metrics.hpp"
#include "dselect/model.hpp"
#include "dselect/synth.hpp"
#include "dselect/trainer.hpp"

namespace dselect::harness {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitNoValidLambda = 4;

// Raised by run_sweep when every run fails the validity rule.
class NoValidSolution : public Error {
 public:
  using Error::Error;
};

using MetricMap = std::map<std::string, double>;

// Dataset and freshly initialized model described by a configuration.
struct PreparedRun {
  model::MoeModel model;
  synth::Dataset data;
  std::vector<std::size_t> group_of_task;  // group_synth only
  std::vector<std::size_t> true_experts;   // recovery only
  std::string generator_record;            // JSON, synthetic experiments only
};

PreparedRun prepare(const config::ExperimentConfig& config);
model::ModelSpec model_spec(const config::ExperimentConfig& config, std::size_t input_dim, std::size_t tasks);
train::TrainOptions train_options(const config::ExperimentConfig& config);

struct RunResult {
  MetricMap metrics;
  bool lambda_valid = true;
  train::TrainResult training;
  std::vector<metrics::Support> final_supports;  // per task
  std::vector<std::size_t> true_experts;
  std::filesystem::path trajectory_path;
  std::filesystem::path metrics_path;
  std::filesystem::path checkpoint_path;
};

// Metrics of a trained model that do not depend on the training history.
MetricMap evaluate_model(const config::ExperimentConfig& config, const PreparedRun& run, bool* lambda_valid = nullptr,
                         std::vector<metrics::Support>* final_supports = nullptr);

// Trains the configured model. With an empty out_dir nothing is written.
RunResult run_train(const config::ExperimentConfig& config, const std::filesystem::path& out_dir);

std::string metrics_json(const MetricMap& metrics);
std::string trajectory_csv(const std::vector<train::TrajectoryRow>& rows);

struct SweepRow {
  std::size_t point = 0;
  std::size_t trial = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> settings;
  RunResult result;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t best_point = 0;
  std::size_t best_row = 0;  // lowest validation loss among the best point's valid trials
};

// Cartesian grid over config.sweep (optionally subsampled), sweep_trials
// trials per point with seed = base seed + trial index. Writes results.csv,
// best_config.txt and best_metrics.json. Throws NoValidSolution when no run
// passes the validity rule.
SweepResult run_sweep(const config::ExperimentConfig& config, const std::filesystem::path& out_dir);

struct RecoverRow {
  std::uint64_t seed = 0;
  std::string gate;
  std::size_t recovered = 0;
  std::size_t support_changes = 0;
  bool final_support_stable = false;  // unchanged over the last 10% of snapshots
  std::optional<std::size_t> binary_convergence_step;
  double validation_accuracy = 0.0;
  std::vector<std::size_t> true_experts;
  metrics::Support final_support;
};

// DSelect-k (static) and Top-k on the recovery data for each seed, under the
// same optimizer budget. Writes recover.csv and per-run trajectories.
std::vector<RecoverRow> run_recover(const config::ExperimentConfig& config, const std::vector<std::uint64_t>& seeds,
                                    const std::filesystem::path& out_dir,
                                    const std::vector<model::GateKind>& gates = {model::GateKind::dselect_static,
                                                                                 model::GateKind::topk});

struct GroupSynthRow {
  std::string gate;
  std::size_t tasks = 0;
  std::uint64_t seed = 0;
  double test_mse = 0.0;
  double related_jaccard = 0.0;
  double unrelated_jaccard = 0.0;
  double random_gate_jaccard = 0.0;
  bool lambda_valid = true;
  std::optional<std::size_t> binary_convergence_step;
};

// One row per (gate, task count, seed); gate kinds and group counts come
// from sweep.gate.kind / sweep.data.groups when present. Writes
// group_synth.csv.
std::vector<GroupSynthRow> run_group_synth(const config::ExperimentConfig& config,
                                           const std::vector<std::uint64_t>& seeds,
                                           const std::filesystem::path& out_dir);

// Loads a checkpoint into the configured model and recomputes its metrics.
MetricMap run_metrics(const config::ExperimentConfig& config, const std::filesystem::path& checkpoint);

}  // namespace dselect::harness
