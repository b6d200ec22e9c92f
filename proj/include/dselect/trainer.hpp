#pragma once

// Minibatch training loop with schedules, trajectory snapshots and early
// stopping.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "dselect/metrics.hpp"
#include "dselect/model.hpp"
#include "dselect/optim.hpp"
#include "dselect/synth.hpp"

namespace dselect::train {

struct TrainOptions {
  optim::OptimizerConfig optimizer;
  std::size_t batch_size = 128;
  std::size_t epochs = 50;
  std::size_t patience = 10;    // 0 disables early stopping
  std::size_t eval_every = 0;   // 0 = once per epoch
  std::size_t max_steps = 0;    // 0 = no cap
  optim::Schedule schedule;     // steps = 0 spans the whole run
  std::size_t trajectory_every = 50;
  std::size_t snapshot_rows = 256;  // validation rows averaged for per-example snapshots
  std::uint64_t seed = 1;
};

struct TrajectoryRow {
  std::size_t step = 0;
  std::size_t task = 0;
  std::size_t expert = 0;
  double weight = 0.0;
};

struct TrainResult {
  std::vector<TrajectoryRow> trajectory;
  std::vector<metrics::Snapshot> encodings;              // DSelect-k S(.) per snapshot
  std::vector<std::vector<metrics::Support>> supports;   // per snapshot, per task
  std::vector<std::size_t> snapshot_steps;
  std::size_t steps = 0;
  std::size_t planned_steps = 0;
  std::size_t epochs = 0;
  bool early_stopped = false;
  double best_validation_loss = 0.0;
  double final_validation_loss = 0.0;
  std::optional<std::size_t> binary_convergence_step;
};

// Selection rule used for supports: exact nonzeros, except the entropy
// ablation gate, whose selectors never reach exact zeros, which reports its k
// largest weights.
metrics::Support gate_support(const model::GateSpec& gate, std::span<const double> weights);

// Average gate weights of a task over the given rows (static gates ignore them).
std::vector<double> mean_gate_weights(const model::Predictor& predictor, const model::MoeModel& model,
                                      std::size_t task, const synth::Dataset& rows);

// Trains in place. Throws NumericError on a non-finite loss or gradient.
TrainResult train(model::MoeModel& model, const synth::Dataset& data, const TrainOptions& options);

}  // namespace dselect::train
