#pragma once

// Expert-selection statistics (supports, Jaccard indices, the random-gate
// reference value, binary convergence) and predictive metrics.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "dselect/model.hpp"
#include "dselect/synth.hpp"

namespace dselect::metrics {

using Support = std::set<std::size_t>;  // 0-based expert indices

// |A n B| / |A u B|; two empty sets count as identical (1).
double jaccard(const Support& a, const Support& b);

struct GroupJaccard {
  double related = 0.0;              // mean over pairs within a group
  std::optional<double> unrelated;   // mean over cross-group pairs; absent with one group
};

GroupJaccard group_jaccard(std::span<const Support> supports, std::span<const std::size_t> group_of_task);

// Expected Jaccard index of two independent uniform k-subsets of n experts.
double random_gate_jaccard_analytic(std::size_t n, std::size_t k);
double random_gate_jaccard_monte_carlo(std::size_t n, std::size_t k, std::size_t samples, std::uint64_t seed = 12345);
// Average over all ordered pairs of k-subsets; exponential, for small n.
double random_gate_jaccard_enumerated(std::size_t n, std::size_t k);

struct RandomGateJaccard {
  double analytic = 0.0;
  double monte_carlo = 0.0;
};
RandomGateJaccard random_gate_expected_jaccard(std::size_t n, std::size_t k, std::size_t samples);

// Indices with strictly positive weight.
Support support_exact(std::span<const double> weights);
// The k largest weights, ties to the lower index.
Support support_top_k(std::span<const double> weights, std::size_t k);
double average_support_size(std::span<const Support> supports);

bool is_binary(std::span<const double> values);

struct Snapshot {
  std::size_t step = 0;
  std::vector<double> values;
};

// Step of the first snapshot from which every later snapshot (itself
// included) holds only exact 0.0/1.0 values.
std::optional<std::size_t> binary_convergence_step(std::span<const Snapshot> trajectory);

// Number of snapshots whose support differs from the previous snapshot's.
std::size_t support_changes(std::span<const Support> trajectory);

struct PredictiveMetrics {
  std::vector<double> mse;       // per task
  std::vector<double> accuracy;  // per task; cross-entropy models only
  std::vector<double> loss;      // per task: squared error or cross-entropy
  double aggregate_loss = 0.0;   // task-weighted
};

// predictions are model outputs (logits for cross-entropy), N x T.
PredictiveMetrics predictive_metrics(const Tensor& predictions, const Tensor& labels, model::LossKind loss,
                                     std::span<const double> task_weights);
Tensor predict_all(const model::MoeModel& model, const synth::Dataset& data);
PredictiveMetrics predictive_metrics(const model::MoeModel& model, const synth::Dataset& data);

}  // namespace dselect::metrics
