#pragma once

// Synthetic data: grouped regression tasks generated by per-group MoEs, and
// a binary classification set generated by a small MoE with a logistic head.
// Generation is a pure function of the configuration and seed.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dselect/model.hpp"
#include "dselect/rng.hpp"
#include "dselect/tensor.hpp"

namespace dselect::synth {

struct Split {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
  std::size_t total() const { return train + val + test; }
};

struct Dataset {
  Tensor x;  // N x p
  Tensor y;  // N x T
  std::vector<std::string> feature_names;
  std::vector<std::string> task_names;
  Split split;

  std::size_t rows() const { return x.rank() == 2 ? x.dim(0) : 0; }
  std::size_t features() const { return x.rank() == 2 ? x.dim(1) : 0; }
  std::size_t tasks() const { return y.rank() == 2 ? y.dim(1) : 0; }
  std::span<const double> row(std::size_t i) const;
  // Rows [begin, end) of x and y.
  Dataset slice(std::size_t begin, std::size_t end) const;
  Dataset train() const { return slice(0, split.train); }
  Dataset validation() const { return slice(split.train, split.train + split.val); }
  Dataset test() const { return slice(split.train + split.val, split.total()); }
};

// --- grouped regression tasks ---------------------------------------------

struct GroupTaskConfig {
  std::size_t groups = 2;
  std::size_t tasks_per_group = 8;
  std::size_t experts_per_group = 4;
  std::size_t units_per_expert = 4;
  std::size_t features = 10;
  std::size_t samples = 14000;
  double correlation = 0.8;
  std::uint64_t seed = 1;
  Split split{10000, 2000, 2000};  // all zero: 5/7, 1/7, 1/7 of samples
  // Replaces the derived sub-stream seed of individual groups.
  std::map<std::size_t, std::uint64_t> group_seed_overrides;

  Split resolved_split() const;
  void validate() const;
};

struct GroupGenerator {
  std::vector<model::DenseLayer> experts;  // experts_per_group, each a units x p layer
  Tensor task_weights;                     // tasks_per_group x experts_per_group logits
};

struct GroupTaskDataset {
  Dataset data;
  std::vector<std::size_t> group_of_task;
  std::vector<GroupGenerator> generators;
  GroupTaskConfig config;
};

// Rows are tasks; entry (t, c) = sqrt(corr) z_c + sqrt(1 - corr) e_{t,c}, so
// every coordinate column is a draw from N(0, S) with unit diagonal and
// off-diagonal corr.
Tensor sample_task_weights(std::size_t tasks, std::size_t dims, double correlation, Rng& rng);

// Sum of the ReLU units of one generator expert.
double group_expert_output(const model::DenseLayer& expert, std::span<const double> x);
// softmax(task weights) combination of the group's experts.
double group_task_target(const GroupGenerator& generator, std::size_t task_in_group, std::span<const double> x);

GroupTaskDataset gen_group_tasks(const GroupTaskConfig& config);

// --- recovery classification data -----------------------------------------

struct RecoveryConfig {
  std::size_t features = 10;
  std::size_t samples = 20000;
  std::size_t generator_experts = 4;
  std::size_t units = 4;
  std::uint64_t seed = 1;
  double min_balance = 0.3;
  double max_balance = 0.7;

  void validate() const;
};

struct RecoveryDataset {
  Dataset data;                  // one task of {0, 1} labels; split half train, half validation
  model::RecoverySource source;  // the data-generating MoE
  std::size_t generator_attempt = 0;  // sub-stream index of the accepted generator
  RecoveryConfig config;
};

// Logistic-head input: head_w . mean_e relu(W_e x + b_e) + head_b.
double recovery_logit(const model::RecoverySource& source, std::span<const double> x);

RecoveryDataset gen_recovery_data(const RecoveryConfig& config);

// --- files ----------------------------------------------------------------

// Header of feature names then task names, one row per example, values with
// 17 significant digits. Feature columns are named x<i>, task columns y<t>.
std::string dataset_csv(const Dataset& data);
Dataset parse_dataset_csv(const std::string& text, Split split);
void write_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset read_dataset(const std::filesystem::path& path, Split split);

// JSON generator records; replay_* recompute the targets from x.
std::string group_record_json(const GroupTaskDataset& dataset);
std::string recovery_record_json(const RecoveryDataset& dataset);
Tensor replay_group_targets(const std::string& record_json, const Tensor& x);
Tensor replay_recovery_labels(const std::string& record_json, const Tensor& x);

}  // namespace dselect::synth
