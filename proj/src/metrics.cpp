#include "dselect/metrics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>

#include "dselect/error.hpp"
#include "dselect/rng.hpp"

namespace dselect::metrics {

double jaccard(const Support& a, const Support& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::size_t common = 0;
  for (std::size_t i : a) common += b.contains(i) ? 1 : 0;
  return static_cast<double>(common) / static_cast<double>(a.size() + b.size() - common);
}

GroupJaccard group_jaccard(std::span<const Support> supports, std::span<const std::size_t> group_of_task) {
  if (supports.size() < 2) throw DomainError("group_jaccard: need at least two tasks");
  if (supports.size() != group_of_task.size()) throw DomainError("group_jaccard: one group index per task");
  double related = 0.0, unrelated = 0.0;
  std::size_t n_related = 0, n_unrelated = 0;
  for (std::size_t a = 0; a < supports.size(); ++a) {
    for (std::size_t b = a + 1; b < supports.size(); ++b) {
      const double j = jaccard(supports[a], supports[b]);
      if (group_of_task[a] == group_of_task[b]) {
        related += j;
        ++n_related;
      } else {
        unrelated += j;
        ++n_unrelated;
      }
    }
  }
  GroupJaccard out;
  out.related = n_related ? related / static_cast<double>(n_related) : 0.0;
  if (n_unrelated) out.unrelated = unrelated / static_cast<double>(n_unrelated);
  return out;
}

namespace {

double log_choose(std::size_t n, std::size_t r) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(r) + 1.0) -
         std::lgamma(static_cast<double>(n - r) + 1.0);
}

void check_nk(std::size_t n, std::size_t k) {
  if (k < 1 || k > n) throw DomainError("random gate: need 1 <= k <= n");
}

}  // namespace

double random_gate_jaccard_analytic(std::size_t n, std::size_t k) {
  check_nk(n, k);
  // Overlap of two uniform k-subsets is hypergeometric.
  double total = 0.0;
  const std::size_t lo = 2 * k > n ? 2 * k - n : 0;
  for (std::size_t j = lo; j <= k; ++j) {
    const double p = std::exp(log_choose(k, j) + log_choose(n - k, k - j) - log_choose(n, k));
    total += p * static_cast<double>(j) / static_cast<double>(2 * k - j);
  }
  return total;
}

double random_gate_jaccard_monte_carlo(std::size_t n, std::size_t k, std::size_t samples, std::uint64_t seed) {
  check_nk(n, k);
  if (samples == 0) throw DomainError("random gate: need at least one sample");
  Rng rng(seed);
  std::vector<std::size_t> pool(n);
  const auto draw = [&] {
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    return Support(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  };
  double total = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const Support a = draw();
    const Support b = draw();
    total += jaccard(a, b);
  }
  return total / static_cast<double>(samples);
}

double random_gate_jaccard_enumerated(std::size_t n, std::size_t k) {
  check_nk(n, k);
  if (n > 20) throw DomainError("random gate: enumeration limited to n <= 20");
  std::vector<Support> subsets;
  for (std::uint32_t mask = 0; mask < (1U << n); ++mask) {
    if (static_cast<std::size_t>(std::popcount(mask)) != k) continue;
    Support s;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1U) s.insert(i);
    }
    subsets.push_back(std::move(s));
  }
  double total = 0.0;
  for (const auto& a : subsets) {
    for (const auto& b : subsets) total += jaccard(a, b);
  }
  return total / static_cast<double>(subsets.size() * subsets.size());
}

RandomGateJaccard random_gate_expected_jaccard(std::size_t n, std::size_t k, std::size_t samples) {
  return RandomGateJaccard{random_gate_jaccard_analytic(n, k), random_gate_jaccard_monte_carlo(n, k, samples)};
}

Support support_exact(std::span<const double> weights) {
  Support out;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] > 0.0) out.insert(i);
  }
  return out;
}

Support support_top_k(std::span<const double> weights, std::size_t k) {
  if (k > weights.size()) throw DomainError("support_top_k: k exceeds the number of weights");
  std::vector<std::size_t> idx(weights.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return weights[a] > weights[b]; });
  return Support(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
}

double average_support_size(std::span<const Support> supports) {
  if (supports.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : supports) total += static_cast<double>(s.size());
  return total / static_cast<double>(supports.size());
}

bool is_binary(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

std::optional<std::size_t> binary_convergence_step(std::span<const Snapshot> trajectory) {
  std::optional<std::size_t> out;
  for (auto it = trajectory.rbegin(); it != trajectory.rend(); ++it) {
    if (!is_binary(it->values)) break;
    out = it->step;
  }
  return out;
}

std::size_t support_changes(std::span<const Support> trajectory) {
  std::size_t changes = 0;
  for (std::size_t i = 1; i < trajectory.size(); ++i) changes += trajectory[i] != trajectory[i - 1] ? 1 : 0;
  return changes;
}

PredictiveMetrics predictive_metrics(const Tensor& predictions, const Tensor& labels, model::LossKind loss,
                                     std::span<const double> task_weights) {
  if (predictions.shape() != labels.shape() || predictions.rank() != 2) {
    throw ShapeError("predictive metrics: predictions and labels must both be N x T");
  }
  const std::size_t n = predictions.dim(0);
  const std::size_t tasks = predictions.dim(1);
  if (task_weights.size() != tasks) throw DomainError("predictive metrics: one task weight per task");
  if (n == 0) throw DomainError("predictive metrics: empty dataset");
  PredictiveMetrics out;
  out.mse.assign(tasks, 0.0);
  out.loss.assign(tasks, 0.0);
  const bool classify = loss == model::LossKind::cross_entropy;
  if (classify) out.accuracy.assign(tasks, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < tasks; ++t) {
      const double z = predictions.at(i, t);
      const double y = labels.at(i, t);
      if (classify) {
        const double prob = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
        out.mse[t] += (prob - y) * (prob - y);
        out.loss[t] += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
        out.accuracy[t] += ((z > 0.0 ? 1.0 : 0.0) == y) ? 1.0 : 0.0;
      } else {
        out.mse[t] += (z - y) * (z - y);
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t t = 0; t < tasks; ++t) {
    out.mse[t] *= inv;
    out.loss[t] = classify ? out.loss[t] * inv : out.mse[t];
    if (classify) out.accuracy[t] *= inv;
    out.aggregate_loss += task_weights[t] * out.loss[t];
  }
  return out;
}

Tensor predict_all(const model::MoeModel& model, const synth::Dataset& data) {
  if (data.features() != model.spec().input_dim) throw ShapeError("dataset feature count does not match the model");
  const model::Predictor predictor(model);
  const std::size_t tasks = model.spec().tasks;
  Tensor out(Shape{data.rows(), tasks});
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto p = predictor.predict(data.row(i));
    std::copy(p.begin(), p.end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * tasks));
  }
  return out;
}

PredictiveMetrics predictive_metrics(const model::MoeModel& model, const synth::Dataset& data) {
  if (data.tasks() != model.spec().tasks) throw ShapeError("dataset task count does not match the model");
  return predictive_metrics(predict_all(model, data), data.y, model.spec().loss, model.spec().resolved_task_weights());
}

}  // namespace dselect::metrics
