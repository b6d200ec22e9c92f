#pragma once

// First-order optimizers, annealing schedules and validation-based early
// stopping.

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "dselect/autodiff.hpp"
#include "dselect/tensor.hpp"

namespace dselect::optim {

enum class OptimizerKind { sgd, adam, adagrad };

const char* optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double learning_rate = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double adagrad_initial = 0.1;  // initial squared-gradient accumulator

  void validate() const;
  bool operator==(const OptimizerConfig&) const = default;
};

// Updates only the parameters present in the gradient map. All gradients are
// checked before anything is modified; a non-finite entry throws
// NumericError naming the parameter.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  void step(std::map<std::string, Tensor>& params, const GradientMap& grads);

  const OptimizerConfig& config() const noexcept { return config_; }
  std::size_t steps_taken() const noexcept { return steps_; }
  void set_learning_rate(double lr);

 private:
  OptimizerConfig config_;
  std::size_t steps_ = 0;
  std::map<std::string, Tensor> first_;   // Adam first moment
  std::map<std::string, Tensor> second_;  // Adam second moment / Adagrad accumulator
};

enum class ScheduleTarget { none, gumbel_temperature, ablation_temperature, smooth_step_gamma };
enum class Spacing { log_even, linear };

const char* schedule_target_name(ScheduleTarget target);
ScheduleTarget parse_schedule_target(std::string_view name);
const char* spacing_name(Spacing spacing);
Spacing parse_spacing(std::string_view name);

struct Schedule {
  ScheduleTarget target = ScheduleTarget::none;
  double start = 1.0;
  double end = 1.0;
  std::size_t steps = 0;  // value reaches `end` at index steps - 1; 0 spans the whole run
  Spacing spacing = Spacing::log_even;

  void validate() const;
  bool operator==(const Schedule&) const = default;
};

// Interpolated value at step_index, held at `end` past the horizon.
double schedule_value(const Schedule& schedule, std::size_t step_index);

// Stops after `patience` consecutive evaluations without a validation loss
// below the best seen so far (minus min_delta).
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience, double min_delta = 0.0);

  // Records one evaluation; returns true when training should stop.
  bool update(double validation_loss);

  std::optional<double> best() const noexcept { return best_; }
  std::size_t evaluations_since_best() const noexcept { return stale_; }

 private:
  std::size_t patience_;
  double min_delta_;
  std::optional<double> best_;
  std::size_t stale_ = 0;
};

}  // namespace dselect::optim
