#include "dselect/optim.hpp"

#include <cmath>

#include "dselect/error.hpp"

namespace dselect::optim {

const char* optimizer_name(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::adagrad: return "adagrad";
  }
  return "?";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam, OptimizerKind::adagrad}) {
    if (name == optimizer_name(kind)) return kind;
  }
  throw ConfigError("unknown optimizer '" + std::string(name) + "'");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("Adam betas must lie in [0, 1)");
  }
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
  if (!(adagrad_initial > 0.0)) throw ConfigError("Adagrad initial accumulator must be positive");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

void Optimizer::set_learning_rate(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  config_.learning_rate = lr;
}

void Optimizer::step(std::map<std::string, Tensor>& params, const GradientMap& grads) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw BindingError("gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != g.shape()) {
      throw ShapeError("gradient of '" + name + "' has shape " + shape_string(g.shape()) + ", parameter has " +
                       shape_string(it->second.shape()));
    }
    if (!g.all_finite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  ++steps_;
  const double lr = config_.learning_rate;
  for (const auto& [name, g] : grads) {
    auto p = params.find(name)->second.data();
    const auto gd = g.data();
    switch (config_.kind) {
      case OptimizerKind::sgd:
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * gd[i];
        break;
      case OptimizerKind::adam: {
        auto& m = first_.try_emplace(name, g.shape()).first->second;
        auto& v = second_.try_emplace(name, g.shape()).first->second;
        const double t = static_cast<double>(steps_);
        const double c1 = 1.0 - std::pow(config_.beta1, t);
        const double c2 = 1.0 - std::pow(config_.beta2, t);
        for (std::size_t i = 0; i < p.size(); ++i) {
          m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gd[i];
          v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gd[i] * gd[i];
          p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
        }
        break;
      }
      case OptimizerKind::adagrad: {
        auto& acc = second_.try_emplace(name, g.shape(), config_.adagrad_initial).first->second;
        for (std::size_t i = 0; i < p.size(); ++i) {
          acc[i] += gd[i] * gd[i];
          p[i] -= lr * gd[i] / std::sqrt(acc[i]);
        }
        break;
      }
    }
  }
}

const char* schedule_target_name(ScheduleTarget target) {
  switch (target) {
    case ScheduleTarget::none: return "none";
    case ScheduleTarget::gumbel_temperature: return "gumbel_temperature";
    case ScheduleTarget::ablation_temperature: return "ablation_temperature";
    case ScheduleTarget::smooth_step_gamma: return "smooth_step_gamma";
  }
  return "?";
}

ScheduleTarget parse_schedule_target(std::string_view name) {
  for (auto t : {ScheduleTarget::none, ScheduleTarget::gumbel_temperature, ScheduleTarget::ablation_temperature,
                 ScheduleTarget::smooth_step_gamma}) {
    if (name == schedule_target_name(t)) return t;
  }
  throw ConfigError("unknown schedule target '" + std::string(name) + "'");
}

const char* spacing_name(Spacing spacing) { return spacing == Spacing::log_even ? "log" : "linear"; }

Spacing parse_spacing(std::string_view name) {
  if (name == "log") return Spacing::log_even;
  if (name == "linear") return Spacing::linear;
  throw ConfigError("unknown schedule spacing '" + std::string(name) + "'");
}

void Schedule::validate() const {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!std::isfinite(start) || !std::isfinite(end)) throw ConfigError("schedule values must be finite");
  if (target != ScheduleTarget::none && (!(start > 0.0) || !(end > 0.0))) {
    throw ConfigError("schedule values must be positive");
  }
  if (spacing == Spacing::log_even && (!(start > 0.0) || !(end > 0.0))) {
    throw ConfigError("log spacing needs positive start and end");
  }
}

double schedule_value(const Schedule& schedule, std::size_t step_index) {
  if (schedule.start == schedule.end) return schedule.start;
  if (schedule.steps <= 1 || step_index + 1 >= schedule.steps) return schedule.end;
  if (step_index == 0) return schedule.start;
  const double frac = static_cast<double>(step_index) / static_cast<double>(schedule.steps - 1);
  if (schedule.spacing == Spacing::linear) return schedule.start + frac * (schedule.end - schedule.start);
  return std::exp(std::log(schedule.start) + frac * (std::log(schedule.end) - std::log(schedule.start)));
}

EarlyStopping::EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

bool EarlyStopping::update(double validation_loss) {
  if (!best_ || validation_loss < *best_ - min_delta_) {
    best_ = validation_loss;
    stale_ = 0;
    return false;
  }
  ++stale_;
  return patience_ > 0 && stale_ >= patience_;
}

}  // namespace dselect::optim
