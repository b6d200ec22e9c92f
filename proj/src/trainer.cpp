#include "dselect/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dselect/error.hpp"
#include "dselect/rng.hpp"

namespace dselect::train {

using model::GateKind;

metrics::Support gate_support(const model::GateSpec& gate, std::span<const double> weights) {
  if (gate.kind == GateKind::ablation_entropy) return metrics::support_top_k(weights, gate.k);
  return metrics::support_exact(weights);
}

std::vector<double> mean_gate_weights(const model::Predictor& predictor, const model::MoeModel& model,
                                      std::size_t task, const synth::Dataset& rows) {
  if (!model.spec().gate.is_per_example() || rows.rows() == 0) {
    return predictor.gate(task, std::span<const double>{}).weights;
  }
  std::vector<double> mean(model.spec().gate.n_experts, 0.0);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const auto w = predictor.gate(task, rows.row(i)).weights;
    for (std::size_t e = 0; e < mean.size(); ++e) mean[e] += w[e];
  }
  for (double& v : mean) v /= static_cast<double>(rows.rows());
  return mean;
}

namespace {

void apply_schedule(model::MoeModel& model, const optim::Schedule& schedule, std::size_t step) {
  if (schedule.target == optim::ScheduleTarget::none) return;
  const double v = optim::schedule_value(schedule, step);
  if (schedule.target == optim::ScheduleTarget::smooth_step_gamma) {
    model.gamma_now = v;
  } else {
    model.temperature_now = v;
  }
}

void take_snapshot(const model::MoeModel& model, const synth::Dataset& probe, std::size_t step, TrainResult& out) {
  const model::ModelSpec& spec = model.spec();
  if (spec.shared_bottom) return;
  const model::Predictor predictor(model);
  std::vector<metrics::Support> supports;
  for (std::size_t t = 0; t < spec.tasks; ++t) {
    const auto w = mean_gate_weights(predictor, model, t, probe);
    for (std::size_t e = 0; e < w.size(); ++e) out.trajectory.push_back({step, t, e, w[e]});
    if (spec.gate.is_per_example()) {
      // Union of the per-example supports over the probe rows.
      metrics::Support all;
      for (std::size_t i = 0; i < probe.rows(); ++i) {
        const auto s = gate_support(spec.gate, predictor.gate(t, probe.row(i)).weights);
        all.insert(s.begin(), s.end());
      }
      supports.push_back(std::move(all));
    } else {
      supports.push_back(gate_support(spec.gate, w));
    }
  }
  out.supports.push_back(std::move(supports));
  out.snapshot_steps.push_back(step);
  if (spec.gate.is_dselect()) {
    metrics::Snapshot snap{step, {}};
    for (std::size_t t = 0; t < spec.tasks; ++t) {
      if (spec.gate.is_per_example()) {
        for (std::size_t i = 0; i < probe.rows(); ++i) {
          const auto enc = predictor.gate(t, probe.row(i)).encodings;
          snap.values.insert(snap.values.end(), enc.begin(), enc.end());
        }
      } else {
        const auto enc = predictor.gate(t, std::span<const double>{}).encodings;
        snap.values.insert(snap.values.end(), enc.begin(), enc.end());
      }
    }
    out.encodings.push_back(std::move(snap));
  }
}

double validation_loss(const model::MoeModel& model, const synth::Dataset& val) {
  return metrics::predictive_metrics(model, val).aggregate_loss;
}

}  // namespace

TrainResult train(model::MoeModel& model, const synth::Dataset& data, const TrainOptions& options) {
  const model::ModelSpec& spec = model.spec();
  if (options.batch_size == 0) throw ConfigError("batch size must be positive");
  if (options.trajectory_every == 0) throw ConfigError("trajectory cadence must be positive");
  if (data.features() != spec.input_dim || data.tasks() != spec.tasks) {
    throw ShapeError("dataset shape does not match the model");
  }
  const synth::Dataset train_rows = data.train();
  const synth::Dataset val_rows = data.validation();
  if (train_rows.rows() == 0) throw ConfigError("training split is empty");
  const synth::Dataset probe = val_rows.rows() > 0 ? val_rows.slice(0, std::min(options.snapshot_rows, val_rows.rows()))
                                                   : train_rows.slice(0, std::min(options.snapshot_rows, train_rows.rows()));

  const std::size_t n_train = train_rows.rows();
  const std::size_t batches = (n_train + options.batch_size - 1) / options.batch_size;
  std::size_t planned = batches * options.epochs;
  if (options.max_steps > 0) planned = std::min(planned, options.max_steps);
  optim::Schedule schedule = options.schedule;
  if (schedule.steps == 0) schedule.steps = planned;
  if (schedule.target != optim::ScheduleTarget::none) schedule.validate();
  const std::size_t eval_every = options.eval_every > 0 ? options.eval_every : batches;

  TrainResult out;
  out.planned_steps = planned;
  optim::Optimizer optimizer(options.optimizer);
  optim::EarlyStopping stopper(options.patience);
  Rng shuffle_rng = make_rng(options.seed, 5001);
  Rng noise_rng = make_rng(options.seed, 5002);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const model::TrainingGraph& tg = model.graph();
  const std::size_t p = spec.input_dim;
  const std::size_t tasks = spec.tasks;
  const bool gumbel = !spec.shared_bottom && spec.gate.kind == GateKind::gumbel;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::size_t step = 0;
  bool stop = false;
  bool have_val = val_rows.rows() > 0;
  for (std::size_t epoch = 0; epoch < options.epochs && !stop && step < planned; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t b = 0; b < batches && step < planned; ++b) {
      apply_schedule(model, schedule, step);
      if (step % options.trajectory_every == 0) take_snapshot(model, probe, step, out);

      const std::size_t begin = b * options.batch_size;
      const std::size_t end = std::min(n_train, begin + options.batch_size);
      Tensor xb(Shape{end - begin, p});
      Tensor yb(Shape{end - begin, tasks});
      for (std::size_t r = begin; r < end; ++r) {
        const std::size_t src = order[r];
        std::copy_n(train_rows.x.data().begin() + static_cast<std::ptrdiff_t>(src * p), p,
                    xb.data().begin() + static_cast<std::ptrdiff_t>((r - begin) * p));
        std::copy_n(train_rows.y.data().begin() + static_cast<std::ptrdiff_t>(src * tasks), tasks,
                    yb.data().begin() + static_cast<std::ptrdiff_t>((r - begin) * tasks));
      }
      Bindings bindings;
      model.bind_parameters(bindings);
      bindings.bind(model::kInputLeaf, xb);
      bindings.bind(model::kLabelLeaf, yb);
      if (gumbel) {
        Tensor noise(Shape{tasks, spec.gate.n_experts});
        for (double& v : noise.data()) {
          const double u = std::clamp(unit(noise_rng), 1e-12, 1.0 - 1e-12);
          v = std::log(u) - std::log1p(-u);
        }
        bindings.set(model::kGumbelNoiseLeaf, std::move(noise));
      }
      ForwardBackward fb = evaluate_with_gradient(tg.graph, tg.loss, bindings);
      const double loss = fb.values[tg.loss.value].item();
      if (!std::isfinite(loss)) throw NumericError("non-finite training loss at step " + std::to_string(step));
      optimizer.step(model.parameters(), fb.gradients);
      ++step;

      if (have_val && options.patience > 0 && step % eval_every == 0) {
        const double v = validation_loss(model, val_rows);
        if (!std::isfinite(v)) throw NumericError("non-finite validation loss at step " + std::to_string(step));
        if (stopper.update(v)) {
          out.early_stopped = true;
          stop = true;
          break;
        }
      }
    }
    out.epochs = epoch + 1;
  }
  out.steps = step;
  apply_schedule(model, schedule, step > 0 ? step - 1 : 0);
  if (out.snapshot_steps.empty() || out.snapshot_steps.back() != step) take_snapshot(model, probe, step, out);
  if (have_val) {
    out.final_validation_loss = validation_loss(model, val_rows);
    out.best_validation_loss = std::min(out.final_validation_loss, stopper.best().value_or(out.final_validation_loss));
  }
  if (!out.encodings.empty()) out.binary_convergence_step = metrics::binary_convergence_step(out.encodings);
  return out;
}

}  // namespace dselect::train
