#include "dselect/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dselect/error.hpp"
#include "dselect/io.hpp"

namespace dselect::harness {

namespace fs = std::filesystem;
using config::ExperimentConfig;
using config::ExperimentKind;
using model::GateKind;

model::ModelSpec model_spec(const ExperimentConfig& c, std::size_t input_dim, std::size_t tasks) {
  model::ModelSpec spec;
  spec.shared_bottom = c.shared_bottom;
  spec.input_dim = input_dim;
  spec.tasks = tasks;
  spec.expert.widths = c.expert_units;
  spec.expert.output = c.expert_output;
  spec.gate = c.gate;
  spec.gate.anneal_gamma = c.schedule.target == optim::ScheduleTarget::smooth_step_gamma;
  spec.tower.hidden = c.tower_hidden;
  spec.tower.identity = c.tower_identity;
  spec.loss = c.loss;
  spec.task_weights = c.task_weights;
  return spec;
}

train::TrainOptions train_options(const ExperimentConfig& c) {
  train::TrainOptions o;
  o.optimizer = c.optimizer;
  o.batch_size = c.batch_size;
  o.epochs = c.epochs;
  o.patience = c.patience;
  o.eval_every = c.eval_every;
  o.max_steps = c.max_steps;
  o.schedule = c.schedule;
  o.trajectory_every = c.trajectory_every;
  o.seed = c.seed;
  return o;
}

namespace {

synth::Split config_split(const ExperimentConfig& c) { return {c.split_train, c.split_val, c.split_test}; }

model::GateSpec with_schedule_start(model::GateSpec gate, const ExperimentConfig& c) {
  gate.anneal_gamma = c.schedule.target == optim::ScheduleTarget::smooth_step_gamma;
  return gate;
}

void start_schedule(model::MoeModel& m, const ExperimentConfig& c) {
  if (c.schedule.target == optim::ScheduleTarget::none) return;
  if (c.schedule.target == optim::ScheduleTarget::smooth_step_gamma) {
    m.gamma_now = c.schedule.start;
  } else {
    m.temperature_now = c.schedule.start;
  }
}

}  // namespace

PreparedRun prepare(const ExperimentConfig& c) {
  config::validate(c);
  Rng model_rng = make_rng(c.seed, 5000);
  switch (c.experiment) {
    case ExperimentKind::recovery: {
      synth::RecoveryConfig rc;
      rc.features = c.features;
      rc.samples = c.samples;
      rc.generator_experts = c.experts_per_group;
      rc.units = c.units_per_expert;
      rc.seed = c.seed;
      synth::RecoveryDataset data = synth::gen_recovery_data(rc);
      model::RecoveryModel rm = model::build_recovery_model(data.source, with_schedule_start(c.gate, c), model_rng,
                                                            c.gate.n_experts);
      start_schedule(rm.model, c);
      std::string record = synth::recovery_record_json(data);
      return PreparedRun{std::move(rm.model), std::move(data.data), {}, std::move(rm.true_experts), std::move(record)};
    }
    case ExperimentKind::group_synth: {
      synth::GroupTaskConfig gc;
      gc.groups = c.groups;
      gc.tasks_per_group = c.tasks_per_group;
      gc.experts_per_group = c.experts_per_group;
      gc.units_per_expert = c.units_per_expert;
      gc.features = c.features;
      gc.samples = c.samples;
      gc.correlation = c.correlation;
      gc.seed = c.seed;
      gc.split = config_split(c);
      synth::GroupTaskDataset data = synth::gen_group_tasks(gc);
      ExperimentConfig mc = c;
      // The model has as many experts as generated the data.
      mc.gate.n_experts = c.experts_per_group * c.groups;
      if (mc.gate.k > mc.gate.n_experts) throw ConfigError("gate.k exceeds the number of experts");
      model::MoeModel m(model_spec(mc, c.features, data.data.tasks()));
      start_schedule(m, c);
      m.initialize(model_rng);
      std::string record = synth::group_record_json(data);
      return PreparedRun{std::move(m), std::move(data.data), std::move(data.group_of_task), {}, std::move(record)};
    }
    case ExperimentKind::custom: {
      synth::Dataset data = synth::read_dataset(c.data_file, config_split(c));
      model::MoeModel m(model_spec(c, data.features(), data.tasks()));
      start_schedule(m, c);
      m.initialize(model_rng);
      return PreparedRun{std::move(m), std::move(data), {}, {}, {}};
    }
  }
  throw ConfigError("unhandled experiment kind");
}

MetricMap evaluate_model(const ExperimentConfig& c, const PreparedRun& run, bool* lambda_valid_out,
                         std::vector<metrics::Support>* supports_out) {
  const model::MoeModel& m = run.model;
  const model::ModelSpec& spec = m.spec();
  MetricMap out;
  const synth::Dataset val = run.data.validation();
  const synth::Dataset test = run.data.test();
  const synth::Dataset& eval = test.rows() > 0 ? test : val;
  const bool classify = spec.loss == model::LossKind::cross_entropy;
  const auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  if (val.rows() > 0) {
    const auto pm = metrics::predictive_metrics(m, val);
    out["validation_loss"] = pm.aggregate_loss;
    out["validation_mse"] = mean(pm.mse);
    if (classify) out["validation_accuracy"] = mean(pm.accuracy);
  }
  if (test.rows() > 0) {
    const auto pm = metrics::predictive_metrics(m, test);
    out["test_loss"] = pm.aggregate_loss;
    out["test_mse"] = mean(pm.mse);
    if (classify) out["test_accuracy"] = mean(pm.accuracy);
    for (std::size_t t = 0; t < pm.mse.size() && pm.mse.size() > 1; ++t) {
      out["task" + std::to_string(t) + ".test_mse"] = pm.mse[t];
    }
  }
  out["seed"] = static_cast<double>(c.seed);
  out["trainable_parameters"] = static_cast<double>(m.trainable_count());

  bool valid = true;
  if (!spec.shared_bottom) {
    const model::GateSpec& gs = spec.gate;
    const model::Predictor predictor(m);
    out["gate_parameters"] = static_cast<double>(m.gate_parameter_count());
    std::vector<metrics::Support> supports;
    double support_total = 0.0;
    double phantom = 0.0;
    bool binary = true;
    if (gs.is_per_example()) {
      std::size_t count = 0;
      std::size_t widest = 0;
      for (std::size_t t = 0; t < spec.tasks; ++t) {
        metrics::Support all;
        for (std::size_t i = 0; i < eval.rows(); ++i) {
          const model::GateEval g = predictor.gate(t, eval.row(i));
          const metrics::Support s = train::gate_support(gs, g.weights);
          support_total += static_cast<double>(s.size());
          widest = std::max(widest, s.size());
          phantom = std::max(phantom, g.phantom_mass);
          if (gs.is_dselect()) binary = binary && metrics::is_binary(g.encodings);
          all.insert(s.begin(), s.end());
          ++count;
        }
        supports.push_back(std::move(all));
      }
      out["avg_selected_experts"] = count ? support_total / static_cast<double>(count) : 0.0;
      out["max_selected_experts"] = static_cast<double>(widest);
    } else {
      for (std::size_t t = 0; t < spec.tasks; ++t) {
        const model::GateEval g = predictor.gate(t, std::span<const double>{});
        supports.push_back(train::gate_support(gs, g.weights));
        support_total += static_cast<double>(supports.back().size());
        phantom = std::max(phantom, g.phantom_mass);
        if (gs.is_dselect()) binary = binary && metrics::is_binary(g.encodings);
      }
      out["avg_selected_experts"] = support_total / static_cast<double>(spec.tasks);
    }
    if (gs.is_dselect()) {
      out["s_binary"] = binary ? 1.0 : 0.0;
      out["max_phantom_mass"] = phantom;
      valid = gs.is_per_example() ? out["avg_selected_experts"] <= static_cast<double>(gs.k) : binary;
    }
    if (gs.kind == GateKind::gumbel) {
      double worst = 0.0;
      for (std::size_t t = 0; t < spec.tasks; ++t) {
        baseline::GumbelGateParams p;
        p.psi_logits = m.parameter(model::gate_prefix(t) + ".psi_logits").values();
        worst = std::max(worst, baseline::gumbel_expected_nonzeros(p));
      }
      out["gumbel_expected_nonzeros"] = worst;
      valid = worst <= static_cast<double>(gs.k);
    }
    if (!run.group_of_task.empty() && spec.tasks >= 2) {
      const auto gj = metrics::group_jaccard(supports, run.group_of_task);
      out["related_jaccard"] = gj.related;
      if (gj.unrelated) out["unrelated_jaccard"] = *gj.unrelated;
      out["random_gate_jaccard"] = metrics::random_gate_jaccard_analytic(gs.n_experts, gs.k);
    }
    if (!run.true_experts.empty()) {
      std::size_t hits = 0;
      for (std::size_t e : run.true_experts) hits += supports.front().contains(e) ? 1 : 0;
      out["recovered_experts"] = static_cast<double>(hits);
    }
    if (supports_out) *supports_out = std::move(supports);
  }
  out["lambda_valid"] = valid ? 1.0 : 0.0;
  if (lambda_valid_out) *lambda_valid_out = valid;
  return out;
}

std::string metrics_json(const MetricMap& metrics) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : metrics) j[k] = v;
  return j.dump(2) + "\n";
}

std::string trajectory_csv(const std::vector<train::TrajectoryRow>& rows) {
  std::string out = "step,task,expert,weight\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + std::to_string(r.task) + "," + std::to_string(r.expert) + "," +
           io::format_double(r.weight) + "\n";
  }
  return out;
}

namespace {

io::Checkpoint make_checkpoint(const PreparedRun& run) {
  io::Checkpoint cp;
  cp.tensors = run.model.parameters();
  cp.meta["gamma_now"] = run.model.gamma_now;
  cp.meta["temperature_now"] = run.model.temperature_now;
  for (std::size_t i = 0; i < run.true_experts.size(); ++i) {
    cp.meta["true_expert." + std::to_string(i)] = static_cast<double>(run.true_experts[i]);
  }
  return cp;
}

bool final_stable(const train::TrainResult& tr) {
  if (tr.supports.empty()) return true;
  const std::size_t last = tr.snapshot_steps.back();
  const double cutoff = 0.9 * static_cast<double>(last);
  for (std::size_t i = 0; i < tr.supports.size(); ++i) {
    if (static_cast<double>(tr.snapshot_steps[i]) >= cutoff && tr.supports[i] != tr.supports.back()) return false;
  }
  return true;
}

std::size_t trajectory_changes(const train::TrainResult& tr) {
  std::size_t changes = 0;
  for (std::size_t i = 1; i < tr.supports.size(); ++i) changes += tr.supports[i] != tr.supports[i - 1] ? 1 : 0;
  return changes;
}

}  // namespace

RunResult run_train(const ExperimentConfig& c, const fs::path& out_dir) {
  PreparedRun run = prepare(c);
  RunResult result;
  result.training = train::train(run.model, run.data, train_options(c));
  result.metrics = evaluate_model(c, run, &result.lambda_valid, &result.final_supports);
  result.true_experts = run.true_experts;
  const train::TrainResult& tr = result.training;
  result.metrics["steps"] = static_cast<double>(tr.steps);
  result.metrics["epochs"] = static_cast<double>(tr.epochs);
  result.metrics["early_stopped"] = tr.early_stopped ? 1.0 : 0.0;
  result.metrics["support_changes"] = static_cast<double>(trajectory_changes(tr));
  result.metrics["final_support_stable"] = final_stable(tr) ? 1.0 : 0.0;
  if (tr.binary_convergence_step) {
    result.metrics["binary_convergence_step"] = static_cast<double>(*tr.binary_convergence_step);
    result.metrics["binary_convergence_fraction"] =
        tr.steps ? static_cast<double>(*tr.binary_convergence_step) / static_cast<double>(tr.steps) : 0.0;
  }
  if (!out_dir.empty()) {
    result.trajectory_path = out_dir / "trajectory.csv";
    result.metrics_path = out_dir / "metrics.json";
    result.checkpoint_path = out_dir / "checkpoint.txt";
    io::write_text_atomic(result.trajectory_path, trajectory_csv(tr.trajectory));
    io::write_text_atomic(result.metrics_path, metrics_json(result.metrics));
    io::save_checkpoint(result.checkpoint_path, make_checkpoint(run));
    ExperimentConfig resolved = c;
    resolved.out = out_dir.string();
    io::write_text_atomic(out_dir / "config.txt", config::serialize(resolved));
    if (c.save_data && c.experiment != ExperimentKind::custom) {
      synth::write_dataset(out_dir / "dataset.csv", run.data);
      io::write_text_atomic(out_dir / "generator.json", run.generator_record);
    }
  }
  return result;
}

// --- sweep ----------------------------------------------------------------

SweepResult run_sweep(const ExperimentConfig& c, const fs::path& out_dir) {
  config::validate(c);
  std::vector<std::string> keys;
  std::vector<std::vector<std::string>> grids;
  for (const auto& [key, grid] : c.sweep) {
    keys.push_back(key);
    grids.push_back(grid);
  }
  std::vector<std::vector<std::size_t>> points{{}};
  for (const auto& grid : grids) {
    std::vector<std::vector<std::size_t>> next;
    for (const auto& prefix : points) {
      for (std::size_t i = 0; i < grid.size(); ++i) {
        auto p = prefix;
        p.push_back(i);
        next.push_back(std::move(p));
      }
    }
    points = std::move(next);
  }
  if (c.sweep_sample > 0 && c.sweep_sample < points.size()) {
    Rng rng(c.sweep_sample_seed);
    std::shuffle(points.begin(), points.end(), rng);
    points.resize(c.sweep_sample);
  }

  SweepResult out;
  std::string table = "point,trial,seed";
  for (const auto& k : keys) table += "," + k;
  table += ",validation_loss,test_loss,lambda_valid,avg_selected_experts,binary_convergence_step\n";
  std::vector<double> point_score(points.size(), INFINITY);
  for (std::size_t pi = 0; pi < points.size(); ++pi) {
    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t trial = 0; trial < c.sweep_trials; ++trial) {
      ExperimentConfig rc = c;
      rc.sweep.clear();
      SweepRow row;
      row.point = pi;
      row.trial = trial;
      for (std::size_t ki = 0; ki < keys.size(); ++ki) {
        const std::string& v = grids[ki][points[pi][ki]];
        config::set_value(rc, keys[ki], v);
        row.settings[keys[ki]] = v;
      }
      rc.seed = c.seed + trial;
      row.seed = rc.seed;
      const fs::path dir = out_dir.empty() ? fs::path{}
                                           : out_dir / ("point" + std::to_string(pi) + "_trial" + std::to_string(trial));
      rc.out = dir.string();
      row.result = run_train(rc, dir);
      const MetricMap& m = row.result.metrics;
      const auto get = [&](const char* k) {
        auto it = m.find(k);
        return it == m.end() ? std::string() : io::format_double(it->second);
      };
      table += std::to_string(pi) + "," + std::to_string(trial) + "," + std::to_string(row.seed);
      for (const auto& k : keys) table += "," + row.settings[k];
      table += "," + get("validation_loss") + "," + get("test_loss") + "," + get("lambda_valid") + "," +
               get("avg_selected_experts") + "," + get("binary_convergence_step") + "\n";
      if (row.result.lambda_valid) {
        total += m.count("validation_loss") ? m.at("validation_loss") : 0.0;
        ++valid;
      }
      out.rows.push_back(std::move(row));
    }
    if (valid > 0) point_score[pi] = total / static_cast<double>(valid);
  }
  if (!out_dir.empty()) io::write_text_atomic(out_dir / "results.csv", table);

  const auto best = std::min_element(point_score.begin(), point_score.end());
  if (best == point_score.end() || !std::isfinite(*best)) {
    throw NoValidSolution("no valid regularization setting: every run failed the selection rule");
  }
  out.best_point = static_cast<std::size_t>(best - point_score.begin());
  double best_loss = INFINITY;
  for (std::size_t i = 0; i < out.rows.size(); ++i) {
    const SweepRow& r = out.rows[i];
    if (r.point != out.best_point || !r.result.lambda_valid) continue;
    const double v = r.result.metrics.count("validation_loss") ? r.result.metrics.at("validation_loss") : 0.0;
    if (v < best_loss) {
      best_loss = v;
      out.best_row = i;
    }
  }
  if (!out_dir.empty()) {
    ExperimentConfig winner = c;
    winner.sweep.clear();
    for (const auto& [k, v] : out.rows[out.best_row].settings) config::set_value(winner, k, v);
    winner.seed = out.rows[out.best_row].seed;
    io::write_text_atomic(out_dir / "best_config.txt", config::serialize(winner));
    io::write_text_atomic(out_dir / "best_metrics.json", metrics_json(out.rows[out.best_row].result.metrics));
  }
  return out;
}

// --- recovery study -------------------------------------------------------

namespace {

// A schedule aimed at another gate family does not apply to this run.
void drop_foreign_schedule(ExperimentConfig& c) {
  using optim::ScheduleTarget;
  const model::GateSpec& g = c.gate;
  const bool dselect = g.kind == GateKind::dselect_static || g.kind == GateKind::dselect_per_example;
  const bool ablation = g.kind == GateKind::ablation_anneal || g.kind == GateKind::ablation_entropy;
  switch (c.schedule.target) {
    case ScheduleTarget::smooth_step_gamma:
      if (!dselect) c.schedule.target = ScheduleTarget::none;
      break;
    case ScheduleTarget::gumbel_temperature:
      if (g.kind != GateKind::gumbel) c.schedule.target = ScheduleTarget::none;
      break;
    case ScheduleTarget::ablation_temperature:
      if (!ablation) c.schedule.target = ScheduleTarget::none;
      break;
    case ScheduleTarget::none:
      break;
  }
}

}  // namespace

std::vector<RecoverRow> run_recover(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                                    const fs::path& out_dir, const std::vector<GateKind>& gates) {
  std::vector<RecoverRow> rows;
  std::string table = "seed,gate,recovered,support_changes,final_support_stable,binary_convergence_step,"
                      "validation_accuracy,true_experts,final_support\n";
  const auto join = [](const auto& values) {
    std::string s;
    for (auto v : values) s += (s.empty() ? "" : " ") + std::to_string(v);
    return s;
  };
  for (std::uint64_t seed : seeds) {
    for (GateKind kind : gates) {
      ExperimentConfig rc = c;
      rc.experiment = ExperimentKind::recovery;
      rc.sweep.clear();
      rc.seed = seed;
      rc.gate.kind = kind;
      drop_foreign_schedule(rc);
      const fs::path dir = out_dir.empty() ? fs::path{}
                                           : out_dir / ("seed" + std::to_string(seed) + "_" + model::gate_kind_name(kind));
      rc.out = dir.string();
      RunResult r = run_train(rc, dir);
      RecoverRow row;
      row.seed = seed;
      row.gate = model::gate_kind_name(kind);
      row.recovered = static_cast<std::size_t>(r.metrics.at("recovered_experts"));
      row.support_changes = static_cast<std::size_t>(r.metrics.at("support_changes"));
      row.final_support_stable = r.metrics.at("final_support_stable") != 0.0;
      row.binary_convergence_step = r.training.binary_convergence_step;
      row.validation_accuracy = r.metrics.count("validation_accuracy") ? r.metrics.at("validation_accuracy") : 0.0;
      row.true_experts = r.true_experts;
      row.final_support = r.final_supports.empty() ? metrics::Support{} : r.final_supports.front();
      table += std::to_string(seed) + "," + row.gate + "," + std::to_string(row.recovered) + "," +
               std::to_string(row.support_changes) + "," + (row.final_support_stable ? "1" : "0") + "," +
               (row.binary_convergence_step ? std::to_string(*row.binary_convergence_step) : "") + "," +
               io::format_double(row.validation_accuracy) + "," + join(row.true_experts) + "," +
               join(row.final_support) + "\n";
      rows.push_back(std::move(row));
    }
  }
  if (!out_dir.empty()) io::write_text_atomic(out_dir / "recover.csv", table);
  return rows;
}

// --- grouped-task study ---------------------------------------------------

std::vector<GroupSynthRow> run_group_synth(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                                           const fs::path& out_dir) {
  std::vector<GateKind> gates{GateKind::dselect_static, GateKind::topk};
  std::vector<std::size_t> group_counts{c.groups};
  if (auto it = c.sweep.find("gate.kind"); it != c.sweep.end()) {
    gates.clear();
    for (const auto& v : it->second) gates.push_back(model::parse_gate_kind(v));
  }
  if (auto it = c.sweep.find("data.groups"); it != c.sweep.end()) {
    group_counts.clear();
    for (const auto& v : it->second) {
      ExperimentConfig probe;
      config::set_value(probe, "data.groups", v);
      group_counts.push_back(probe.groups);
    }
  }
  std::vector<GroupSynthRow> rows;
  std::string table = "gate,tasks,seed,test_mse,related_jaccard,unrelated_jaccard,random_gate_jaccard\n";
  for (std::size_t groups : group_counts) {
    for (GateKind kind : gates) {
      for (std::uint64_t seed : seeds) {
        ExperimentConfig rc = c;
        rc.experiment = ExperimentKind::group_synth;
        rc.sweep.clear();
        rc.groups = groups;
        rc.gate.kind = kind;
        drop_foreign_schedule(rc);
        rc.seed = seed;
        const std::size_t tasks = groups * c.tasks_per_group;
        const fs::path dir = out_dir.empty() ? fs::path{}
                                             : out_dir / (std::string(model::gate_kind_name(kind)) + "_t" +
                                                          std::to_string(tasks) + "_seed" + std::to_string(seed));
        rc.out = dir.string();
        RunResult r = run_train(rc, dir);
        GroupSynthRow row;
        row.gate = model::gate_kind_name(kind);
        row.tasks = tasks;
        row.seed = seed;
        const auto get = [&](const char* k) { return r.metrics.count(k) ? r.metrics.at(k) : NAN; };
        row.test_mse = get("test_mse");
        row.related_jaccard = get("related_jaccard");
        row.unrelated_jaccard = get("unrelated_jaccard");
        row.random_gate_jaccard = get("random_gate_jaccard");
        row.lambda_valid = r.lambda_valid;
        row.binary_convergence_step = r.training.binary_convergence_step;
        table += row.gate + "," + std::to_string(tasks) + "," + std::to_string(seed) + "," +
                 io::format_double(row.test_mse) + "," + io::format_double(row.related_jaccard) + "," +
                 io::format_double(row.unrelated_jaccard) + "," + io::format_double(row.random_gate_jaccard) + "\n";
        rows.push_back(std::move(row));
      }
    }
  }
  if (!out_dir.empty()) io::write_text_atomic(out_dir / "group_synth.csv", table);
  return rows;
}

MetricMap run_metrics(const ExperimentConfig& c, const fs::path& checkpoint) {
  PreparedRun run = prepare(c);
  const io::Checkpoint cp = io::load_checkpoint(checkpoint);
  for (const auto& [name, t] : run.model.parameters()) {
    auto it = cp.tensors.find(name);
    if (it == cp.tensors.end()) throw Error("checkpoint lacks parameter '" + name + "'");
    run.model.set_parameter(name, it->second);
  }
  if (cp.tensors.size() != run.model.parameters().size()) throw Error("checkpoint has parameters the model lacks");
  if (auto it = cp.meta.find("gamma_now"); it != cp.meta.end()) run.model.gamma_now = it->second;
  if (auto it = cp.meta.find("temperature_now"); it != cp.meta.end()) run.model.temperature_now = it->second;
  return evaluate_model(c, run);
}

}  // namespace dselect::harness
