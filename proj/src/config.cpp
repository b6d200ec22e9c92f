#include "dselect/config.hpp"

#include <functional>
#include <set>
#include <sstream>

#include "dselect/error.hpp"
#include "dselect/io.hpp"

namespace dselect::config {

const char* experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::recovery: return "recovery";
    case ExperimentKind::group_synth: return "group_synth";
    case ExperimentKind::custom: return "custom";
  }
  return "?";
}

ExperimentKind parse_experiment_kind(std::string_view name) {
  for (auto k : {ExperimentKind::recovery, ExperimentKind::group_synth, ExperimentKind::custom}) {
    if (name == experiment_name(k)) return k;
  }
  throw ConfigError("unknown experiment kind '" + std::string(name) + "'");
}

namespace {

using C = ExperimentConfig;

std::size_t to_size(const std::string& v) {
  const std::string t = io::trim(v);
  if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  try {
    return static_cast<std::size_t>(std::stoull(t));
  } catch (const std::exception&) {
    throw ConfigError("integer out of range: '" + v + "'");
  }
}

bool to_bool(const std::string& v) {
  const std::string t = io::trim(v);
  if (t == "true") return true;
  if (t == "false") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::string from_bool(bool b) { return b ? "true" : "false"; }

template <typename T>
std::vector<T> to_list(const std::string& v, T (*parse)(const std::string&)) {
  std::vector<T> out;
  std::istringstream in(v);
  std::string token;
  while (in >> token) out.push_back(parse(token));
  return out;
}

template <typename T, typename F>
std::string from_list(const std::vector<T>& values, F fmt) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) out += (i ? " " : "") + fmt(values[i]);
  return out;
}

std::size_t parse_size(const std::string& v) { return to_size(v); }
double parse_real(const std::string& v) { return io::parse_double(v); }

struct Field {
  std::string key;
  std::function<std::string(const C&)> get;
  std::function<void(C&, const std::string&)> set;
};

#define SIZE_FIELD(KEY, MEMBER) \
  Field{KEY, [](const C& c) { return std::to_string(c.MEMBER); }, [](C& c, const std::string& v) { c.MEMBER = to_size(v); }}
#define REAL_FIELD(KEY, MEMBER) \
  Field{KEY, [](const C& c) { return io::format_double(c.MEMBER); }, [](C& c, const std::string& v) { c.MEMBER = io::parse_double(v); }}
#define BOOL_FIELD(KEY, MEMBER) \
  Field{KEY, [](const C& c) { return from_bool(c.MEMBER); }, [](C& c, const std::string& v) { c.MEMBER = to_bool(v); }}
#define TEXT_FIELD(KEY, MEMBER) \
  Field{KEY, [](const C& c) { return c.MEMBER; }, [](C& c, const std::string& v) { c.MEMBER = io::trim(v); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"experiment", [](const C& c) { return std::string(experiment_name(c.experiment)); },
            [](C& c, const std::string& v) { c.experiment = parse_experiment_kind(io::trim(v)); }},
      Field{"seed", [](const C& c) { return std::to_string(c.seed); },
            [](C& c, const std::string& v) { c.seed = to_size(v); }},
      TEXT_FIELD("out", out),

      Field{"gate.kind", [](const C& c) { return std::string(model::gate_kind_name(c.gate.kind)); },
            [](C& c, const std::string& v) { c.gate.kind = model::parse_gate_kind(io::trim(v)); }},
      BOOL_FIELD("gate.per_example", gate.per_example),
      SIZE_FIELD("gate.n_experts", gate.n_experts),
      SIZE_FIELD("gate.k", gate.k),
      REAL_FIELD("gate.gamma", gate.gamma),
      REAL_FIELD("gate.lambda", gate.lambda),
      REAL_FIELD("gate.xi", gate.xi),
      REAL_FIELD("gate.temperature", gate.temperature),
      BOOL_FIELD("gate.bias", gate.use_bias),

      Field{"optimizer.kind", [](const C& c) { return std::string(optim::optimizer_name(c.optimizer.kind)); },
            [](C& c, const std::string& v) { c.optimizer.kind = optim::parse_optimizer_kind(io::trim(v)); }},
      REAL_FIELD("optimizer.learning_rate", optimizer.learning_rate),
      REAL_FIELD("optimizer.beta1", optimizer.beta1),
      REAL_FIELD("optimizer.beta2", optimizer.beta2),
      REAL_FIELD("optimizer.epsilon", optimizer.epsilon),
      REAL_FIELD("optimizer.adagrad_initial", optimizer.adagrad_initial),
      SIZE_FIELD("optimizer.batch_size", batch_size),
      SIZE_FIELD("optimizer.epochs", epochs),
      SIZE_FIELD("optimizer.patience", patience),
      SIZE_FIELD("optimizer.eval_every", eval_every),
      SIZE_FIELD("optimizer.max_steps", max_steps),

      Field{"schedule.target", [](const C& c) { return std::string(optim::schedule_target_name(c.schedule.target)); },
            [](C& c, const std::string& v) { c.schedule.target = optim::parse_schedule_target(io::trim(v)); }},
      REAL_FIELD("schedule.start", schedule.start),
      REAL_FIELD("schedule.end", schedule.end),
      SIZE_FIELD("schedule.steps", schedule.steps),
      Field{"schedule.spacing", [](const C& c) { return std::string(optim::spacing_name(c.schedule.spacing)); },
            [](C& c, const std::string& v) { c.schedule.spacing = optim::parse_spacing(io::trim(v)); }},

      Field{"model.expert_units",
            [](const C& c) { return from_list(c.expert_units, [](std::size_t v) { return std::to_string(v); }); },
            [](C& c, const std::string& v) { c.expert_units = to_list<std::size_t>(v, parse_size); }},
      Field{"model.expert_output",
            [](const C& c) { return std::string(c.expert_output == model::ExpertOutput::sum ? "sum" : "vector"); },
            [](C& c, const std::string& v) {
              const std::string t = io::trim(v);
              if (t != "sum" && t != "vector") throw ConfigError("model.expert_output must be sum or vector");
              c.expert_output = t == "sum" ? model::ExpertOutput::sum : model::ExpertOutput::vector;
            }},
      Field{"model.tower_hidden",
            [](const C& c) { return from_list(c.tower_hidden, [](std::size_t v) { return std::to_string(v); }); },
            [](C& c, const std::string& v) { c.tower_hidden = to_list<std::size_t>(v, parse_size); }},
      BOOL_FIELD("model.tower_identity", tower_identity),
      BOOL_FIELD("model.shared_bottom", shared_bottom),
      Field{"model.loss",
            [](const C& c) {
              return std::string(c.loss == model::LossKind::squared_error ? "squared_error" : "cross_entropy");
            },
            [](C& c, const std::string& v) {
              const std::string t = io::trim(v);
              if (t != "squared_error" && t != "cross_entropy") {
                throw ConfigError("model.loss must be squared_error or cross_entropy");
              }
              c.loss = t == "squared_error" ? model::LossKind::squared_error : model::LossKind::cross_entropy;
            }},
      Field{"model.task_weights", [](const C& c) { return from_list(c.task_weights, io::format_double); },
            [](C& c, const std::string& v) { c.task_weights = to_list<double>(v, parse_real); }},

      SIZE_FIELD("data.samples", samples),
      SIZE_FIELD("data.features", features),
      SIZE_FIELD("data.groups", groups),
      SIZE_FIELD("data.tasks_per_group", tasks_per_group),
      SIZE_FIELD("data.experts_per_group", experts_per_group),
      SIZE_FIELD("data.units_per_expert", units_per_expert),
      REAL_FIELD("data.correlation", correlation),
      SIZE_FIELD("data.train", split_train),
      SIZE_FIELD("data.val", split_val),
      SIZE_FIELD("data.test", split_test),
      TEXT_FIELD("data.file", data_file),
      BOOL_FIELD("data.save", save_data),

      SIZE_FIELD("trajectory.every", trajectory_every),
      TEXT_FIELD("checkpoint", checkpoint),

      SIZE_FIELD("sweep.trials", sweep_trials),
      SIZE_FIELD("sweep.sample", sweep_sample),
      Field{"sweep.sample_seed", [](const C& c) { return std::to_string(c.sweep_sample_seed); },
            [](C& c, const std::string& v) { c.sweep_sample_seed = to_size(v); }},
  };
  return table;
}

#undef SIZE_FIELD
#undef REAL_FIELD
#undef BOOL_FIELD
#undef TEXT_FIELD

const Field* find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

bool is_sweep_setting(const std::string& key) {
  return key == "sweep.trials" || key == "sweep.sample" || key == "sweep.sample_seed";
}

}  // namespace

const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

void set_value(ExperimentConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  try {
    f->set(config, value);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

std::string get_value(const ExperimentConfig& config, const std::string& key) {
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  return f->get(config);
}

ExperimentConfig parse(const std::string& text) {
  ExperimentConfig config;
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = io::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = io::trim(line.substr(0, eq));
    const std::string value = io::trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    if (key.starts_with("sweep.") && !is_sweep_setting(key)) {
      const std::string target = key.substr(6);
      if (find_field(target) == nullptr || target.starts_with("sweep.")) {
        throw ConfigError("line " + std::to_string(line_no) + ": cannot sweep unknown key '" + target + "'");
      }
      std::vector<std::string> grid;
      for (const auto& v : io::split(value, ',')) {
        const std::string t = io::trim(v);
        if (t.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty grid value");
        ExperimentConfig probe = config;
        set_value(probe, target, t);  // reject malformed grid values early
        grid.push_back(t);
      }
      config.sweep[target] = std::move(grid);
      continue;
    }
    try {
      set_value(config, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

std::string serialize(const ExperimentConfig& config) {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  for (const auto& [key, grid] : config.sweep) {
    out += "sweep." + key + " =";
    for (std::size_t i = 0; i < grid.size(); ++i) out += (i ? ", " : " ") + grid[i];
    out += "\n";
  }
  return out;
}

ExperimentConfig load(const std::string& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return parse(text);
}

void validate(const ExperimentConfig& c) {
  const auto require = [](bool ok, const std::string& message) {
    if (!ok) throw ConfigError(message);
  };
  c.optimizer.validate();
  require(c.batch_size >= 1, "optimizer.batch_size must be at least 1");
  require(c.epochs >= 1, "optimizer.epochs must be at least 1");
  require(c.trajectory_every >= 1, "trajectory.every must be at least 1");
  require(c.gate.n_experts >= 2, "gate.n_experts must be at least 2");
  require(c.gate.k >= 1 && c.gate.k <= c.gate.n_experts, "gate.k must lie in [1, gate.n_experts]");
  require(c.gate.gamma > 0.0, "gate.gamma must be positive");
  require(c.gate.lambda >= 0.0, "gate.lambda must be non-negative");
  require(c.gate.xi >= 0.0, "gate.xi must be non-negative");
  require(c.gate.temperature > 0.0, "gate.temperature must be positive");
  require(!c.expert_units.empty(), "model.expert_units needs at least one layer");
  for (std::size_t u : c.expert_units) require(u >= 1, "model.expert_units entries must be positive");
  for (std::size_t u : c.tower_hidden) require(u >= 1, "model.tower_hidden entries must be positive");
  for (double w : c.task_weights) require(w >= 0.0 && w <= 1.0, "model.task_weights entries must lie in [0, 1]");
  require(c.features >= 1, "data.features must be positive");
  require(c.correlation >= 0.0 && c.correlation < 1.0, "data.correlation must lie in [0, 1)");
  require(c.sweep_trials >= 1, "sweep.trials must be at least 1");
  if (c.schedule.target != optim::ScheduleTarget::none) {
    require(c.schedule.start > 0.0 && c.schedule.end > 0.0, "schedule values must be positive");
    if (c.schedule.target == optim::ScheduleTarget::smooth_step_gamma) {
      require(c.gate.is_dselect(), "schedule.target smooth_step_gamma needs a DSelect-k gate");
    }
    if (c.schedule.target == optim::ScheduleTarget::gumbel_temperature) {
      require(c.gate.kind == model::GateKind::gumbel, "schedule.target gumbel_temperature needs the gumbel gate");
    }
    if (c.schedule.target == optim::ScheduleTarget::ablation_temperature) {
      require(c.gate.is_ablation(), "schedule.target ablation_temperature needs an ablation gate");
    }
  }
  if (c.gate.kind == model::GateKind::ablation_anneal) {
    require(c.schedule.target == optim::ScheduleTarget::ablation_temperature,
            "ablation_anneal needs schedule.target = ablation_temperature");
  }
  switch (c.experiment) {
    case ExperimentKind::recovery:
      require(c.samples >= 2, "data.samples must be at least 2");
      require(!c.gate.is_per_example(), "the recovery experiment uses a static gate");
      break;
    case ExperimentKind::group_synth:
      require(c.groups >= 1 && c.tasks_per_group >= 1 && c.experts_per_group >= 1 && c.units_per_expert >= 1,
              "data group sizes must be positive");
      break;
    case ExperimentKind::custom:
      require(!c.data_file.empty(), "custom experiments need data.file");
      break;
  }
  for (const auto& [key, grid] : c.sweep) require(!grid.empty(), "sweep." + key + " has an empty grid");
}

}  // namespace dselect::config
