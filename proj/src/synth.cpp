#include "dselect/synth.hpp"

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dselect/error.hpp"
#include "dselect/io.hpp"

namespace dselect::synth {

using nlohmann::json;

std::span<const double> Dataset::row(std::size_t i) const {
  const std::size_t p = features();
  return x.data().subspan(i * p, p);
}

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows()) throw DomainError("dataset slice out of range");
  const std::size_t p = features();
  const std::size_t t = tasks();
  Dataset out;
  out.x = Tensor(Shape{end - begin, p},
                 std::vector<double>(x.values().begin() + begin * p, x.values().begin() + end * p));
  out.y = Tensor(Shape{end - begin, t},
                 std::vector<double>(y.values().begin() + begin * t, y.values().begin() + end * t));
  out.feature_names = feature_names;
  out.task_names = task_names;
  out.split = Split{end - begin, 0, 0};
  return out;
}

namespace {

std::vector<std::string> numbered(const char* stem, std::size_t count) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(stem + std::to_string(i));
  return out;
}

Tensor normal_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t(Shape{rows, cols});
  for (double& v : t.data()) v = standard_normal(rng);
  return t;
}

model::DenseLayer normal_layer(std::size_t units, std::size_t inputs, Rng& rng) {
  model::DenseLayer layer{normal_matrix(units, inputs, rng), Tensor(Shape{units})};
  for (double& v : layer.b.data()) v = standard_normal(rng);
  return layer;
}

double relu_unit_sum(const model::DenseLayer& layer, std::span<const double> x, std::vector<double>* units) {
  double total = 0.0;
  for (std::size_t u = 0; u < layer.w.dim(0); ++u) {
    double acc = layer.b[u];
    for (std::size_t c = 0; c < x.size(); ++c) acc += layer.w.at(u, c) * x[c];
    acc = acc > 0.0 ? acc : 0.0;
    if (units) (*units)[u] += acc;
    total += acc;
  }
  return total;
}

}  // namespace

// --- grouped regression tasks ---------------------------------------------

Split GroupTaskConfig::resolved_split() const {
  if (split.total() != 0) return split;
  Split s;
  s.train = samples * 5 / 7;
  s.val = samples / 7;
  s.test = samples - s.train - s.val;
  return s;
}

void GroupTaskConfig::validate() const {
  if (groups < 1 || tasks_per_group < 1 || experts_per_group < 1 || units_per_expert < 1 || features < 1) {
    throw ConfigError("group tasks: sizes must be positive");
  }
  if (!(correlation >= 0.0 && correlation < 1.0)) throw ConfigError("group tasks: correlation must lie in [0, 1)");
  const Split s = resolved_split();
  if (s.total() != samples) throw ConfigError("group tasks: split sizes must add up to the sample count");
  if (s.train == 0 || s.val == 0 || s.test == 0) throw ConfigError("group tasks: every split needs rows");
}

Tensor sample_task_weights(std::size_t tasks, std::size_t dims, double correlation, Rng& rng) {
  if (!(correlation >= 0.0 && correlation < 1.0)) throw DomainError("task weights: correlation must lie in [0, 1)");
  const double shared = std::sqrt(correlation);
  const double own = std::sqrt(1.0 - correlation);
  Tensor out(Shape{tasks, dims});
  for (std::size_t c = 0; c < dims; ++c) {
    const double z = standard_normal(rng);
    for (std::size_t t = 0; t < tasks; ++t) out.at(t, c) = shared * z + own * standard_normal(rng);
  }
  return out;
}

double group_expert_output(const model::DenseLayer& expert, std::span<const double> x) {
  return relu_unit_sum(expert, x, nullptr);
}

double group_task_target(const GroupGenerator& generator, std::size_t task_in_group, std::span<const double> x) {
  const std::size_t e = generator.experts.size();
  double mx = -INFINITY;
  for (std::size_t i = 0; i < e; ++i) mx = std::max(mx, generator.task_weights.at(task_in_group, i));
  double norm = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < e; ++i) {
    const double w = std::exp(generator.task_weights.at(task_in_group, i) - mx);
    norm += w;
    acc += w * group_expert_output(generator.experts[i], x);
  }
  return acc / norm;
}

GroupTaskDataset gen_group_tasks(const GroupTaskConfig& config) {
  config.validate();
  const std::size_t n = config.samples;
  const std::size_t p = config.features;
  const std::size_t tasks = config.groups * config.tasks_per_group;

  GroupTaskDataset out;
  out.config = config;
  Rng x_rng = make_rng(config.seed, 0);
  out.data.x = normal_matrix(n, p, x_rng);
  out.data.y = Tensor(Shape{n, tasks});
  out.data.feature_names = numbered("x", p);
  out.data.task_names = numbered("y", tasks);
  out.data.split = config.resolved_split();

  for (std::size_t g = 0; g < config.groups; ++g) {
    auto it = config.group_seed_overrides.find(g);
    Rng rng(it != config.group_seed_overrides.end() ? it->second : derive_seed(config.seed, 100 + g));
    GroupGenerator gen;
    for (std::size_t e = 0; e < config.experts_per_group; ++e) {
      gen.experts.push_back(normal_layer(config.units_per_expert, p, rng));
    }
    gen.task_weights = sample_task_weights(config.tasks_per_group, config.experts_per_group, config.correlation, rng);
    for (std::size_t t = 0; t < config.tasks_per_group; ++t) out.group_of_task.push_back(g);
    out.generators.push_back(std::move(gen));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = out.data.row(i);
    for (std::size_t g = 0; g < config.groups; ++g) {
      const GroupGenerator& gen = out.generators[g];
      std::vector<double> f(config.experts_per_group);
      for (std::size_t e = 0; e < f.size(); ++e) f[e] = group_expert_output(gen.experts[e], x);
      for (std::size_t t = 0; t < config.tasks_per_group; ++t) {
        double mx = -INFINITY;
        for (std::size_t e = 0; e < f.size(); ++e) mx = std::max(mx, gen.task_weights.at(t, e));
        double norm = 0.0, acc = 0.0;
        for (std::size_t e = 0; e < f.size(); ++e) {
          const double w = std::exp(gen.task_weights.at(t, e) - mx);
          norm += w;
          acc += w * f[e];
        }
        out.data.y.at(i, g * config.tasks_per_group + t) = acc / norm;
      }
    }
  }
  return out;
}

// --- recovery classification data -----------------------------------------

void RecoveryConfig::validate() const {
  if (samples < 2) throw ConfigError("recovery data: need at least 2 samples");
  if (features < 1 || generator_experts < 1 || units < 1) throw ConfigError("recovery data: sizes must be positive");
  if (!(min_balance >= 0.0 && min_balance <= max_balance && max_balance <= 1.0)) {
    throw ConfigError("recovery data: bad label balance bounds");
  }
}

double recovery_logit(const model::RecoverySource& source, std::span<const double> x) {
  const std::size_t units = source.head_w.size();
  std::vector<double> mean(units, 0.0);
  for (const auto& e : source.experts) relu_unit_sum(e, x, &mean);
  double out = source.head_b;
  for (std::size_t u = 0; u < units; ++u) out += source.head_w[u] * mean[u] / static_cast<double>(source.experts.size());
  return out;
}

RecoveryDataset gen_recovery_data(const RecoveryConfig& config) {
  config.validate();
  const std::size_t n = config.samples;
  const std::size_t p = config.features;
  RecoveryDataset out;
  out.config = config;
  Rng x_rng = make_rng(config.seed, 0);
  out.data.x = normal_matrix(n, p, x_rng);
  out.data.y = Tensor(Shape{n, 1});
  out.data.feature_names = numbered("x", p);
  out.data.task_names = {"y0"};
  out.data.split = Split{n / 2, n - n / 2, 0};

  constexpr std::size_t kMaxAttempts = 1000;
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng = make_rng(config.seed, 1 + attempt);
    model::RecoverySource src;
    for (std::size_t e = 0; e < config.generator_experts; ++e) src.experts.push_back(normal_layer(config.units, p, rng));
    src.head_w = Tensor(Shape{config.units});
    for (double& v : src.head_w.data()) v = standard_normal(rng);
    src.head_b = standard_normal(rng);
    double positives = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double label = recovery_logit(src, out.data.row(i)) > 0.0 ? 1.0 : 0.0;
      out.data.y[i] = label;
      positives += label;
    }
    const double balance = positives / static_cast<double>(n);
    if (balance >= config.min_balance && balance <= config.max_balance) {
      out.source = std::move(src);
      out.generator_attempt = attempt;
      return out;
    }
  }
  throw NumericError("recovery data: no generator with balanced labels found");
}

// --- files ----------------------------------------------------------------

std::string dataset_csv(const Dataset& data) {
  std::string out;
  std::vector<std::string> header = data.feature_names;
  header.insert(header.end(), data.task_names.begin(), data.task_names.end());
  for (std::size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
  out += '\n';
  const std::size_t p = data.features();
  const std::size_t t = data.tasks();
  for (std::size_t r = 0; r < data.rows(); ++r) {
    for (std::size_t c = 0; c < p; ++c) out += (c ? "," : "") + io::format_double(data.x.at(r, c));
    for (std::size_t c = 0; c < t; ++c) out += "," + io::format_double(data.y.at(r, c));
    out += '\n';
  }
  return out;
}

Dataset parse_dataset_csv(const std::string& text, Split split) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw Error("dataset: empty file");
  const auto header = io::split(io::trim(line), ',');
  Dataset out;
  std::vector<bool> is_task;
  for (const auto& name : header) {
    const bool task = !name.empty() && name[0] == 'y';
    if (!task && !out.task_names.empty()) throw Error("dataset: feature column '" + name + "' after task columns");
    (task ? out.task_names : out.feature_names).push_back(name);
  }
  if (out.feature_names.empty() || out.task_names.empty()) throw Error("dataset: need feature and task columns");
  std::vector<double> xs, ys;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (io::trim(line).empty()) continue;
    const auto cells = io::split(io::trim(line), ',');
    if (cells.size() != header.size()) throw Error("dataset: row " + std::to_string(rows + 1) + " has wrong width");
    for (std::size_t c = 0; c < cells.size(); ++c) {
      (c < out.feature_names.size() ? xs : ys).push_back(io::parse_double(cells[c]));
    }
    ++rows;
  }
  out.x = Tensor(Shape{rows, out.feature_names.size()}, std::move(xs));
  out.y = Tensor(Shape{rows, out.task_names.size()}, std::move(ys));
  if (split.total() == 0) {
    split.train = rows * 5 / 7;
    split.val = rows / 7;
    split.test = rows - split.train - split.val;
  }
  if (split.total() != rows) throw ConfigError("dataset: split sizes do not match the row count");
  out.split = split;
  return out;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  io::write_text_atomic(path, dataset_csv(data));
}

Dataset read_dataset(const std::filesystem::path& path, Split split) {
  return parse_dataset_csv(io::read_text(path), split);
}

namespace {

json tensor_json(const Tensor& t) { return json{{"shape", t.shape()}, {"values", t.values()}}; }

Tensor tensor_from(const json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("values").get<std::vector<double>>());
}

json layer_json(const model::DenseLayer& l) { return json{{"w", tensor_json(l.w)}, {"b", tensor_json(l.b)}}; }
model::DenseLayer layer_from(const json& j) { return {tensor_from(j.at("w")), tensor_from(j.at("b"))}; }

}  // namespace

std::string group_record_json(const GroupTaskDataset& d) {
  json j;
  j["kind"] = "group_tasks";
  j["seed"] = d.config.seed;
  j["correlation"] = d.config.correlation;
  j["group_of_task"] = d.group_of_task;
  j["split"] = {d.data.split.train, d.data.split.val, d.data.split.test};
  json groups = json::array();
  for (const auto& g : d.generators) {
    json experts = json::array();
    for (const auto& e : g.experts) experts.push_back(layer_json(e));
    groups.push_back(json{{"experts", experts}, {"task_weights", tensor_json(g.task_weights)}});
  }
  j["groups"] = groups;
  return j.dump(1);
}

std::string recovery_record_json(const RecoveryDataset& d) {
  json j;
  j["kind"] = "recovery";
  j["seed"] = d.config.seed;
  j["generator_attempt"] = d.generator_attempt;
  j["split"] = {d.data.split.train, d.data.split.val, d.data.split.test};
  json experts = json::array();
  for (const auto& e : d.source.experts) experts.push_back(layer_json(e));
  j["experts"] = experts;
  j["head_w"] = tensor_json(d.source.head_w);
  j["head_b"] = d.source.head_b;
  return j.dump(1);
}

Tensor replay_group_targets(const std::string& record_json, const Tensor& x) {
  const json j = json::parse(record_json);
  if (j.at("kind") != "group_tasks") throw Error("record is not a group-task generator");
  std::vector<GroupGenerator> gens;
  for (const auto& g : j.at("groups")) {
    GroupGenerator gen;
    for (const auto& e : g.at("experts")) gen.experts.push_back(layer_from(e));
    gen.task_weights = tensor_from(g.at("task_weights"));
    gens.push_back(std::move(gen));
  }
  std::size_t tasks = 0;
  for (const auto& g : gens) tasks += g.task_weights.dim(0);
  const std::size_t n = x.dim(0), p = x.dim(1);
  Tensor y(Shape{n, tasks});
  for (std::size_t i = 0; i < n; ++i) {
    const std::span<const double> row = x.data().subspan(i * p, p);
    std::size_t col = 0;
    for (const auto& g : gens) {
      for (std::size_t t = 0; t < g.task_weights.dim(0); ++t) y.at(i, col++) = group_task_target(g, t, row);
    }
  }
  return y;
}

Tensor replay_recovery_labels(const std::string& record_json, const Tensor& x) {
  const json j = json::parse(record_json);
  if (j.at("kind") != "recovery") throw Error("record is not a recovery generator");
  model::RecoverySource src;
  for (const auto& e : j.at("experts")) src.experts.push_back(layer_from(e));
  src.head_w = tensor_from(j.at("head_w"));
  src.head_b = j.at("head_b").get<double>();
  const std::size_t n = x.dim(0), p = x.dim(1);
  Tensor y(Shape{n, 1});
  for (std::size_t i = 0; i < n; ++i) y[i] = recovery_logit(src, x.data().subspan(i * p, p)) > 0.0 ? 1.0 : 0.0;
  return y;
}

}  // namespace dselect::synth
