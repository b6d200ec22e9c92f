#include "dselect/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dselect/error.hpp"
#include "dselect/gate_graph.hpp"

namespace dselect::model {

namespace {

std::int64_t i64(std::size_t v) { return static_cast<std::int64_t>(v); }

std::string layer_name(const std::string& prefix, char kind, std::size_t layer) {
  return prefix + "." + kind + std::to_string(layer);
}

}  // namespace

const char* gate_kind_name(GateKind kind) {
  switch (kind) {
    case GateKind::dselect_static: return "dselect_static";
    case GateKind::dselect_per_example: return "dselect_per_example";
    case GateKind::topk: return "topk";
    case GateKind::softmax: return "softmax";
    case GateKind::gumbel: return "gumbel";
    case GateKind::ablation_anneal: return "ablation_anneal";
    case GateKind::ablation_entropy: return "ablation_entropy";
  }
  return "?";
}

GateKind parse_gate_kind(std::string_view name) {
  for (GateKind kind : {GateKind::dselect_static, GateKind::dselect_per_example, GateKind::topk, GateKind::softmax,
                        GateKind::gumbel, GateKind::ablation_anneal, GateKind::ablation_entropy}) {
    if (name == gate_kind_name(kind)) return kind;
  }
  throw ConfigError("unknown gate kind '" + std::string(name) + "'");
}

bool GateSpec::is_per_example() const {
  if (kind == GateKind::dselect_per_example) return true;
  if (kind == GateKind::topk || kind == GateKind::softmax) return per_example;
  return false;
}

bool GateSpec::is_dselect() const {
  return kind == GateKind::dselect_static || kind == GateKind::dselect_per_example;
}

bool GateSpec::is_ablation() const {
  return kind == GateKind::ablation_anneal || kind == GateKind::ablation_entropy;
}

std::size_t ModelSpec::expert_output_dim() const {
  if (expert.widths.empty()) return 0;
  if (!shared_bottom && expert.output == ExpertOutput::sum) return 1;
  return expert.widths.back();
}

std::vector<double> ModelSpec::resolved_task_weights() const {
  if (task_weights.empty()) return std::vector<double>(tasks, 1.0 / static_cast<double>(tasks));
  return task_weights;
}

void ModelSpec::validate() const {
  if (tasks == 0) throw ConfigError("model: need at least one task");
  if (input_dim == 0) throw ConfigError("model: input dimension must be positive");
  if (expert.widths.empty()) throw ConfigError("model: experts need at least one layer");
  for (std::size_t w : expert.widths) {
    if (w == 0) throw ConfigError("model: layer widths must be positive");
  }
  for (std::size_t w : tower.hidden) {
    if (w == 0) throw ConfigError("model: tower widths must be positive");
  }
  if (tower.identity && (expert_output_dim() != 1 || !tower.hidden.empty())) {
    throw ConfigError("model: identity towers need scalar expert outputs and no hidden layers");
  }
  if (!task_weights.empty()) {
    if (task_weights.size() != tasks) throw ConfigError("model: need one task weight per task");
    for (double w : task_weights) {
      if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("model: task weights must lie in [0, 1]");
    }
  }
  if (shared_bottom) return;
  const GateSpec& g = gate;
  if (g.n_experts < 2) throw ConfigError("gate: need at least 2 experts");
  if (g.k < 1 || g.k > g.n_experts) throw ConfigError("gate: k must be in [1, n]");
  if (!(g.gamma > 0.0)) throw ConfigError("gate: gamma must be positive");
  if (!(g.lambda >= 0.0) || !(g.xi >= 0.0)) throw ConfigError("gate: lambda and xi must be non-negative");
  if (!(g.temperature > 0.0)) throw ConfigError("gate: temperature must be positive");
}

std::string gate_prefix(std::size_t task) { return "gate" + std::to_string(task); }
std::string expert_prefix(std::size_t expert) { return "expert" + std::to_string(expert); }
std::string tower_prefix(std::size_t task) { return "tower" + std::to_string(task); }

// --- training graph -------------------------------------------------------

namespace {

struct GraphBuilder {
  const ModelSpec& spec;
  const std::set<std::string>& frozen;
  ExprGraph& g;

  NodeId leaf(const std::string& name, Shape shape) const {
    return frozen.contains(name) ? g.constant(name, std::move(shape)) : g.parameter(name, std::move(shape));
  }

  NodeId cat(const std::vector<NodeId>& parts, int axis) const {
    return parts.size() == 1 ? parts.front() : g.concat(parts, axis);
  }

  // Dense ReLU stack applied to h [B, in].
  NodeId dense_stack(const std::string& prefix, NodeId h, std::size_t in, std::size_t first_layer,
                     std::span<const std::size_t> widths) const {
    for (std::size_t l = 0; l < widths.size(); ++l) {
      const std::size_t layer = first_layer + l;
      NodeId w = leaf(layer_name(prefix, 'w', layer), Shape{widths[l], in});
      NodeId b = leaf(layer_name(prefix, 'b', layer), Shape{widths[l]});
      h = g.relu(g.add(g.matmul(h, w, true), b));
      in = widths[l];
    }
    return h;
  }

  // [B, n] for summed outputs, [B, n, d] otherwise.
  NodeId experts(NodeId x) const {
    const std::size_t n = spec.gate.n_experts;
    const auto& widths = spec.expert.widths;
    std::vector<NodeId> w0, b0;
    for (std::size_t i = 0; i < n; ++i) {
      w0.push_back(leaf(layer_name(expert_prefix(i), 'w', 0), Shape{widths[0], spec.input_dim}));
      b0.push_back(leaf(layer_name(expert_prefix(i), 'b', 0), Shape{widths[0]}));
    }
    NodeId h = g.relu(g.add(g.matmul(x, cat(w0, 0), true), cat(b0, 0)));  // [B, n*u0]
    if (widths.size() > 1) {
      std::vector<NodeId> outs;
      const std::span<const std::size_t> rest(widths.data() + 1, widths.size() - 1);
      for (std::size_t i = 0; i < n; ++i) {
        NodeId hi = g.slice(h, 1, i * widths[0], (i + 1) * widths[0]);
        outs.push_back(dense_stack(expert_prefix(i), hi, widths[0], 1, rest));
      }
      h = cat(outs, 1);
    }
    NodeId e = g.reshape(h, {-1, i64(n), i64(widths.back())});
    if (spec.expert.output == ExpertOutput::sum) e = g.sum(e, 2);
    return e;
  }

  gate::GateNodes gates(NodeId x) const {
    const GateSpec& gs = spec.gate;
    std::vector<std::string> prefixes;
    for (std::size_t t = 0; t < spec.tasks; ++t) prefixes.push_back(gate_prefix(t));
    switch (gs.kind) {
      case GateKind::dselect_static:
      case GateKind::dselect_per_example: {
        gate::DSelectGraphOptions o;
        o.n_experts = gs.n_experts;
        o.k = gs.k;
        o.gamma = gs.gamma;
        o.lambda = gs.lambda;
        o.xi = gs.xi;
        o.use_bias = gs.use_bias;
        if (gs.anneal_gamma) o.inv_gamma_leaf = kInvGammaLeaf;
        if (gs.kind == GateKind::dselect_static) return gate::build_static_dselect(g, prefixes, o);
        return gate::build_per_example_dselect(g, x, spec.input_dim, prefixes, o);
      }
      case GateKind::topk:
      case GateKind::softmax: {
        const std::size_t k = gs.kind == GateKind::topk ? gs.k : 0;
        return baseline::build_linear_gate(g, gs.per_example ? &x : nullptr, spec.input_dim, prefixes, gs.n_experts, k);
      }
      case GateKind::gumbel:
        return baseline::build_gumbel_gate(g, prefixes, gs.n_experts, gs.lambda, kGumbelNoiseLeaf, kInvTemperatureLeaf);
      case GateKind::ablation_anneal:
        return baseline::build_ablation_gate(g, prefixes, gs.n_experts, gs.k, 0.0, kInvTemperatureLeaf);
      case GateKind::ablation_entropy:
        return baseline::build_ablation_gate(g, prefixes, gs.n_experts, gs.k, gs.lambda, kInvTemperatureLeaf);
    }
    throw Error("unhandled gate kind");
  }

  NodeId tower(std::size_t t, NodeId input, std::size_t in) const {
    if (spec.tower.identity) return input;
    const std::string prefix = tower_prefix(t);
    NodeId h = dense_stack(prefix, input, in, 0, spec.tower.hidden);
    if (!spec.tower.hidden.empty()) in = spec.tower.hidden.back();
    const std::size_t last = spec.tower.hidden.size();
    NodeId w = leaf(layer_name(prefix, 'w', last), Shape{1, in});
    NodeId b = leaf(layer_name(prefix, 'b', last), Shape{1});
    return g.add(g.matmul(h, w, true), b);  // [B, 1]
  }
};

}  // namespace

static TrainingGraph build_training_graph_impl(const ModelSpec& spec, const std::set<std::string>& frozen) {
  spec.validate();
  TrainingGraph out;
  GraphBuilder b{spec, frozen, out.graph};
  ExprGraph& g = out.graph;
  const std::size_t tasks = spec.tasks;
  NodeId x = g.constant(kInputLeaf, Shape{kAnyDim, spec.input_dim});
  NodeId y = g.constant(kLabelLeaf, Shape{kAnyDim, tasks});
  NodeId task_weights = g.constant(kTaskWeightLeaf, Shape{tasks});

  std::vector<NodeId> preds;
  if (spec.shared_bottom) {
    NodeId h = b.dense_stack("bottom", x, spec.input_dim, 0, spec.expert.widths);
    for (std::size_t t = 0; t < tasks; ++t) preds.push_back(b.tower(t, h, spec.expert.widths.back()));
  } else {
    const std::size_t n = spec.gate.n_experts;
    const std::size_t d = spec.expert_output_dim();
    NodeId experts = b.experts(x);
    gate::GateNodes gn = b.gates(x);
    out.gate_weights = gn.weights;
    out.regularizer = gn.regularizer;
    out.encodings = gn.encodings;
    const bool per_example = spec.gate.is_per_example();
    NodeId combined;
    if (d == 1) {
      combined = per_example ? g.sum(g.mul(g.reshape(experts, {-1, 1, i64(n)}), gn.weights), 2)
                             : g.matmul(experts, gn.weights, true);  // [B, T]
    } else {
      NodeId w = per_example ? g.reshape(gn.weights, {-1, i64(tasks), i64(n), 1})
                             : g.reshape(gn.weights, {i64(tasks), i64(n), 1});
      combined = g.sum(g.mul(g.reshape(experts, {-1, 1, i64(n), i64(d)}), w), 2);  // [B, T, d]
    }
    for (std::size_t t = 0; t < tasks; ++t) {
      NodeId input = tasks == 1 && d == 1 ? combined : g.slice(combined, 1, t, t + 1);
      if (d > 1) input = g.reshape(input, {-1, i64(d)});
      preds.push_back(b.tower(t, input, d));
    }
  }
  out.predictions = b.cat(preds, 1);
  NodeId elementwise;
  if (spec.loss == LossKind::squared_error) {
    elementwise = g.square(g.sub(out.predictions, y));
  } else {
    // Binary cross-entropy on logits: softplus(z) - y z.
    elementwise = g.sub(g.softplus(out.predictions), g.mul(y, out.predictions));
  }
  out.task_losses = g.mean(elementwise, 0);
  out.loss = g.sum(g.mul(out.task_losses, task_weights));
  if (out.regularizer) out.loss = g.add(out.loss, *out.regularizer);
  return out;
}

TrainingGraph build_training_graph(const ModelSpec& spec) { return build_training_graph_impl(spec, {}); }

// --- model ----------------------------------------------------------------

MoeModel::MoeModel(ModelSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  gamma_now = spec_.gate.gamma;
  temperature_now = spec_.gate.temperature;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = stddev * standard_normal(rng);
  return t;
}

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

void init_dense(std::map<std::string, Tensor>& params, const std::string& prefix, std::size_t first_layer,
                std::size_t in, std::span<const std::size_t> widths, Rng& rng) {
  for (std::size_t l = 0; l < widths.size(); ++l) {
    const double he = std::sqrt(2.0 / static_cast<double>(in));
    params[layer_name(prefix, 'w', first_layer + l)] = normal_tensor(Shape{widths[l], in}, he, rng);
    params[layer_name(prefix, 'b', first_layer + l)] = Tensor(Shape{widths[l]});
    in = widths[l];
  }
}

}  // namespace

void MoeModel::initialize(Rng& rng) {
  const ModelSpec& s = spec_;
  const std::size_t p = s.input_dim;
  if (s.shared_bottom) {
    init_dense(params_, "bottom", 0, p, s.expert.widths, rng);
  } else {
    const GateSpec& gs = s.gate;
    const std::size_t n = gs.n_experts;
    const std::size_t k = gs.k;
    const std::size_t m = gate::encoding_bits(n);
    for (std::size_t i = 0; i < n; ++i) init_dense(params_, expert_prefix(i), 0, p, s.expert.widths, rng);
    const double gamma = gamma_now;
    for (std::size_t t = 0; t < s.tasks; ++t) {
      const std::string g = gate_prefix(t);
      switch (gs.kind) {
        case GateKind::dselect_static:
          params_[g + ".alpha"] = Tensor(Shape{k});
          params_[g + ".z"] = gate::init_z(k, m, gamma, rng);
          break;
        case GateKind::dselect_per_example: {
          // Linear encodings start inside the fractional region for typical x.
          const double w_scale = gamma / (4.0 * std::sqrt(static_cast<double>(p)));
          params_[g + ".G"] = normal_tensor(Shape{k, p}, 0.01, rng);
          if (gs.use_bias) params_[g + ".G_bias"] = Tensor(Shape{k});
          for (std::size_t i = 0; i < k; ++i) {
            const std::string wi = g + ".W" + std::to_string(i);
            params_[wi] = normal_tensor(Shape{m, p}, w_scale, rng);
            if (gs.use_bias) params_[wi + "_bias"] = uniform_tensor(Shape{m}, -gamma / 4.0, gamma / 4.0, rng);
          }
          break;
        }
        case GateKind::topk:
        case GateKind::softmax:
          if (gs.per_example) {
            params_[g + ".A"] = normal_tensor(Shape{n, p}, 0.01, rng);
            params_[g + ".b"] = normal_tensor(Shape{n}, 0.01, rng);
          } else {
            params_[g + ".logits"] = normal_tensor(Shape{n}, 0.01, rng);
          }
          break;
        case GateKind::gumbel:
          params_[g + ".alpha"] = Tensor(Shape{n});
          params_[g + ".psi_logits"] = Tensor(Shape{n}, 0.5);
          break;
        case GateKind::ablation_anneal:
        case GateKind::ablation_entropy:
          params_[g + ".alpha"] = Tensor(Shape{k});
          params_[g + ".beta"] = normal_tensor(Shape{k, n}, 0.01, rng);
          break;
      }
    }
  }
  if (!s.tower.identity) {
    const std::size_t d = s.expert_output_dim();
    for (std::size_t t = 0; t < s.tasks; ++t) {
      std::vector<std::size_t> widths = s.tower.hidden;
      const std::size_t in_last = widths.empty() ? d : widths.back();
      init_dense(params_, tower_prefix(t), 0, d, widths, rng);
      const std::size_t last = widths.size();
      params_[layer_name(tower_prefix(t), 'w', last)] =
          normal_tensor(Shape{1, in_last}, std::sqrt(1.0 / static_cast<double>(in_last)), rng);
      params_[layer_name(tower_prefix(t), 'b', last)] = Tensor(Shape{1});
    }
    if (!s.tower.trainable) {
      for (const auto& [name, _] : params_) {
        if (name.starts_with("tower")) frozen_.insert(name);
      }
    }
  }
  if (!s.expert.trainable) {
    for (const auto& [name, _] : params_) {
      if (name.starts_with("expert") || name.starts_with("bottom")) frozen_.insert(name);
    }
  }
}

const Tensor& MoeModel::parameter(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw BindingError("unknown parameter '" + name + "'");
  return it->second;
}

void MoeModel::set_parameter(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw BindingError("unknown parameter '" + name + "'");
  if (it->second.shape() != value.shape()) {
    throw ShapeError("parameter '" + name + "' expects shape " + shape_string(it->second.shape()) + ", got " +
                     shape_string(value.shape()));
  }
  it->second = std::move(value);
}

void MoeModel::freeze(const std::string& name) {
  if (!params_.contains(name)) throw BindingError("unknown parameter '" + name + "'");
  frozen_.insert(name);
  graph_.reset();
}

bool MoeModel::is_trainable(const std::string& name) const {
  return params_.contains(name) && !frozen_.contains(name);
}

std::size_t MoeModel::trainable_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) {
    if (!frozen_.contains(name)) total += t.size();
  }
  return total;
}

std::size_t MoeModel::gate_parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : params_) {
    if (name.starts_with("gate")) total += t.size();
  }
  return total;
}

const TrainingGraph& MoeModel::graph() const {
  if (!graph_) graph_ = build_training_graph_impl(spec_, frozen_);
  return *graph_;
}

void MoeModel::bind_parameters(Bindings& bindings) const {
  for (const auto& [name, t] : params_) bindings.bind(name, t);
  bindings.set(kTaskWeightLeaf, Tensor::vector(spec_.resolved_task_weights()));
  bindings.set(kInvGammaLeaf, Tensor::scalar(1.0 / gamma_now));
  bindings.set(kInvTemperatureLeaf, Tensor::scalar(1.0 / temperature_now));
}

// --- inference ------------------------------------------------------------

namespace {

std::vector<double> dense_relu(const Tensor& w, const Tensor& b, std::span<const double> in) {
  const std::size_t units = w.dim(0);
  std::vector<double> out(units);
  for (std::size_t u = 0; u < units; ++u) {
    double acc = b[u];
    for (std::size_t c = 0; c < in.size(); ++c) acc += w.at(u, c) * in[c];
    out[u] = acc > 0.0 ? acc : 0.0;
  }
  return out;
}

std::vector<double> tensor_values(const Tensor& t) { return t.values(); }

}  // namespace

Predictor::Predictor(const MoeModel& model) : model_(model) {
  const ModelSpec& s = model.spec();
  if (s.shared_bottom) return;
  const GateSpec& gs = s.gate;
  const auto& P = [&](const std::string& name) -> const Tensor& { return model.parameter(name); };
  for (std::size_t t = 0; t < s.tasks; ++t) {
    const std::string g = gate_prefix(t);
    switch (gs.kind) {
      case GateKind::dselect_static: {
        gate::StaticDSelectParams p;
        p.alpha = tensor_values(P(g + ".alpha"));
        p.z = P(g + ".z");
        p.gamma = model.gamma_now;
        p.lambda = gs.lambda;
        p.xi = gs.xi;
        p.n_experts = gs.n_experts;
        p.k = gs.k;
        static_dselect_.push_back(std::move(p));
        break;
      }
      case GateKind::dselect_per_example: {
        gate::PerExampleDSelectParams p;
        p.g = P(g + ".G");
        if (gs.use_bias) p.g_bias = tensor_values(P(g + ".G_bias"));
        for (std::size_t i = 0; i < gs.k; ++i) {
          const std::string wi = g + ".W" + std::to_string(i);
          p.w.push_back(P(wi));
          if (gs.use_bias) p.w_bias.push_back(tensor_values(P(wi + "_bias")));
        }
        p.gamma = model.gamma_now;
        p.lambda = gs.lambda;
        p.xi = gs.xi;
        p.n_experts = gs.n_experts;
        p.k = gs.k;
        p.input_dim = s.input_dim;
        p.validate();
        per_example_dselect_.push_back(std::move(p));
        break;
      }
      case GateKind::topk:
      case GateKind::softmax: {
        baseline::LinearGateParams p;
        p.k = gs.kind == GateKind::topk ? gs.k : gs.n_experts;
        p.is_static = !gs.per_example;
        if (gs.per_example) {
          p.a = P(g + ".A");
          p.b = tensor_values(P(g + ".b"));
        } else {
          p.b = tensor_values(P(g + ".logits"));
        }
        linear_.push_back(std::move(p));
        break;
      }
      case GateKind::gumbel: {
        baseline::GumbelGateParams p;
        p.alpha = tensor_values(P(g + ".alpha"));
        p.psi_logits = tensor_values(P(g + ".psi_logits"));
        p.temperature = model.temperature_now;
        p.lambda = gs.lambda;
        gumbel_.push_back(std::move(p));
        break;
      }
      case GateKind::ablation_anneal:
      case GateKind::ablation_entropy: {
        baseline::AblationGateParams p;
        p.alpha = tensor_values(P(g + ".alpha"));
        p.beta = P(g + ".beta");
        p.temperature = model.temperature_now;
        p.lambda = gs.lambda;
        ablation_.push_back(std::move(p));
        break;
      }
    }
  }
  if (!gs.is_per_example()) {
    const std::vector<double> none;
    for (std::size_t t = 0; t < s.tasks; ++t) {
      // Static gates ignore x; evaluate each once.
      static_cache_.push_back(gate(t, none));
    }
  }
}

GateEval Predictor::gate(std::size_t task, std::span<const double> x) const {
  const ModelSpec& s = model_.spec();
  if (s.shared_bottom) throw Error("shared-bottom models have no gates");
  if (task >= s.tasks) throw DomainError("task index " + std::to_string(task) + " out of range");
  if (task < static_cache_.size()) return static_cache_[task];
  const GateSpec& gs = s.gate;
  GateEval out;
  switch (gs.kind) {
    case GateKind::dselect_static: {
      const auto& p = static_dselect_[task];
      const auto r = gate::dselect_static(p);
      out.weights = r.weights;
      out.phantom_mass = r.phantom_mass;
      for (double v : p.z.data()) out.encodings.push_back(gate::smooth_step(v, p.gamma));
      break;
    }
    case GateKind::dselect_per_example: {
      const auto& p = per_example_dselect_[task];
      if (x.size() != s.input_dim) throw DomainError("input dimension mismatch");
      const auto r = gate::dselect_per_example(p, x);
      out.weights = r.weights;
      out.phantom_mass = r.phantom_mass;
      const std::size_t m = p.m();
      for (std::size_t i = 0; i < p.k; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
          double t = p.w_bias.empty() ? 0.0 : p.w_bias[i][j];
          for (std::size_t c = 0; c < x.size(); ++c) t += p.w[i].at(j, c) * x[c];
          out.encodings.push_back(gate::smooth_step(t, p.gamma));
        }
      }
      break;
    }
    case GateKind::topk:
      out.weights = baseline::topk_gate(linear_[task], x);
      break;
    case GateKind::softmax:
      out.weights = baseline::softmax_gate(linear_[task], x);
      break;
    case GateKind::gumbel: {
      Rng unused(0);
      out.weights = baseline::gumbel_gate_forward(gumbel_[task], unused, false);
      break;
    }
    case GateKind::ablation_anneal:
    case GateKind::ablation_entropy:
      out.weights = baseline::ablation_gate(ablation_[task]);
      break;
  }
#ifndef NDEBUG
  if (gs.kind != GateKind::gumbel) {
    double total = out.phantom_mass;
    for (double w : out.weights) total += w;
    if (!(std::abs(total - 1.0) <= 1e-9)) throw NumericError("gate weights left the simplex");
  }
#endif
  return out;
}

std::vector<double> Predictor::expert_output(std::size_t expert, std::span<const double> x) const {
  const ModelSpec& s = model_.spec();
  if (expert >= s.gate.n_experts) throw DomainError("expert index out of range");
  if (x.size() != s.input_dim) throw DomainError("input dimension mismatch");
  const std::string prefix = expert_prefix(expert);
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < s.expert.widths.size(); ++l) {
    h = dense_relu(model_.parameter(layer_name(prefix, 'w', l)), model_.parameter(layer_name(prefix, 'b', l)), h);
  }
  if (s.expert.output == ExpertOutput::sum) return {std::accumulate(h.begin(), h.end(), 0.0)};
  return h;
}

std::vector<double> Predictor::bottom_output(std::span<const double> x) const {
  const ModelSpec& s = model_.spec();
  if (!s.shared_bottom) throw Error("model has no shared bottom");
  if (x.size() != s.input_dim) throw DomainError("input dimension mismatch");
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < s.expert.widths.size(); ++l) {
    h = dense_relu(model_.parameter(layer_name("bottom", 'w', l)), model_.parameter(layer_name("bottom", 'b', l)), h);
  }
  return h;
}

double Predictor::tower(std::size_t task, std::span<const double> input) const {
  const ModelSpec& s = model_.spec();
  if (s.tower.identity) return input[0];
  const std::string prefix = tower_prefix(task);
  std::vector<double> h(input.begin(), input.end());
  for (std::size_t l = 0; l < s.tower.hidden.size(); ++l) {
    h = dense_relu(model_.parameter(layer_name(prefix, 'w', l)), model_.parameter(layer_name(prefix, 'b', l)), h);
  }
  const std::size_t last = s.tower.hidden.size();
  const Tensor& w = model_.parameter(layer_name(prefix, 'w', last));
  double out = model_.parameter(layer_name(prefix, 'b', last))[0];
  for (std::size_t c = 0; c < h.size(); ++c) out += w.at(0, c) * h[c];
  return out;
}

ForwardResult Predictor::forward(std::span<const double> x, std::size_t task) const {
  const ModelSpec& s = model_.spec();
  if (task >= s.tasks) throw DomainError("task index " + std::to_string(task) + " out of range");
  ForwardResult out;
  if (s.shared_bottom) {
    out.output = tower(task, bottom_output(x));
    return out;
  }
  const GateEval g = gate(task, x);
  std::vector<double> combined(s.expert_output_dim(), 0.0);
  for (std::size_t i = 0; i < g.weights.size(); ++i) {
    if (g.weights[i] == 0.0) continue;
    out.evaluated.push_back(i);
    const auto e = expert_output(i, x);
    for (std::size_t c = 0; c < e.size(); ++c) combined[c] += g.weights[i] * e[c];
  }
  out.output = tower(task, combined);
  return out;
}

std::vector<double> Predictor::predict(std::span<const double> x) const {
  const ModelSpec& s = model_.spec();
  std::vector<double> out(s.tasks);
  if (s.shared_bottom) {
    const auto h = bottom_output(x);
    for (std::size_t t = 0; t < s.tasks; ++t) out[t] = tower(t, h);
    return out;
  }
  std::vector<std::vector<double>> cache(s.gate.n_experts);
  const std::size_t d = s.expert_output_dim();
  for (std::size_t t = 0; t < s.tasks; ++t) {
    const GateEval g = gate(t, x);
    std::vector<double> combined(d, 0.0);
    for (std::size_t i = 0; i < g.weights.size(); ++i) {
      if (g.weights[i] == 0.0) continue;
      if (cache[i].empty()) cache[i] = expert_output(i, x);
      for (std::size_t c = 0; c < d; ++c) combined[c] += g.weights[i] * cache[i][c];
    }
    out[t] = tower(t, combined);
  }
  return out;
}

ForwardResult moe_forward(const MoeModel& model, std::span<const double> x, std::size_t task) {
  if (model.spec().shared_bottom) throw Error("moe_forward needs a mixture-of-experts model");
  return Predictor(model).forward(x, task);
}

double shared_bottom_forward(const MoeModel& model, std::span<const double> x, std::size_t task) {
  if (!model.spec().shared_bottom) throw Error("shared_bottom_forward needs a shared-bottom model");
  return Predictor(model).forward(x, task).output;
}

// --- recovery model -------------------------------------------------------

RecoveryModel build_recovery_model(const RecoverySource& source, const GateSpec& gate, Rng& rng,
                                   std::size_t n_experts) {
  const std::size_t copies = source.experts.size();
  if (copies == 0 || copies > n_experts) throw DomainError("recovery model: bad number of source experts");
  const Tensor& w0 = source.experts.front().w;
  const std::size_t units = w0.dim(0);
  const std::size_t p = w0.dim(1);

  ModelSpec spec;
  spec.input_dim = p;
  spec.tasks = 1;
  spec.expert.widths = {units};
  spec.expert.output = ExpertOutput::vector;
  spec.expert.trainable = false;
  spec.gate = gate;
  spec.gate.n_experts = n_experts;
  spec.gate.k = copies;
  spec.tower.trainable = true;
  spec.loss = LossKind::cross_entropy;

  // Expert placement comes from its own stream so that every gate kind sees
  // the same experts for the same rng state.
  Rng expert_rng(rng());
  MoeModel model(spec);
  model.initialize(rng);

  std::vector<std::size_t> positions(n_experts);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  std::shuffle(positions.begin(), positions.end(), expert_rng);
  positions.resize(copies);
  std::vector<bool> is_copy(n_experts, false);
  for (std::size_t c = 0; c < copies; ++c) {
    const std::size_t pos = positions[c];
    is_copy[pos] = true;
    model.set_parameter(layer_name(expert_prefix(pos), 'w', 0), source.experts[c].w);
    model.set_parameter(layer_name(expert_prefix(pos), 'b', 0), source.experts[c].b);
  }
  for (std::size_t i = 0; i < n_experts; ++i) {
    if (is_copy[i]) continue;
    model.set_parameter(layer_name(expert_prefix(i), 'w', 0), normal_tensor(Shape{units, p}, 1.0, expert_rng));
    model.set_parameter(layer_name(expert_prefix(i), 'b', 0), normal_tensor(Shape{units}, 1.0, expert_rng));
  }
  model.set_parameter(layer_name(tower_prefix(0), 'w', 0), Tensor(Shape{1, units}, source.head_w.values()));
  model.set_parameter(layer_name(tower_prefix(0), 'b', 0), Tensor::vector({source.head_b}));

  std::sort(positions.begin(), positions.end());
  return RecoveryModel{std::move(model), std::move(positions)};
}

}  // namespace dselect::model
