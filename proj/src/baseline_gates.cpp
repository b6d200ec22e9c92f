#include "dselect/baseline_gates.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dselect/error.hpp"
#include "dselect/gate.hpp"

namespace dselect::baseline {

namespace {

std::vector<double> softmax(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  std::vector<double> out(v.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == -std::numeric_limits<double>::infinity()) continue;
    total += (out[i] = std::exp(v[i] - mx));
  }
  for (double& o : out) o /= total;
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<double> linear_logits(const LinearGateParams& params, std::span<const double> x) {
  const std::size_t n = params.b.size();
  std::vector<double> logits(params.b);
  if (params.is_static) return logits;
  if (params.a.rank() != 2 || params.a.dim(0) != n || params.a.dim(1) != x.size()) {
    throw DomainError("linear gate: A must be n x p with p = " + std::to_string(x.size()));
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < x.size(); ++c) logits[i] += params.a.at(i, c) * x[c];
  }
  return logits;
}

}  // namespace

std::vector<double> softmax_gate(const LinearGateParams& params, std::span<const double> x) {
  if (params.b.empty()) throw DomainError("softmax gate: no experts");
  return softmax(linear_logits(params, x));
}

std::vector<double> keep_top_k(std::span<const double> v, std::size_t k) {
  if (k < 1 || k > v.size()) throw DomainError("keep_top_k: k must be in [1, len(v)]");
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
  std::vector<double> out(v.size(), -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < k; ++i) out[idx[i]] = v[idx[i]];
  return out;
}

std::vector<double> topk_gate(const LinearGateParams& params, std::span<const double> x) {
  if (params.b.empty()) throw DomainError("top-k gate: no experts");
  return softmax(keep_top_k(linear_logits(params, x), params.k));
}

std::vector<double> GumbelGateParams::psi() const {
  std::vector<double> out(psi_logits.size());
  std::transform(psi_logits.begin(), psi_logits.end(), out.begin(), sigmoid);
  return out;
}

std::vector<double> gumbel_gate_forward(const GumbelGateParams& params, Rng& rng, bool training) {
  if (!(params.temperature > 0.0)) throw DomainError("gumbel gate: temperature must be positive");
  if (params.alpha.size() != params.psi_logits.size()) throw DomainError("gumbel gate: alpha and psi differ in size");
  std::vector<double> out = softmax(params.alpha);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    double u;
    if (training) {
      // Difference of two Gumbel draws is logistic: log(v) - log(1 - v).
      double v = unit(rng);
      v = std::clamp(v, 1e-12, 1.0 - 1e-12);
      const double noise = std::log(v) - std::log1p(-v);
      u = sigmoid((params.psi_logits[i] + noise) / params.temperature);
    } else {
      u = params.psi_logits[i] > 0.0 ? 1.0 : 0.0;
    }
    out[i] *= u;
  }
  return out;
}

double gumbel_sparsity_penalty(const GumbelGateParams& params) {
  double total = 0.0;
  for (double l : params.psi_logits) {
    // ln(sigmoid(l)) = -softplus(-l)
    total -= std::max(-l, 0.0) + std::log1p(std::exp(-std::abs(l)));
  }
  return params.lambda * total;
}

double gumbel_expected_nonzeros(const GumbelGateParams& params) {
  const auto psi = params.psi();
  return std::accumulate(psi.begin(), psi.end(), 0.0);
}

namespace {

std::vector<std::vector<double>> ablation_selectors(const AblationGateParams& params) {
  if (!(params.temperature > 0.0)) throw DomainError("ablation gate: temperature must be positive");
  const std::size_t k = params.alpha.size();
  if (k == 0 || params.beta.rank() != 2 || params.beta.dim(0) != k) {
    throw DomainError("ablation gate: beta must be k x n");
  }
  const std::size_t n = params.beta.dim(1);
  std::vector<std::vector<double>> out;
  std::vector<double> row(n);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < n; ++j) row[j] = params.beta.at(i, j) / params.temperature;
    out.push_back(softmax(row));
  }
  return out;
}

}  // namespace

std::vector<double> ablation_gate(const AblationGateParams& params) {
  const auto selectors = ablation_selectors(params);
  const auto mix = softmax(params.alpha);
  std::vector<double> out(selectors.front().size(), 0.0);
  for (std::size_t i = 0; i < selectors.size(); ++i) {
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += mix[i] * selectors[i][j];
  }
  return out;
}

double ablation_entropy(const AblationGateParams& params) {
  double total = 0.0;
  for (const auto& s : ablation_selectors(params)) total += gate::entropy(s);
  return total;
}

// --- graph builders -------------------------------------------------------

namespace {

NodeId cat(ExprGraph& graph, const std::vector<NodeId>& parts) {
  return parts.size() == 1 ? parts.front() : graph.concat(parts, 0);
}

NodeId scalar_leaf(ExprGraph& graph, const std::string& name) {
  if (auto id = graph.find(name)) return *id;
  return graph.constant(name, Shape{});
}

std::int64_t i64(std::size_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

gate::GateNodes build_linear_gate(ExprGraph& graph, const NodeId* x, std::size_t input_dim,
                                  std::span<const std::string> prefixes, std::size_t n_experts, std::size_t top_k) {
  const std::size_t tasks = prefixes.size();
  if (tasks == 0 || n_experts < 1) throw DomainError("linear gate graph: need tasks and experts");
  if (top_k > n_experts) throw DomainError("linear gate graph: k exceeds n");
  NodeId logits;
  if (x == nullptr) {
    std::vector<NodeId> parts;
    for (const auto& prefix : prefixes) parts.push_back(graph.parameter(prefix + ".logits", Shape{n_experts}));
    logits = graph.reshape(cat(graph, parts), {i64(tasks), i64(n_experts)});
  } else {
    std::vector<NodeId> as, bs;
    for (const auto& prefix : prefixes) {
      as.push_back(graph.parameter(prefix + ".A", Shape{n_experts, input_dim}));
      bs.push_back(graph.parameter(prefix + ".b", Shape{n_experts}));
    }
    logits = graph.add(graph.matmul(*x, cat(graph, as), true), cat(graph, bs));
    logits = graph.reshape(logits, {-1, i64(tasks), i64(n_experts)});
  }
  NodeId weights = top_k == 0 ? graph.softmax(logits) : graph.top_k_softmax(logits, top_k);
  return gate::GateNodes{weights, std::nullopt, std::nullopt, std::nullopt};
}

gate::GateNodes build_gumbel_gate(ExprGraph& graph, std::span<const std::string> prefixes, std::size_t n_experts,
                                  double lambda, const std::string& noise_leaf,
                                  const std::string& inv_temperature_leaf) {
  const std::size_t tasks = prefixes.size();
  if (tasks == 0 || n_experts < 1) throw DomainError("gumbel gate graph: need tasks and experts");
  std::vector<NodeId> alphas, psis;
  for (const auto& prefix : prefixes) {
    alphas.push_back(graph.parameter(prefix + ".alpha", Shape{n_experts}));
    psis.push_back(graph.parameter(prefix + ".psi_logits", Shape{n_experts}));
  }
  const std::vector<std::int64_t> shape{i64(tasks), i64(n_experts)};
  NodeId mix = graph.softmax(graph.reshape(cat(graph, alphas), shape));
  NodeId psi_logits = graph.reshape(cat(graph, psis), shape);
  NodeId noise = graph.constant(noise_leaf, Shape{tasks, n_experts});
  NodeId switches = graph.sigmoid(graph.mul(graph.add(psi_logits, noise), scalar_leaf(graph, inv_temperature_leaf)));
  gate::GateNodes out{graph.mul(mix, switches), std::nullopt, std::nullopt, std::nullopt};
  if (lambda > 0.0) {
    // lambda * sum ln(psi) = -lambda * sum softplus(-l)
    out.regularizer = graph.scalar_mul(graph.sum(graph.softplus(graph.scalar_mul(psi_logits, -1.0))), -lambda);
  }
  return out;
}

gate::GateNodes build_ablation_gate(ExprGraph& graph, std::span<const std::string> prefixes, std::size_t n_experts,
                                    std::size_t k, double lambda, const std::string& inv_temperature_leaf) {
  const std::size_t tasks = prefixes.size();
  if (tasks == 0 || n_experts < 1 || k < 1) throw DomainError("ablation gate graph: bad sizes");
  std::vector<NodeId> alphas, betas;
  for (const auto& prefix : prefixes) {
    alphas.push_back(graph.parameter(prefix + ".alpha", Shape{k}));
    betas.push_back(graph.parameter(prefix + ".beta", Shape{k, n_experts}));
  }
  NodeId mix = graph.softmax(graph.reshape(cat(graph, alphas), {i64(tasks), i64(k)}));
  NodeId selectors = graph.softmax(graph.mul(cat(graph, betas), scalar_leaf(graph, inv_temperature_leaf)));
  NodeId weighted = graph.mul(graph.reshape(selectors, {i64(tasks), i64(k), i64(n_experts)}),
                              graph.reshape(mix, {i64(tasks), i64(k), 1}));
  gate::GateNodes out{graph.sum(weighted, 1), std::nullopt, selectors, std::nullopt};
  if (lambda > 0.0) out.regularizer = graph.scalar_mul(graph.sum(graph.xlogx(selectors)), -lambda);
  return out;
}

}  // namespace dselect::baseline
