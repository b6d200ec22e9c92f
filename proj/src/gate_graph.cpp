#include "dselect/gate_graph.hpp"

#include <cstdint>
#include <vector>

#include "dselect/error.hpp"
#include "dselect/gate.hpp"

namespace dselect::gate {

NodeId build_selector(ExprGraph& graph, NodeId encodings, std::size_t m) {
  if (m == 0) throw DomainError("build_selector: m must be positive");
  NodeId r{};
  for (std::size_t j = 0; j < m; ++j) {
    NodeId s = graph.slice(encodings, 1, j, j + 1);
    NodeId off = graph.scalar_add(graph.scalar_mul(s, -1.0), 1.0);
    if (j == 0) {
      r = graph.concat({off, s}, 1);
    } else {
      r = graph.concat({graph.mul(r, off), graph.mul(r, s)}, 1);
    }
  }
  return r;
}

namespace {

NodeId apply_smooth_step(ExprGraph& graph, NodeId z, const DSelectGraphOptions& options) {
  if (options.inv_gamma_leaf.empty()) return graph.smooth_step(z, options.gamma);
  NodeId inv = graph.find(options.inv_gamma_leaf).value_or(NodeId{UINT32_MAX});
  if (inv.value == UINT32_MAX) inv = graph.constant(options.inv_gamma_leaf, Shape{});
  return graph.smooth_step(graph.mul(z, inv), 1.0);
}

void check(const DSelectGraphOptions& o, std::size_t tasks) {
  if (tasks == 0) throw DomainError("gate graph: need at least one task");
  if (o.n_experts < 2) throw DomainError("gate graph: need at least 2 experts");
  if (o.k < 1 || o.k > o.n_experts) throw DomainError("gate graph: k must be in [1, n]");
  if (!(o.gamma > 0.0)) throw DomainError("gate graph: gamma must be positive");
  if (o.lambda < 0.0 || o.xi < 0.0) throw DomainError("gate graph: lambda and xi must be non-negative");
}

std::int64_t i64(std::size_t v) { return static_cast<std::int64_t>(v); }

}  // namespace

GateNodes build_static_dselect(ExprGraph& graph, std::span<const std::string> prefixes,
                               const DSelectGraphOptions& options) {
  check(options, prefixes.size());
  const std::size_t tasks = prefixes.size();
  const std::size_t k = options.k;
  const std::size_t m = encoding_bits(options.n_experts);
  const std::size_t slots = std::size_t{1} << m;

  std::vector<NodeId> alphas, zs;
  for (const std::string& prefix : prefixes) {
    alphas.push_back(graph.parameter(prefix + ".alpha", Shape{k}));
    zs.push_back(graph.parameter(prefix + ".z", Shape{k, m}));
  }
  NodeId alpha = tasks == 1 ? alphas.front() : graph.concat(alphas, 0);
  NodeId mix = graph.softmax(graph.reshape(alpha, {i64(tasks), i64(k)}));
  NodeId z = tasks == 1 ? zs.front() : graph.concat(zs, 0);
  NodeId encodings = apply_smooth_step(graph, z, options);
  NodeId selectors = build_selector(graph, encodings, m);

  NodeId weighted = graph.mul(graph.reshape(selectors, {i64(tasks), i64(k), i64(slots)}),
                              graph.reshape(mix, {i64(tasks), i64(k), 1}));
  NodeId full = graph.sum(weighted, 1);
  NodeId weights = slots == options.n_experts ? full : graph.slice(full, 1, 0, options.n_experts);

  GateNodes out{weights, std::nullopt, selectors, encodings};
  std::vector<NodeId> penalties;
  if (options.lambda > 0.0) {
    penalties.push_back(graph.scalar_mul(graph.sum(graph.xlogx(selectors)), -options.lambda));
  }
  if (options.xi > 0.0 && slots > options.n_experts) {
    NodeId mass = graph.sum(graph.slice(selectors, 1, 0, options.n_experts), 1);
    penalties.push_back(graph.scalar_mul(graph.sum(graph.reciprocal(mass, kPhantomFloor)), options.xi));
  }
  if (!penalties.empty()) {
    NodeId total = penalties.front();
    for (std::size_t i = 1; i < penalties.size(); ++i) total = graph.add(total, penalties[i]);
    out.regularizer = total;
  }
  return out;
}

GateNodes build_per_example_dselect(ExprGraph& graph, NodeId x, std::size_t input_dim,
                                    std::span<const std::string> prefixes, const DSelectGraphOptions& options) {
  check(options, prefixes.size());
  const std::size_t tasks = prefixes.size();
  const std::size_t k = options.k;
  const std::size_t m = encoding_bits(options.n_experts);
  const std::size_t slots = std::size_t{1} << m;
  const std::size_t p = input_dim;

  std::vector<NodeId> gs, g_biases, ws, w_biases;
  for (const std::string& prefix : prefixes) {
    gs.push_back(graph.parameter(prefix + ".G", Shape{k, p}));
    if (options.use_bias) g_biases.push_back(graph.parameter(prefix + ".G_bias", Shape{k}));
    for (std::size_t i = 0; i < k; ++i) {
      ws.push_back(graph.parameter(prefix + ".W" + std::to_string(i), Shape{m, p}));
      if (options.use_bias) w_biases.push_back(graph.parameter(prefix + ".W" + std::to_string(i) + "_bias", Shape{m}));
    }
  }
  const auto cat = [&](const std::vector<NodeId>& parts) { return parts.size() == 1 ? parts.front() : graph.concat(parts, 0); };

  NodeId logits = graph.matmul(x, cat(gs), true);  // [B, T*k]
  if (options.use_bias) logits = graph.add(logits, cat(g_biases));
  NodeId mix = graph.softmax(graph.reshape(logits, {-1, i64(tasks), i64(k)}));

  NodeId zlin = graph.matmul(x, cat(ws), true);  // [B, T*k*m]
  if (options.use_bias) zlin = graph.add(zlin, cat(w_biases));
  NodeId encodings = apply_smooth_step(graph, graph.reshape(zlin, {-1, i64(m)}), options);
  NodeId selectors = build_selector(graph, encodings, m);  // [B*T*k, slots]

  NodeId weighted = graph.mul(graph.reshape(selectors, {-1, i64(tasks), i64(k), i64(slots)}),
                              graph.reshape(mix, {-1, i64(tasks), i64(k), 1}));
  NodeId full = graph.sum(weighted, 2);  // [B, T, slots]
  NodeId weights = slots == options.n_experts ? full : graph.slice(full, 2, 0, options.n_experts);

  GateNodes out{weights, std::nullopt, selectors, encodings};
  std::vector<NodeId> penalties;
  const std::int64_t per_row = i64(tasks * k);
  if (options.lambda > 0.0) {
    NodeId ent = graph.sum(graph.reshape(graph.xlogx(selectors), {-1, per_row * i64(slots)}), 1);
    penalties.push_back(graph.scalar_mul(graph.mean(ent), -options.lambda));
  }
  if (options.xi > 0.0 && slots > options.n_experts) {
    NodeId mass = graph.sum(graph.slice(selectors, 1, 0, options.n_experts), 1);
    NodeId per_example = graph.sum(graph.reshape(graph.reciprocal(mass, kPhantomFloor), {-1, per_row}), 1);
    penalties.push_back(graph.scalar_mul(graph.mean(per_example), options.xi));
  }
  if (!penalties.empty()) {
    NodeId total = penalties.front();
    for (std::size_t i = 1; i < penalties.size(); ++i) total = graph.add(total, penalties[i]);
    out.regularizer = total;
  }
  return out;
}

}  // namespace dselect::gate
