#pragma once

// Differentiable DSelect-k gate fragments for ExprGraph.
//
// Builders take one name prefix per task and produce the gates of all tasks
// at once: parameters of the individual tasks are concatenated inside the
// graph so the selector arithmetic runs as a single batched block.

#include <optional>
#include <span>
#include <string>

#include "dselect/autodiff.hpp"

namespace dselect::gate {

// encodings: [rows, m] with values in [0, 1]. Returns [rows, 2^m], built by
// splitting on the highest encoding bit one level at a time.
NodeId build_selector(ExprGraph& graph, NodeId encodings, std::size_t m);

struct GateNodes {
  NodeId weights;                      // [T, n] static, [B, T, n] per-example
  std::optional<NodeId> regularizer;   // scalar penalty added to the loss
  std::optional<NodeId> selectors;     // DSelect-k selector outputs
  std::optional<NodeId> encodings;     // DSelect-k S(Z) or S(Wx)
};

struct DSelectGraphOptions {
  std::size_t n_experts = 2;
  std::size_t k = 1;
  double gamma = 1.0;
  double lambda = 0.0;
  double xi = 0.0;
  bool use_bias = true;  // per-example only
  // Non-empty: S is evaluated as S_1(t * v) where v is the bound scalar
  // constant of this name, so gamma = 1/v can be annealed per step.
  std::string inv_gamma_leaf;
};

// Parameters per prefix: "<prefix>.alpha" [k], "<prefix>.z" [k, m].
GateNodes build_static_dselect(ExprGraph& graph, std::span<const std::string> prefixes,
                               const DSelectGraphOptions& options);

// Parameters per prefix: "<prefix>.G" [k, p], "<prefix>.W<i>" [m, p] and,
// with biases, "<prefix>.G_bias" [k], "<prefix>.W<i>_bias" [m]. x is [B, p].
GateNodes build_per_example_dselect(ExprGraph& graph, NodeId x, std::size_t input_dim,
                                    std::span<const std::string> prefixes, const DSelectGraphOptions& options);

}  // namespace dselect::gate
