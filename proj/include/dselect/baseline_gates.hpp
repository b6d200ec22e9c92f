#pragma once

// Comparison gates: dense softmax, Top-k, a Gumbel-softmax gate over binary
// expert switches, and the softmax-selector ablation of DSelect-k.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dselect/gate_graph.hpp"
#include "dselect/rng.hpp"
#include "dselect/tensor.hpp"

namespace dselect::baseline {

struct LinearGateParams {
  Tensor a;                // n x p; ignored when is_static
  std::vector<double> b;   // n
  std::size_t k = 1;       // Top-k only
  bool is_static = true;
};

std::vector<double> softmax_gate(const LinearGateParams& params, std::span<const double> x);

// Entries outside the k largest become -infinity; ties keep the lower index.
std::vector<double> keep_top_k(std::span<const double> v, std::size_t k);

// softmax(keep_top_k(Ax + b)): exactly k strictly positive entries.
std::vector<double> topk_gate(const LinearGateParams& params, std::span<const double> x);

struct GumbelGateParams {
  std::vector<double> alpha;       // expert weight logits
  std::vector<double> psi_logits;  // switch probabilities psi = sigmoid(psi_logits)
  double temperature = 1.0;
  double lambda = 0.0;

  std::vector<double> psi() const;
};

// Training: U_i is a binary-concrete sample at the configured temperature
// drawn from rng. Evaluation: U_i = 1 if psi_i > 0.5 else 0. Output
// softmax(alpha)_i * U_i.
std::vector<double> gumbel_gate_forward(const GumbelGateParams& params, Rng& rng, bool training);

// lambda * sum_i ln(psi_i).
double gumbel_sparsity_penalty(const GumbelGateParams& params);

double gumbel_expected_nonzeros(const GumbelGateParams& params);

struct AblationGateParams {
  std::vector<double> alpha;  // k
  Tensor beta;                // k x n selector logits
  double temperature = 1.0;
  double lambda = 0.0;        // entropy weight (entropy variant)
};

// sum_i softmax(alpha)_i softmax(beta_i / temperature).
std::vector<double> ablation_gate(const AblationGateParams& params);

// sum_i h(softmax(beta_i / temperature)).
double ablation_entropy(const AblationGateParams& params);

// --- graph builders -------------------------------------------------------

// Static: "<prefix>.logits" [n]. Per-example: "<prefix>.A" [n, p],
// "<prefix>.b" [n] with x [B, p]. top_k == 0 builds the dense softmax gate.
gate::GateNodes build_linear_gate(ExprGraph& graph, const NodeId* x, std::size_t input_dim,
                                  std::span<const std::string> prefixes, std::size_t n_experts, std::size_t top_k);

// "<prefix>.alpha" [n], "<prefix>.psi_logits" [n]. noise_leaf is bound to
// logistic noise [T, n] and inv_temperature_leaf to 1/temperature.
gate::GateNodes build_gumbel_gate(ExprGraph& graph, std::span<const std::string> prefixes, std::size_t n_experts,
                                  double lambda, const std::string& noise_leaf,
                                  const std::string& inv_temperature_leaf);

// "<prefix>.alpha" [k], "<prefix>.beta" [k, n]; lambda > 0 adds the
// selector entropy penalty.
gate::GateNodes build_ablation_gate(ExprGraph& graph, std::span<const std::string> prefixes, std::size_t n_experts,
                                    std::size_t k, double lambda, const std::string& inv_temperature_leaf);

}  // namespace dselect::baseline
