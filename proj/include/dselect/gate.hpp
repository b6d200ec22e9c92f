#pragma once

// DSelect-k gate mathematics: smooth-step, binary encodings, the single
// expert selector, the static and per-example gates, their entropy
// regularizers, the phantom-slot penalty for non power-of-two expert counts,
// and the exact sparse-weight construction.
//
// These are plain double-precision reference routines. The differentiable
// versions used for training live in gate_graph.hpp and are tested against
// these.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dselect/rng.hpp"
#include "dselect/tensor.hpp"

namespace dselect::gate {

// Cubic smooth-step of width gamma; exactly 0 for t <= -gamma/2 and exactly 1
// for t >= gamma/2. Throws DomainError for gamma <= 0.
double smooth_step(double t, double gamma);
double smooth_step_derivative(double t, double gamma);

// Positions (least significant bit = 1) of the set bits of l.
std::vector<unsigned> binary_support(std::uint64_t l);

// Number of encoding bits for n experts: ceil(log2 n), at least 1.
std::size_t encoding_bits(std::size_t n_experts);

// r(z): entry i (1-based) is prod_{j in B(i-1)} z_j * prod_{j not in B(i-1)} (1 - z_j).
// Length 2^m for m = z.size().
std::vector<double> selector(std::span<const double> z);

struct StaticDSelectParams {
  std::vector<double> alpha;  // k selector mixing logits
  Tensor z;                   // k x m encoding variables
  double gamma = 1.0;
  double lambda = 0.0;
  double xi = 0.0;
  std::size_t n_experts = 2;
  std::size_t k = 1;

  std::size_t m() const { return encoding_bits(n_experts); }
  void validate() const;
};

struct PerExampleDSelectParams {
  Tensor g;                      // k x p
  std::vector<double> g_bias;    // k, empty when biases are disabled
  std::vector<Tensor> w;         // k matrices of m x p
  std::vector<std::vector<double>> w_bias;  // k vectors of m, empty when disabled
  double gamma = 1.0;
  double lambda = 0.0;
  double xi = 0.0;
  std::size_t n_experts = 2;
  std::size_t k = 1;
  std::size_t input_dim = 1;

  std::size_t m() const { return encoding_bits(n_experts); }
  void validate() const;
};

struct GateOutput {
  std::vector<double> weights;                        // n
  std::vector<std::vector<double>> selector_outputs;  // k vectors of 2^m
  double phantom_mass = 0.0;                          // mass on slots n+1..2^m
};

GateOutput dselect_static(const StaticDSelectParams& params);
GateOutput dselect_per_example(const PerExampleDSelectParams& params, std::span<const double> x);

// Natural-log entropy with 0 ln 0 = 0.
double entropy(std::span<const double> p);

double omega_static(const StaticDSelectParams& params);
double omega_per_example(const PerExampleDSelectParams& params, std::span<const double> x);

// xi / (mass on the first n entries), the denominator floored at 1e-6.
// Zero when the selector has no phantom slots.
double phantom_penalty(std::span<const double> selector_output, std::size_t n_experts, double xi);

inline constexpr double kPhantomFloor = 1e-6;

// Builds (alpha, Z) with binary S(Z) whose static gate reproduces w exactly.
// w must lie on the simplex, have at most k nonzeros, and n must be a power
// of two.
StaticDSelectParams construct_from_weights(std::span<const double> w, std::size_t k, double gamma);

// k x m matrix with entries uniform in (-gamma/4, gamma/4).
Tensor init_z(std::size_t k, std::size_t m, double gamma, Rng& rng);

}  // namespace dselect::gate
