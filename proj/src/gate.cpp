#include "dselect/gate.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "dselect/error.hpp"

namespace dselect::gate {

double smooth_step(double t, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("smooth_step: gamma must be positive");
  const double half = 0.5 * gamma;
  if (t <= -half) return 0.0;
  if (t >= half) return 1.0;
  return (-2.0 / (gamma * gamma * gamma) * t * t + 1.5 / gamma) * t + 0.5;
}

double smooth_step_derivative(double t, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("smooth_step: gamma must be positive");
  const double half = 0.5 * gamma;
  if (t <= -half || t >= half) return 0.0;
  return -6.0 / (gamma * gamma * gamma) * t * t + 1.5 / gamma;
}

std::vector<unsigned> binary_support(std::uint64_t l) {
  std::vector<unsigned> out;
  for (unsigned bit = 1; l != 0; ++bit, l >>= 1) {
    if (l & 1U) out.push_back(bit);
  }
  return out;
}

std::size_t encoding_bits(std::size_t n_experts) {
  if (n_experts < 2) return 1;
  return static_cast<std::size_t>(std::bit_width(n_experts - 1));
}

std::vector<double> selector(std::span<const double> z) {
  const std::size_t m = z.size();
  if (m == 0 || m > 30) throw DomainError("selector: need 1 <= m <= 30 encoding variables");
  const std::size_t slots = std::size_t{1} << m;
  std::vector<double> r(slots);
  for (std::size_t i = 0; i < slots; ++i) {
    double prod = 1.0;
    for (std::size_t j = 0; j < m; ++j) prod *= ((i >> j) & 1U) ? z[j] : 1.0 - z[j];
    r[i] = prod;
  }
  return r;
}

void StaticDSelectParams::validate() const {
  if (n_experts < 2) throw DomainError("static gate: need at least 2 experts");
  if (k < 1 || k > n_experts) throw DomainError("static gate: k must be in [1, n]");
  if (!(gamma > 0.0)) throw DomainError("static gate: gamma must be positive");
  if (lambda < 0.0 || xi < 0.0) throw DomainError("static gate: lambda and xi must be non-negative");
  if (alpha.size() != k) throw DomainError("static gate: alpha must have k entries");
  if (z.shape() != Shape{k, m()}) {
    throw DomainError("static gate: Z must be " + shape_string({k, m()}) + ", got " + shape_string(z.shape()));
  }
}

void PerExampleDSelectParams::validate() const {
  if (n_experts < 2) throw DomainError("per-example gate: need at least 2 experts");
  if (k < 1 || k > n_experts) throw DomainError("per-example gate: k must be in [1, n]");
  if (!(gamma > 0.0)) throw DomainError("per-example gate: gamma must be positive");
  if (lambda < 0.0 || xi < 0.0) throw DomainError("per-example gate: lambda and xi must be non-negative");
  if (g.shape() != Shape{k, input_dim}) throw DomainError("per-example gate: G must be k x p");
  if (!g_bias.empty() && g_bias.size() != k) throw DomainError("per-example gate: G bias must have k entries");
  if (w.size() != k) throw DomainError("per-example gate: need k W matrices");
  for (const Tensor& wi : w) {
    if (wi.shape() != Shape{m(), input_dim}) throw DomainError("per-example gate: W matrices must be m x p");
  }
  if (!w_bias.empty()) {
    if (w_bias.size() != k) throw DomainError("per-example gate: need k W bias vectors");
    for (const auto& b : w_bias) {
      if (b.size() != m()) throw DomainError("per-example gate: W bias vectors must have m entries");
    }
  }
}

namespace {

std::vector<double> softmax(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  std::vector<double> out(v.size());
  double total = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) total += (out[i] = std::exp(v[i] - mx));
  for (double& o : out) o /= total;
  return out;
}

// Combines k selector outputs with softmax(alpha) mixing.
GateOutput combine(std::span<const double> alpha, std::vector<std::vector<double>> selectors, std::size_t n) {
  const std::vector<double> mix = softmax(alpha);
  const std::size_t slots = selectors.front().size();
  std::vector<double> full(slots, 0.0);
  for (std::size_t i = 0; i < selectors.size(); ++i) {
    for (std::size_t s = 0; s < slots; ++s) full[s] += mix[i] * selectors[i][s];
  }
  GateOutput out;
  out.weights.assign(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(n));
  for (std::size_t s = n; s < slots; ++s) out.phantom_mass += full[s];
  out.selector_outputs = std::move(selectors);
  return out;
}

}  // namespace

GateOutput dselect_static(const StaticDSelectParams& params) {
  params.validate();
  const std::size_t m = params.m();
  std::vector<std::vector<double>> selectors;
  selectors.reserve(params.k);
  std::vector<double> s(m);
  for (std::size_t i = 0; i < params.k; ++i) {
    for (std::size_t j = 0; j < m; ++j) s[j] = smooth_step(params.z.at(i, j), params.gamma);
    selectors.push_back(selector(s));
  }
  return combine(params.alpha, std::move(selectors), params.n_experts);
}

GateOutput dselect_per_example(const PerExampleDSelectParams& params, std::span<const double> x) {
  params.validate();
  if (x.size() != params.input_dim) {
    throw DomainError("per-example gate: input has " + std::to_string(x.size()) + " features, expected " +
                      std::to_string(params.input_dim));
  }
  const std::size_t m = params.m();
  const std::size_t p = params.input_dim;
  std::vector<double> alpha(params.k);
  for (std::size_t i = 0; i < params.k; ++i) {
    double v = params.g_bias.empty() ? 0.0 : params.g_bias[i];
    for (std::size_t c = 0; c < p; ++c) v += params.g.at(i, c) * x[c];
    alpha[i] = v;
  }
  std::vector<std::vector<double>> selectors;
  selectors.reserve(params.k);
  std::vector<double> s(m);
  for (std::size_t i = 0; i < params.k; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double v = params.w_bias.empty() ? 0.0 : params.w_bias[i][j];
      for (std::size_t c = 0; c < p; ++c) v += params.w[i].at(j, c) * x[c];
      s[j] = smooth_step(v, params.gamma);
    }
    selectors.push_back(selector(s));
  }
  return combine(alpha, std::move(selectors), params.n_experts);
}

double entropy(std::span<const double> p) {
  double total = 0.0;
  double h = 0.0;
  for (double v : p) {
    if (v < -1e-12) throw DomainError("entropy: negative probability " + std::to_string(v));
    total += v;
    if (v > 0.0) h -= v * std::log(v);
  }
  if (std::abs(total - 1.0) > 1e-6) throw DomainError("entropy: probabilities sum to " + std::to_string(total));
  return h;
}

double omega_static(const StaticDSelectParams& params) {
  double total = 0.0;
  for (const auto& r : dselect_static(params).selector_outputs) total += entropy(r);
  return total;
}

double omega_per_example(const PerExampleDSelectParams& params, std::span<const double> x) {
  double total = 0.0;
  for (const auto& r : dselect_per_example(params, x).selector_outputs) total += entropy(r);
  return total;
}

double phantom_penalty(std::span<const double> selector_output, std::size_t n_experts, double xi) {
  if (xi < 0.0) throw DomainError("phantom_penalty: xi must be non-negative");
  if (selector_output.size() <= n_experts) return 0.0;
  double mass = 0.0;
  for (std::size_t i = 0; i < n_experts; ++i) mass += selector_output[i];
  return xi / std::max(mass, kPhantomFloor);
}

StaticDSelectParams construct_from_weights(std::span<const double> w, std::size_t k, double gamma) {
  const std::size_t n = w.size();
  if (n < 2 || !std::has_single_bit(n)) throw DomainError("construct_from_weights: n must be a power of two >= 2");
  if (k < 1 || k > n) throw DomainError("construct_from_weights: k must be in [1, n]");
  if (!(gamma > 0.0)) throw DomainError("construct_from_weights: gamma must be positive");
  double total = 0.0;
  std::vector<std::size_t> nonzero;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] < 0.0) throw DomainError("construct_from_weights: negative weight");
    if (w[i] > 0.0) nonzero.push_back(i);
    total += w[i];
  }
  if (std::abs(total - 1.0) > 1e-9) throw DomainError("construct_from_weights: weights are not on the simplex");
  if (nonzero.size() > k) {
    throw DomainError("construct_from_weights: " + std::to_string(nonzero.size()) + " nonzeros exceed k = " +
                      std::to_string(k));
  }
  // Descending weight; equal weights keep ascending index order.
  std::stable_sort(nonzero.begin(), nonzero.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });

  const std::size_t s_star = nonzero.size();
  const std::size_t m = encoding_bits(n);
  StaticDSelectParams params;
  params.n_experts = n;
  params.k = k;
  params.gamma = gamma;
  params.alpha.resize(k);
  params.z = Tensor(Shape{k, m});
  for (std::size_t i = 0; i < k; ++i) {
    // Selectors past s* repeat the smallest nonzero expert.
    const std::size_t expert = nonzero[std::min(i, s_star - 1)];
    for (std::size_t j = 0; j < m; ++j) params.z.at(i, j) = ((expert >> j) & 1U) ? gamma : -gamma;
  }
  if (s_star == k) {
    for (std::size_t i = 0; i < k; ++i) params.alpha[i] = std::log(w[nonzero[i]]);
  } else {
    // The last k - s* + 1 selectors share the smallest weight equally.
    for (std::size_t i = 0; i + 1 < s_star; ++i) params.alpha[i] = std::log(w[nonzero[i]]);
    const double shared = std::log(w[nonzero[s_star - 1]] / static_cast<double>(k - s_star + 1));
    for (std::size_t i = s_star - 1; i < k; ++i) params.alpha[i] = shared;
  }
  return params;
}

Tensor init_z(std::size_t k, std::size_t m, double gamma, Rng& rng) {
  if (!(gamma > 0.0)) throw DomainError("init_z: gamma must be positive");
  Tensor z(Shape{k, m});
  std::uniform_real_distribution<double> dist(-0.25 * gamma, 0.25 * gamma);
  for (double& v : z.data()) v = dist(rng);
  return z;
}

}  // namespace dselect::gate
