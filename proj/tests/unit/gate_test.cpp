#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dselect/error.hpp"
#include "dselect/gate.hpp"
#include "dselect/gate_graph.hpp"
#include "support/gradcheck.hpp"

namespace dselect::gate {
namespace {

double sum(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// --- smooth-step -----------------------------------------------------------

TEST(SmoothStep, Examples) {
  EXPECT_EQ(smooth_step(0.0, 1.0), 0.5);
  EXPECT_EQ(smooth_step(0.5, 1.0), 1.0);
  EXPECT_EQ(smooth_step(-0.5, 1.0), 0.0);
  // Independent evaluation of -2t^3 + 1.5t + 0.5 at t = 1/4.
  EXPECT_DOUBLE_EQ(smooth_step(0.25, 1.0), -2.0 / 64.0 + 0.375 + 0.5);
  EXPECT_DOUBLE_EQ(smooth_step(0.25, 1.0), 0.84375);
  EXPECT_EQ(smooth_step(100.0, 0.1), 1.0);
  EXPECT_EQ(smooth_step(-100.0, 0.1), 0.0);
}

TEST(SmoothStep, DerivativeAndErrors) {
  EXPECT_DOUBLE_EQ(smooth_step_derivative(0.0, 1.0), 1.5);
  EXPECT_EQ(smooth_step_derivative(0.5, 1.0), 0.0);
  EXPECT_EQ(smooth_step_derivative(-3.0, 2.0), 0.0);
  EXPECT_THROW(smooth_step(0.0, 0.0), DomainError);
  EXPECT_THROW(smooth_step(0.0, -1.0), DomainError);
}

TEST(SmoothStep, MonotoneAndSymmetric) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> d(-2.0, 2.0);
  for (int i = 0; i < 1000; ++i) {
    const double t = d(rng), gamma = 0.1 + std::abs(d(rng));
    EXPECT_NEAR(smooth_step(t, gamma) + smooth_step(-t, gamma), 1.0, 1e-15);
    EXPECT_LE(smooth_step(t, gamma), smooth_step(t + 0.01, gamma));
  }
}

// --- binary encodings and the selector ---------------------------------------

TEST(BinarySupport, Examples) {
  EXPECT_TRUE(binary_support(0).empty());
  EXPECT_EQ(binary_support(3), (std::vector<unsigned>{1, 2}));
  EXPECT_EQ(binary_support(5), (std::vector<unsigned>{1, 3}));
  EXPECT_EQ(binary_support(8), (std::vector<unsigned>{4}));
}

TEST(EncodingBits, CeilLog2) {
  EXPECT_EQ(encoding_bits(2), 1u);
  EXPECT_EQ(encoding_bits(3), 2u);
  EXPECT_EQ(encoding_bits(4), 2u);
  EXPECT_EQ(encoding_bits(6), 3u);
  EXPECT_EQ(encoding_bits(16), 4u);
  EXPECT_EQ(encoding_bits(17), 5u);
}

TEST(Selector, Examples) {
  EXPECT_EQ(selector(std::vector<double>{0, 0}), (std::vector<double>{1, 0, 0, 0}));
  EXPECT_EQ(selector(std::vector<double>{1, 1}), (std::vector<double>{0, 0, 0, 1}));
  EXPECT_EQ(selector(std::vector<double>{0.5, 0.5}), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
}

TEST(Selector, ExactOneHotForEveryCode) {
  for (std::size_t m = 1; m <= 5; ++m) {
    for (std::uint64_t l = 0; l < (1ULL << m); ++l) {
      std::vector<double> z(m);
      for (std::size_t j = 0; j < m; ++j) z[j] = static_cast<double>((l >> j) & 1U);
      const auto r = selector(z);
      ASSERT_EQ(r.size(), 1ULL << m);
      for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i], i == l ? 1.0 : 0.0) << "m=" << m << " l=" << l;
    }
  }
}

TEST(Selector, ProductFormula) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> d(0.0, 1.0);
  std::vector<double> z{d(rng), d(rng), d(rng)};
  const auto r = selector(z);
  for (std::uint64_t i = 0; i < 8; ++i) {
    double want = 1.0;
    std::vector<bool> on(3, false);
    for (unsigned b : binary_support(i)) on[b - 1] = true;
    for (std::size_t j = 0; j < 3; ++j) want *= on[j] ? z[j] : 1.0 - z[j];
    EXPECT_DOUBLE_EQ(r[i], want);
  }
}

TEST(Selector, SimplexOnRandomInputs) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t m = 1 + trial % 5;
    std::vector<double> s(m);
    for (double& v : s) v = smooth_step(d(rng), 1.0);
    const auto r = selector(s);
    for (double v : r) ASSERT_GE(v, 0.0);
    ASSERT_NEAR(sum(r), 1.0, 1e-9);
  }
}

TEST(Selector, RecursiveIdentity) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 1 + trial % 5;
    std::vector<double> v(t + 1);
    for (double& x : v) x = smooth_step(d(rng), 1.0);
    const auto full = selector(v);
    const auto head = selector(std::span<const double>(v.data(), t));
    const std::size_t half = 1ULL << t;
    for (std::size_t i = 0; i < half; ++i) {
      ASSERT_NEAR(full[i], head[i] * (1.0 - v[t]), 1e-12);
      ASSERT_NEAR(full[half + i], head[i] * v[t], 1e-12);
    }
  }
}

// --- static gate -----------------------------------------------------------

StaticDSelectParams static_params(std::size_t n, std::size_t k, double gamma = 1.0) {
  StaticDSelectParams p;
  p.n_experts = n;
  p.k = k;
  p.gamma = gamma;
  p.alpha.assign(k, 0.0);
  p.z = Tensor(Shape{k, encoding_bits(n)});
  return p;
}

TEST(StaticGate, Examples) {
  auto p = static_params(4, 1);
  p.z = Tensor::matrix(1, 2, {0.5, 0.5});  // S = [1, 1]
  EXPECT_EQ(dselect_static(p).weights, (std::vector<double>{0, 0, 0, 1}));

  auto q = static_params(4, 2);
  q.z = Tensor::matrix(2, 2, {-0.5, -0.5, -3.0, -1.0});  // both selectors on expert 1
  EXPECT_EQ(dselect_static(q).weights, (std::vector<double>{1, 0, 0, 0}));
}

TEST(StaticGate, SimplexWithPhantomMass) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 2 + trial % 31;
    const std::size_t k = 1 + trial % std::min<std::size_t>(n, 4);
    auto p = static_params(n, k);
    for (double& a : p.alpha) a = d(rng);
    for (double& z : p.z.data()) z = d(rng);
    const GateOutput out = dselect_static(p);
    ASSERT_EQ(out.weights.size(), n);
    for (double w : out.weights) ASSERT_GE(w, 0.0);
    ASSERT_NEAR(sum(out.weights) + out.phantom_mass, 1.0, 1e-9);
    if (std::has_single_bit(n)) ASSERT_EQ(out.phantom_mass, 0.0);
    for (const auto& r : out.selector_outputs) ASSERT_NEAR(sum(r), 1.0, 1e-9);
  }
}

TEST(StaticGate, CardinalityWhenBinary) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> d(0.0, 3.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 4 << (trial % 3);
    const std::size_t k = 1 + trial % 4;
    auto p = static_params(n, k);
    for (double& a : p.alpha) a = d(rng);
    for (double& z : p.z.data()) z = d(rng) > 0 ? 0.5 + std::abs(d(rng)) : -0.5 - std::abs(d(rng));
    const auto w = dselect_static(p).weights;
    EXPECT_LE(static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double v) { return v > 0.0; })), k);
  }
}

TEST(StaticGate, ValidateRejectsBadShapes) {
  auto p = static_params(4, 2);
  p.z = Tensor(Shape{2, 3});
  EXPECT_THROW(dselect_static(p), DomainError);
  auto q = static_params(4, 2);
  q.alpha.resize(3);
  EXPECT_THROW(dselect_static(q), DomainError);
  auto r = static_params(4, 2);
  r.gamma = 0.0;
  EXPECT_THROW(dselect_static(r), DomainError);
}

// --- per-example gate --------------------------------------------------------

PerExampleDSelectParams per_example_params(std::size_t n, std::size_t k, std::size_t p, bool bias) {
  PerExampleDSelectParams q;
  q.n_experts = n;
  q.k = k;
  q.input_dim = p;
  q.g = Tensor(Shape{k, p});
  q.w.assign(k, Tensor(Shape{encoding_bits(n), p}));
  if (bias) {
    q.g_bias.assign(k, 0.0);
    q.w_bias.assign(k, std::vector<double>(encoding_bits(n), 0.0));
  }
  return q;
}

TEST(PerExampleGate, ZeroParametersGiveUniform) {
  const auto p = per_example_params(4, 2, 3, false);
  const std::vector<double> x{0.3, -1.0, 2.0};
  const auto w = dselect_per_example(p, x).weights;
  for (double v : w) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(PerExampleGate, SaturatedSelectorsSelectAtMostK) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 500; ++trial) {
    auto p = per_example_params(8, 2, 3, true);
    for (double& v : p.g.data()) v = d(rng);
    // Zero W and saturating biases: every encoding is binary for any x.
    for (auto& b : p.w_bias) {
      for (double& v : b) v = d(rng) > 0 ? 5.0 : -5.0;
    }
    const std::vector<double> x{d(rng), d(rng), d(rng)};
    const auto w = dselect_per_example(p, x).weights;
    EXPECT_LE(std::count_if(w.begin(), w.end(), [](double v) { return v > 0.0; }), 2);
  }
}

TEST(PerExampleGate, SimplexOnRandomInputs) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t n = 3 + trial % 14;
    auto p = per_example_params(n, 2, 4, trial % 2 == 0);
    for (double& v : p.g.data()) v = d(rng);
    for (auto& w : p.w) {
      for (double& v : w.data()) v = d(rng);
    }
    const std::vector<double> x{d(rng), d(rng), d(rng), d(rng)};
    const GateOutput out = dselect_per_example(p, x);
    for (double v : out.weights) ASSERT_GE(v, 0.0);
    ASSERT_NEAR(sum(out.weights) + out.phantom_mass, 1.0, 1e-9);
  }
}

TEST(PerExampleGate, InputDimensionChecked) {
  const auto p = per_example_params(4, 2, 3, false);
  const std::vector<double> x{1.0, 2.0};
  EXPECT_THROW(dselect_per_example(p, x), DomainError);
}

// --- entropy and regularizers ---------------------------------------------------

TEST(Entropy, Examples) {
  EXPECT_EQ(entropy(std::vector<double>{0, 1, 0, 0}), 0.0);
  EXPECT_NEAR(entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}), 1.3862943611198906, 1e-12);
  EXPECT_NEAR(entropy(std::vector<double>{0.5, 0.5}), 0.69314718055994531, 1e-12);
  EXPECT_THROW(entropy(std::vector<double>{-0.1, 1.1}), DomainError);
}

TEST(OmegaStatic, Examples) {
  auto binary = static_params(4, 2);
  binary.z = Tensor::matrix(2, 2, {1.0, -1.0, -1.0, 1.0});
  EXPECT_EQ(omega_static(binary), 0.0);

  auto uniform = static_params(4, 1);  // z = 0, S = 0.5
  EXPECT_NEAR(omega_static(uniform), std::log(4.0), 1e-12);

  auto mixed = static_params(4, 2);
  mixed.z = Tensor::matrix(2, 2, {1.0, 1.0, 0.0, 0.0});
  EXPECT_NEAR(omega_static(mixed), std::log(4.0), 1e-12);
}

TEST(OmegaStatic, ZeroExactlyWhenBinary) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 2000; ++trial) {
    auto p = static_params(8, 2);
    bool binary = true;
    for (double& z : p.z.data()) {
      z = d(rng);
      if (std::abs(z) < 0.5) binary = false;
    }
    EXPECT_EQ(omega_static(p) == 0.0, binary);
  }
}

TEST(OmegaPerExample, Examples) {
  auto sat = per_example_params(4, 2, 2, true);
  for (auto& b : sat.w_bias) b.assign(2, 3.0);
  const std::vector<double> x{0.7, -0.2};
  EXPECT_EQ(omega_per_example(sat, x), 0.0);

  const auto zero = per_example_params(8, 2, 2, false);
  EXPECT_NEAR(omega_per_example(zero, x), 2.0 * 3.0 * std::log(2.0), 1e-12);
}

TEST(PhantomPenalty, Examples) {
  EXPECT_DOUBLE_EQ(phantom_penalty(std::vector<double>{0.5, 0.3, 0.2, 0.0}, 3, 2.5), 2.5);
  EXPECT_DOUBLE_EQ(phantom_penalty(std::vector<double>{0.25, 0.25, 0.5, 0.0}, 2, 2.0), 4.0);
  EXPECT_EQ(phantom_penalty(std::vector<double>{0.1, 0.2, 0.3, 0.4}, 4, 7.0), 0.0);
  EXPECT_DOUBLE_EQ(phantom_penalty(std::vector<double>{0.0, 0.0, 0.0, 1.0}, 3, 1.0), 1.0 / kPhantomFloor);
}

// --- sparse-weight construction -----------------------------------------------

TEST(Construct, Examples) {
  const auto one = construct_from_weights(std::vector<double>{1, 0, 0, 0}, 1, 1.0);
  EXPECT_EQ(one.alpha, std::vector<double>{0.0});
  EXPECT_EQ(dselect_static(one).weights, (std::vector<double>{1, 0, 0, 0}));

  const auto two = construct_from_weights(std::vector<double>{0.5, 0, 0.5, 0}, 2, 1.0);
  EXPECT_DOUBLE_EQ(two.alpha[0], std::log(0.5));
  EXPECT_DOUBLE_EQ(two.alpha[1], std::log(0.5));
  EXPECT_EQ(smooth_step(two.z.at(0, 0), 1.0), 0.0);
  EXPECT_EQ(smooth_step(two.z.at(0, 1), 1.0), 0.0);
  EXPECT_EQ(smooth_step(two.z.at(1, 0), 1.0), 0.0);
  EXPECT_EQ(smooth_step(two.z.at(1, 1), 1.0), 1.0);
  EXPECT_EQ(dselect_static(two).weights, (std::vector<double>{0.5, 0, 0.5, 0}));

  const auto repeated = construct_from_weights(std::vector<double>{1, 0, 0, 0}, 2, 1.0);
  EXPECT_DOUBLE_EQ(repeated.alpha[0], std::log(0.5));
  EXPECT_DOUBLE_EQ(repeated.alpha[1], std::log(0.5));
  EXPECT_EQ(dselect_static(repeated).weights, (std::vector<double>{1, 0, 0, 0}));
}

TEST(Construct, RoundTripRandomSparseTargets) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  const std::size_t ns[] = {4, 8, 16};
  int s_below_k = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = ns[trial % 3];
    const std::size_t k = 1 + (trial / 3) % 4;
    const std::size_t s = 1 + rng() % k;
    if (s < k) ++s_below_k;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    std::vector<double> w(n, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < s; ++i) total += (w[idx[i]] = u(rng));
    for (double& v : w) v /= total;
    const auto params = construct_from_weights(w, k, 0.5 + u(rng));
    const auto got = dselect_static(params).weights;
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(got[i], w[i], 1e-9) << "trial " << trial;
  }
  EXPECT_GT(s_below_k, 10);
}

TEST(Construct, Errors) {
  EXPECT_THROW(construct_from_weights(std::vector<double>{0.5, 0.5, 0, 0}, 1, 1.0), DomainError);
  EXPECT_THROW(construct_from_weights(std::vector<double>{0.5, 0.4, 0, 0}, 2, 1.0), DomainError);
  EXPECT_THROW(construct_from_weights(std::vector<double>{0.5, 0.5, 0}, 2, 1.0), DomainError);
}

TEST(InitZ, InsideFractionalRegion) {
  for (double gamma : {0.1, 1.0, 10.0}) {
    Rng rng(11);
    const Tensor z = init_z(4, 3, gamma, rng);
    EXPECT_EQ(z.shape(), (Shape{4, 3}));
    for (double v : z.data()) {
      EXPECT_LT(std::abs(v), 0.25 * gamma);
      const double s = smooth_step(v, gamma);
      EXPECT_GT(s, 0.0);
      EXPECT_LT(s, 1.0);
    }
    Rng again(11);
    EXPECT_TRUE(init_z(4, 3, gamma, again) == z);
  }
  Rng rng(1);
  EXPECT_THROW(init_z(2, 2, 0.0, rng), DomainError);
}

// --- graph versions against the reference routines ------------------------------

TEST(GateGraph, StaticMatchesReference) {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> d(0.0, 1.0);
  for (std::size_t n : {4u, 6u, 16u}) {
    for (std::size_t k : {1u, 3u}) {
      const std::vector<std::string> prefixes{"t0", "t1"};
      ExprGraph g;
      DSelectGraphOptions o;
      o.n_experts = n;
      o.k = k;
      o.gamma = 1.3;
      o.lambda = 0.2;
      o.xi = n == 6 ? 0.5 : 0.0;
      const GateNodes nodes = build_static_dselect(g, prefixes, o);
      Bindings b;
      std::vector<StaticDSelectParams> refs;
      for (const auto& prefix : prefixes) {
        auto p = static_params(n, k, o.gamma);
        p.lambda = o.lambda;
        p.xi = o.xi;
        for (double& a : p.alpha) a = d(rng);
        for (double& z : p.z.data()) z = d(rng);
        b.set(prefix + ".alpha", Tensor::vector(p.alpha));
        b.set(prefix + ".z", p.z);
        refs.push_back(p);
      }
      const NodeValues v = evaluate(g, b);
      const Tensor& w = v[nodes.weights.value];
      ASSERT_EQ(w.shape(), (Shape{2, n}));
      double reg = 0.0;
      for (std::size_t t = 0; t < 2; ++t) {
        const GateOutput ref = dselect_static(refs[t]);
        for (std::size_t e = 0; e < n; ++e) EXPECT_NEAR(w.at(t, e), ref.weights[e], 1e-12);
        reg += o.lambda * omega_static(refs[t]);
        for (const auto& r : ref.selector_outputs) reg += phantom_penalty(r, n, o.xi);
      }
      ASSERT_TRUE(nodes.regularizer.has_value());
      EXPECT_NEAR(v[nodes.regularizer->value].item(), reg, 1e-9);
    }
  }
}

TEST(GateGraph, PerExampleMatchesReference) {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> d(0.0, 1.0);
  const std::size_t n = 8, k = 2, p = 3, rows = 5;
  ExprGraph g;
  const NodeId x = g.constant("x", {kAnyDim, p});
  DSelectGraphOptions o;
  o.n_experts = n;
  o.k = k;
  o.gamma = 2.0;
  const std::vector<std::string> prefixes{"g"};
  const GateNodes nodes = build_per_example_dselect(g, x, p, prefixes, o);
  auto ref = per_example_params(n, k, p, true);
  ref.gamma = o.gamma;
  for (double& v : ref.g.data()) v = d(rng);
  for (double& v : ref.g_bias) v = d(rng);
  for (auto& w : ref.w) {
    for (double& v : w.data()) v = d(rng);
  }
  for (auto& wb : ref.w_bias) {
    for (double& v : wb) v = d(rng);
  }
  Bindings b;
  b.set("g.G", ref.g);
  b.set("g.G_bias", Tensor::vector(ref.g_bias));
  for (std::size_t i = 0; i < k; ++i) {
    b.set("g.W" + std::to_string(i), ref.w[i]);
    b.set("g.W" + std::to_string(i) + "_bias", Tensor::vector(ref.w_bias[i]));
  }
  Tensor xs(Shape{rows, p});
  for (double& v : xs.data()) v = d(rng);
  b.set("x", xs);
  const NodeValues values = evaluate(g, b);
  const Tensor& w = values[nodes.weights.value];
  ASSERT_EQ(w.shape(), (Shape{rows, 1, n}));
  for (std::size_t r = 0; r < rows; ++r) {
    const auto want = dselect_per_example(ref, std::span<const double>(xs.data().data() + r * p, p)).weights;
    for (std::size_t e = 0; e < n; ++e) EXPECT_NEAR(w[r * n + e], want[e], 1e-12);
  }
}

TEST(GateGraph, ZeroGradientAtSaturation) {
  ExprGraph g;
  DSelectGraphOptions o;
  o.n_experts = 8;
  o.k = 2;
  o.lambda = 0.3;
  const std::vector<std::string> prefixes{"t"};
  const GateNodes nodes = build_static_dselect(g, prefixes, o);
  const NodeId c = g.constant("c", {1, 8});
  const NodeId loss = g.add(g.sum(g.mul(g.square(nodes.weights), c)), *nodes.regularizer);
  Bindings b;
  b.set("t.alpha", Tensor::vector({0.3, -0.2}));
  // Row 0 fully saturated; row 1 saturated in its first entry (and exactly at
  // the knot in its last).
  b.set("t.z", Tensor::matrix(2, 3, {0.5, -0.7, 2.0, 0.9, 0.1, -0.5}));
  b.set("c", Tensor::matrix(1, 8, {1, 2, 3, 4, 5, 6, 7, 8}));
  const Tensor grad = gradient(g, loss, b).at("t.z");
  EXPECT_EQ(grad[0], 0.0);
  EXPECT_EQ(grad[1], 0.0);
  EXPECT_EQ(grad[2], 0.0);
  EXPECT_EQ(grad[3], 0.0);
  EXPECT_NE(grad[4], 0.0);
  EXPECT_EQ(grad[5], 0.0);
}

TEST(GateGraph, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> d(0.0, 0.4);
  int checked = 0;
  for (int attempt = 0; checked < 20 && attempt < 200; ++attempt) {
    const std::size_t n = 3 + attempt % 6, k = 1 + attempt % 3;
    const bool per_example = attempt % 2 == 1;
    ExprGraph g;
    DSelectGraphOptions o;
    o.n_experts = n;
    o.k = std::min(k, n);
    o.lambda = 0.1;
    o.xi = 0.2;
    const std::vector<std::string> prefixes{"a", "b"};
    const std::size_t p = 3, m = encoding_bits(n);
    const NodeId x = g.constant("x", {kAnyDim, p});
    const GateNodes nodes =
        per_example ? build_per_example_dselect(g, x, p, prefixes, o) : build_static_dselect(g, prefixes, o);
    const NodeId c = g.constant("c", {n});
    const NodeId loss = g.add(g.sum(g.mul(g.square(nodes.weights), c)), *nodes.regularizer);
    testing::ParamMap params;
    for (const NodeId& id : g.parameters()) {
      const Node& node = g.node(id);
      Tensor t(node.declared_shape);
      for (double& v : t.data()) v = d(rng);
      params[node.name] = t;
    }
    (void)m;
    Tensor xs(Shape{4, p});
    for (double& v : xs.data()) v = 2.0 * d(rng);
    Tensor cs(Shape{n});
    for (double& v : cs.data()) v = d(rng);
    const auto fixed = [&](Bindings& b) {
      b.bind("x", xs);
      b.bind("c", cs);
    };
    if (testing::near_kink(g, params, fixed, 1e-4)) continue;
    const auto result = testing::check_gradients(g, loss, params, fixed);
    EXPECT_LT(result.worst, 1e-4) << result.worst_param;
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(GateGraph, AnnealedGammaLeafMatchesFixedGamma) {
  const std::vector<std::string> prefixes{"t"};
  DSelectGraphOptions fixed;
  fixed.n_experts = 4;
  fixed.k = 2;
  fixed.gamma = 0.8;
  DSelectGraphOptions leaf = fixed;
  leaf.inv_gamma_leaf = "inv_gamma";
  ExprGraph g1, g2;
  const GateNodes a = build_static_dselect(g1, prefixes, fixed);
  const GateNodes b = build_static_dselect(g2, prefixes, leaf);
  Bindings bind;
  bind.set("t.alpha", Tensor::vector({0.1, 0.4}));
  bind.set("t.z", Tensor::matrix(2, 2, {0.1, -0.2, 0.35, 0.05}));
  bind.set("inv_gamma", Tensor::scalar(1.0 / 0.8));
  const auto wa = evaluate(g1, bind)[a.weights.value].values();
  const auto wb = evaluate(g2, bind)[b.weights.value].values();
  for (std::size_t i = 0; i < wa.size(); ++i) EXPECT_NEAR(wa[i], wb[i], 1e-14);
}

}  // namespace
}  // namespace dselect::gate
