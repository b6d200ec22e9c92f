#pragma once

// Reverse-mode differentiation over dense tensors.
//
// An ExprGraph is built once through its builder methods and is immutable
// afterwards; every node's inputs precede it. Leaves are either trainable
// parameters or constants (frozen weights, data batches, schedule scalars),
// both bound by name at evaluation time. Shapes of interior nodes are
// inferred during evaluation, so one graph serves any batch size.
//
// Binary elementwise operations (add, sub, mul) broadcast with the usual
// trailing-axis alignment rules.

#include <compare>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dselect/tensor.hpp"

namespace dselect {

struct NodeId {
  std::uint32_t value = 0;
  friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class OpKind : std::uint8_t {
  parameter,
  constant,
  matmul,
  add,
  sub,
  mul,
  relu,
  softmax,
  top_k_softmax,
  smooth_step,
  log,
  exp,
  sigmoid,
  softplus,
  xlogx,
  reciprocal,
  square,
  sum,
  mean,
  concat,
  slice,
  reshape,
  scalar_mul,
  scalar_add,
};

const char* op_name(OpKind kind);

// Leaf shape entry that accepts any extent (typically the batch axis).
inline constexpr std::size_t kAnyDim = std::numeric_limits<std::size_t>::max();
// Reduction over every axis, producing a rank-0 tensor.
inline constexpr int kAllAxes = -1;

struct Node {
  OpKind kind = OpKind::constant;
  std::vector<NodeId> inputs;
  std::string name;       // leaves only
  Shape declared_shape;   // leaves only
  double scalar = 0.0;    // smooth_step gamma, scalar_mul/scalar_add operand, reciprocal floor
  std::size_t k = 0;      // top_k_softmax
  int axis = 0;           // sum, mean, concat, slice
  std::size_t begin = 0;  // slice
  std::size_t end = 0;    // slice
  std::vector<std::int64_t> target_shape;  // reshape; at most one -1
  bool transpose_b = false;                // matmul
  bool requires_grad = false;
};

class ExprGraph {
 public:
  NodeId parameter(std::string name, Shape shape);
  NodeId constant(std::string name, Shape shape);

  // a: [M, K] or [K]; b: [K, N] (or [N, K] when transpose_b) or [K].
  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);

  NodeId relu(NodeId x);
  NodeId softmax(NodeId x);                    // last axis
  NodeId top_k_softmax(NodeId x, std::size_t k);  // last axis, non-survivors exactly 0
  NodeId smooth_step(NodeId x, double gamma);
  NodeId log(NodeId x);
  NodeId exp(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId softplus(NodeId x);
  // x*ln(x), 0 at x = 0; derivative ln(x)+1, defined as 0 at x = 0.
  NodeId xlogx(NodeId x);
  // 1/max(x, floor); derivative 0 where the floor is active.
  NodeId reciprocal(NodeId x, double floor);
  NodeId square(NodeId x);

  NodeId sum(NodeId x, int axis = kAllAxes);
  NodeId mean(NodeId x, int axis = kAllAxes);
  NodeId concat(std::vector<NodeId> parts, int axis);
  NodeId slice(NodeId x, int axis, std::size_t begin, std::size_t end);
  NodeId reshape(NodeId x, std::vector<std::int64_t> shape);
  NodeId scalar_mul(NodeId x, double factor);
  NodeId scalar_add(NodeId x, double offset);

  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const Node& node(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  std::optional<NodeId> find(std::string_view leaf_name) const;
  const std::vector<NodeId>& parameters() const noexcept { return parameters_; }
  const std::vector<NodeId>& constants() const noexcept { return constants_; }

 private:
  NodeId leaf(OpKind kind, std::string name, Shape shape);
  NodeId push(Node node);

  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
  std::vector<NodeId> constants_;
  std::unordered_map<std::string, NodeId> leaf_index_;
};

// Name -> tensor map for graph leaves. bind() borrows (the caller keeps the
// tensor alive for the duration of evaluation); set() takes ownership.
class Bindings {
 public:
  void bind(const std::string& name, const Tensor& value);
  void set(const std::string& name, Tensor value);
  const Tensor* find(const std::string& name) const;

 private:
  std::unordered_map<std::string, const Tensor*> borrowed_;
  std::unordered_map<std::string, Tensor> owned_;
};

// Forward values, indexed by NodeId::value.
using NodeValues = std::vector<Tensor>;
using GradientMap = std::map<std::string, Tensor>;

struct ForwardBackward {
  NodeValues values;
  GradientMap gradients;  // one entry per trainable parameter
};

NodeValues evaluate(const ExprGraph& graph, const Bindings& bindings);
ForwardBackward evaluate_with_gradient(const ExprGraph& graph, NodeId loss, const Bindings& bindings);
GradientMap gradient(const ExprGraph& graph, NodeId loss, const Bindings& bindings);

// Central finite differences: (fn(p + eps e_i) - fn(p - eps e_i)) / (2 eps).
std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& fn,
                                     std::span<const double> point, double eps);

}  // namespace dselect
