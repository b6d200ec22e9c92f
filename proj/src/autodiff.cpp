#include "dselect/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dselect/error.hpp"
#include "dselect/kernels.hpp"

namespace dselect {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::parameter: return "parameter";
    case OpKind::constant: return "constant";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::relu: return "relu";
    case OpKind::softmax: return "softmax";
    case OpKind::top_k_softmax: return "top_k_softmax";
    case OpKind::smooth_step: return "smooth_step";
    case OpKind::log: return "log";
    case OpKind::exp: return "exp";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::softplus: return "softplus";
    case OpKind::xlogx: return "xlogx";
    case OpKind::reciprocal: return "reciprocal";
    case OpKind::square: return "square";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::reshape: return "reshape";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::scalar_add: return "scalar_add";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph construction

const Node& ExprGraph::node(NodeId id) const {
  if (id.value >= nodes_.size()) {
    throw Error("unknown node id " + std::to_string(id.value));
  }
  return nodes_[id.value];
}

std::optional<NodeId> ExprGraph::find(std::string_view leaf_name) const {
  auto it = leaf_index_.find(std::string(leaf_name));
  if (it == leaf_index_.end()) return std::nullopt;
  return it->second;
}

NodeId ExprGraph::leaf(OpKind kind, std::string name, Shape shape) {
  if (name.empty()) throw Error("graph leaves need a name");
  if (leaf_index_.contains(name)) throw Error("duplicate graph leaf '" + name + "'");
  Node node;
  node.kind = kind;
  node.name = name;
  node.declared_shape = std::move(shape);
  node.requires_grad = kind == OpKind::parameter;
  NodeId id = push(std::move(node));
  leaf_index_.emplace(std::move(name), id);
  (kind == OpKind::parameter ? parameters_ : constants_).push_back(id);
  return id;
}

NodeId ExprGraph::push(Node node) {
  for (NodeId in : node.inputs) {
    if (in.value >= nodes_.size()) throw Error("node input refers to unknown node " + std::to_string(in.value));
    node.requires_grad = node.requires_grad || nodes_[in.value].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

NodeId ExprGraph::parameter(std::string name, Shape shape) {
  return leaf(OpKind::parameter, std::move(name), std::move(shape));
}

NodeId ExprGraph::constant(std::string name, Shape shape) {
  return leaf(OpKind::constant, std::move(name), std::move(shape));
}

namespace {

Node unary(OpKind kind, NodeId x) {
  Node n;
  n.kind = kind;
  n.inputs = {x};
  return n;
}

Node binary(OpKind kind, NodeId a, NodeId b) {
  Node n;
  n.kind = kind;
  n.inputs = {a, b};
  return n;
}

}  // namespace

NodeId ExprGraph::matmul(NodeId a, NodeId b, bool transpose_b) {
  Node n = binary(OpKind::matmul, a, b);
  n.transpose_b = transpose_b;
  return push(std::move(n));
}

NodeId ExprGraph::add(NodeId a, NodeId b) { return push(binary(OpKind::add, a, b)); }
NodeId ExprGraph::sub(NodeId a, NodeId b) { return push(binary(OpKind::sub, a, b)); }
NodeId ExprGraph::mul(NodeId a, NodeId b) { return push(binary(OpKind::mul, a, b)); }
NodeId ExprGraph::relu(NodeId x) { return push(unary(OpKind::relu, x)); }
NodeId ExprGraph::softmax(NodeId x) { return push(unary(OpKind::softmax, x)); }

NodeId ExprGraph::top_k_softmax(NodeId x, std::size_t k) {
  if (k == 0) throw DomainError("top_k_softmax needs k >= 1");
  Node n = unary(OpKind::top_k_softmax, x);
  n.k = k;
  return push(std::move(n));
}

NodeId ExprGraph::smooth_step(NodeId x, double gamma) {
  if (!(gamma > 0.0)) throw DomainError("smooth_step needs gamma > 0");
  Node n = unary(OpKind::smooth_step, x);
  n.scalar = gamma;
  return push(std::move(n));
}

NodeId ExprGraph::log(NodeId x) { return push(unary(OpKind::log, x)); }
NodeId ExprGraph::exp(NodeId x) { return push(unary(OpKind::exp, x)); }
NodeId ExprGraph::sigmoid(NodeId x) { return push(unary(OpKind::sigmoid, x)); }
NodeId ExprGraph::softplus(NodeId x) { return push(unary(OpKind::softplus, x)); }
NodeId ExprGraph::xlogx(NodeId x) { return push(unary(OpKind::xlogx, x)); }

NodeId ExprGraph::reciprocal(NodeId x, double floor) {
  if (!(floor > 0.0)) throw DomainError("reciprocal floor must be positive");
  Node n = unary(OpKind::reciprocal, x);
  n.scalar = floor;
  return push(std::move(n));
}

NodeId ExprGraph::square(NodeId x) { return push(unary(OpKind::square, x)); }

NodeId ExprGraph::sum(NodeId x, int axis) {
  Node n = unary(OpKind::sum, x);
  n.axis = axis;
  return push(std::move(n));
}

NodeId ExprGraph::mean(NodeId x, int axis) {
  Node n = unary(OpKind::mean, x);
  n.axis = axis;
  return push(std::move(n));
}

NodeId ExprGraph::concat(std::vector<NodeId> parts, int axis) {
  if (parts.empty()) throw Error("concat of zero inputs");
  Node n;
  n.kind = OpKind::concat;
  n.inputs = std::move(parts);
  n.axis = axis;
  return push(std::move(n));
}

NodeId ExprGraph::slice(NodeId x, int axis, std::size_t begin, std::size_t end) {
  if (begin >= end) throw Error("empty slice");
  Node n = unary(OpKind::slice, x);
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

NodeId ExprGraph::reshape(NodeId x, std::vector<std::int64_t> shape) {
  if (std::count(shape.begin(), shape.end(), -1) > 1) throw Error("reshape allows one inferred axis");
  Node n = unary(OpKind::reshape, x);
  n.target_shape = std::move(shape);
  return push(std::move(n));
}

NodeId ExprGraph::scalar_mul(NodeId x, double factor) {
  Node n = unary(OpKind::scalar_mul, x);
  n.scalar = factor;
  return push(std::move(n));
}

NodeId ExprGraph::scalar_add(NodeId x, double offset) {
  Node n = unary(OpKind::scalar_add, x);
  n.scalar = offset;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Bindings

void Bindings::bind(const std::string& name, const Tensor& value) {
  owned_.erase(name);
  borrowed_[name] = &value;
}

void Bindings::set(const std::string& name, Tensor value) {
  borrowed_.erase(name);
  owned_.insert_or_assign(name, std::move(value));
}

const Tensor* Bindings::find(const std::string& name) const {
  if (auto it = owned_.find(name); it != owned_.end()) return &it->second;
  if (auto it = borrowed_.find(name); it != borrowed_.end()) return it->second;
  return nullptr;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::string describe(const ExprGraph& graph, std::size_t id) {
  const Node& n = graph.nodes()[id];
  std::string out = "node " + std::to_string(id) + " (" + op_name(n.kind);
  if (!n.name.empty()) out += " '" + n.name + "'";
  return out + ")";
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_stride;
  std::vector<std::size_t> b_stride;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const std::string& where) {
  const std::size_t rank = std::max(a.size(), b.size());
  Broadcast plan;
  plan.out.assign(rank, 1);
  plan.a_stride.assign(rank, 0);
  plan.b_stride.assign(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t axis = rank - 1 - i;
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(where + ": cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    plan.out[axis] = std::max(da, db);
    plan.a_stride[axis] = da == 1 ? 0 : sa;
    plan.b_stride[axis] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  return plan;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& plan, F&& f) {
  const std::size_t total = shape_size(plan.out);
  if (total == 0) return;
  const std::size_t rank = plan.out.size();
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t inner = plan.out[rank - 1];
  const std::size_t inner_a = plan.a_stride[rank - 1];
  const std::size_t inner_b = plan.b_stride[rank - 1];
  std::size_t ia = 0, ib = 0, o = 0;
  while (true) {
    std::size_t ja = ia, jb = ib;
    for (std::size_t j = 0; j < inner; ++j, ja += inner_a, jb += inner_b) f(o++, ja, jb);
    int axis = static_cast<int>(rank) - 2;
    for (; axis >= 0; --axis) {
      ++idx[axis];
      ia += plan.a_stride[axis];
      ib += plan.b_stride[axis];
      if (idx[axis] < plan.out[axis]) break;
      ia -= plan.a_stride[axis] * plan.out[axis];
      ib -= plan.b_stride[axis] * plan.out[axis];
      idx[axis] = 0;
    }
    if (axis < 0) break;
  }
}

bool leaf_shape_matches(const Shape& declared, const Shape& actual) {
  if (declared.size() != actual.size()) return false;
  for (std::size_t i = 0; i < declared.size(); ++i) {
    if (declared[i] != kAnyDim && declared[i] != actual[i]) return false;
  }
  return true;
}

std::size_t resolve_axis(int axis, std::size_t rank, const std::string& where) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(where + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// outer x mid x inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, mid = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

struct MatmulDims {
  std::size_t m, k, n;
  Shape out;
};

MatmulDims matmul_dims(const Node& node, const Shape& a, const Shape& b, const std::string& where) {
  if (a.empty() || a.size() > 2 || b.empty() || b.size() > 2) {
    throw ShapeError(where + ": matmul needs rank-1 or rank-2 operands, got " + shape_string(a) + " and " +
                     shape_string(b));
  }
  if (node.transpose_b && b.size() != 2) throw ShapeError(where + ": transpose_b needs a matrix");
  MatmulDims d;
  d.m = a.size() == 2 ? a[0] : 1;
  d.k = a.back();
  std::size_t kb;
  if (b.size() == 1) {
    kb = b[0];
    d.n = 1;
  } else if (node.transpose_b) {
    d.n = b[0];
    kb = b[1];
  } else {
    kb = b[0];
    d.n = b[1];
  }
  if (kb != d.k) {
    throw ShapeError(where + ": matmul inner dimensions differ: " + shape_string(a) + " x " + shape_string(b) +
                     (node.transpose_b ? "^T" : ""));
  }
  if (a.size() == 2 && b.size() == 2) d.out = {d.m, d.n};
  else if (a.size() == 2) d.out = {d.m};
  else if (b.size() == 2) d.out = {d.n};
  else d.out = {};
  return d;
}

Shape resolve_reshape(const std::vector<std::int64_t>& target, std::size_t total, const std::string& where) {
  Shape out(target.size());
  std::size_t known = 1;
  int inferred = -1;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == -1) {
      inferred = static_cast<int>(i);
    } else if (target[i] < 0) {
      throw ShapeError(where + ": negative reshape extent");
    } else {
      out[i] = static_cast<std::size_t>(target[i]);
      known *= out[i];
    }
  }
  if (inferred >= 0) {
    if (known == 0 || total % known != 0) throw ShapeError(where + ": cannot infer reshape extent");
    out[inferred] = total / known;
  }
  if (shape_size(out) != total) {
    throw ShapeError(where + ": reshape to " + shape_string(out) + " from " + std::to_string(total) + " values");
  }
  return out;
}

// Indices of the k largest entries of row; ties go to the lower index.
void top_k_indices(const double* row, std::size_t len, std::size_t k, std::vector<std::size_t>& idx) {
  idx.resize(len);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  idx.resize(k);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

class Evaluator {
 public:
  Evaluator(const ExprGraph& graph, const Bindings& bindings) : graph_(graph), bindings_(bindings) {}

  NodeValues forward() {
    const auto& nodes = graph_.nodes();
    NodeValues values(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) values[i] = forward_node(i, values);
    return values;
  }

 private:
  Tensor forward_node(std::size_t id, const NodeValues& values) {
    const Node& node = graph_.nodes()[id];
    const auto where = [&] { return describe(graph_, id); };
    const auto in = [&](std::size_t i) -> const Tensor& { return values[node.inputs[i].value]; };
    const auto& kern = kernels::active();

    switch (node.kind) {
      case OpKind::parameter:
      case OpKind::constant: {
        const Tensor* bound = bindings_.find(node.name);
        if (bound == nullptr) throw BindingError(where() + ": no value bound");
        if (!leaf_shape_matches(node.declared_shape, bound->shape())) {
          throw ShapeError(where() + ": bound shape " + shape_string(bound->shape()) + " does not match declared " +
                           shape_string(node.declared_shape));
        }
        return *bound;
      }
      case OpKind::matmul: {
        const MatmulDims d = matmul_dims(node, in(0).shape(), in(1).shape(), where());
        Tensor out(d.out);
        kern.gemm(false, node.transpose_b, d.m, d.n, d.k, in(0).data().data(), in(1).data().data(),
                  out.data().data(), false);
        return out;
      }
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.shape() == b.shape()) {
          Tensor out(a.shape());
          auto fn = node.kind == OpKind::add ? kern.add : node.kind == OpKind::sub ? kern.sub : kern.mul;
          fn(a.size(), a.data().data(), b.data().data(), out.data().data());
          return out;
        }
        const Broadcast plan = plan_broadcast(a.shape(), b.shape(), where());
        Tensor out(plan.out);
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* po = out.data().data();
        if (node.kind == OpKind::add) {
          for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] + pb[ib]; });
        } else if (node.kind == OpKind::sub) {
          for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] - pb[ib]; });
        } else {
          for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) { po[o] = pa[ia] * pb[ib]; });
        }
        return out;
      }
      case OpKind::relu: {
        Tensor out(in(0).shape());
        kern.relu(out.size(), in(0).data().data(), out.data().data());
        return out;
      }
      case OpKind::softmax:
      case OpKind::top_k_softmax: {
        const Tensor& x = in(0);
        if (x.rank() == 0) throw ShapeError(where() + ": softmax of a scalar");
        const std::size_t len = x.shape().back();
        if (node.kind == OpKind::top_k_softmax && node.k > len) {
          throw ShapeError(where() + ": k = " + std::to_string(node.k) + " exceeds axis length " + std::to_string(len));
        }
        Tensor out(x.shape(), 0.0);
        const std::size_t rows = len == 0 ? 0 : x.size() / len;
        std::vector<std::size_t> keep;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = x.data().data() + r * len;
          double* yr = out.data().data() + r * len;
          if (node.kind == OpKind::softmax) {
            const double mx = *std::max_element(xr, xr + len);
            double total = 0.0;
            for (std::size_t j = 0; j < len; ++j) total += (yr[j] = std::exp(xr[j] - mx));
            for (std::size_t j = 0; j < len; ++j) yr[j] /= total;
          } else {
            top_k_indices(xr, len, node.k, keep);
            const double mx = xr[keep.front()];
            double total = 0.0;
            for (std::size_t j : keep) total += (yr[j] = std::exp(xr[j] - mx));
            for (std::size_t j : keep) yr[j] /= total;
          }
        }
        return out;
      }
      case OpKind::smooth_step: {
        Tensor out(in(0).shape());
        kern.smooth_step(out.size(), node.scalar, in(0).data().data(), out.data().data());
        return out;
      }
      case OpKind::log:
      case OpKind::exp:
      case OpKind::sigmoid:
      case OpKind::softplus:
      case OpKind::xlogx:
      case OpKind::reciprocal:
      case OpKind::square:
      case OpKind::scalar_mul:
      case OpKind::scalar_add: {
        const Tensor& x = in(0);
        Tensor out(x.shape());
        const double* px = x.data().data();
        double* po = out.data().data();
        const std::size_t n = x.size();
        const double c = node.scalar;
        switch (node.kind) {
          case OpKind::log: for (std::size_t i = 0; i < n; ++i) po[i] = std::log(px[i]); break;
          case OpKind::exp: for (std::size_t i = 0; i < n; ++i) po[i] = std::exp(px[i]); break;
          case OpKind::sigmoid: for (std::size_t i = 0; i < n; ++i) po[i] = stable_sigmoid(px[i]); break;
          case OpKind::softplus:
            for (std::size_t i = 0; i < n; ++i) po[i] = std::max(px[i], 0.0) + std::log1p(std::exp(-std::abs(px[i])));
            break;
          case OpKind::xlogx:
            for (std::size_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] * std::log(px[i]) : 0.0;
            break;
          case OpKind::reciprocal: for (std::size_t i = 0; i < n; ++i) po[i] = 1.0 / std::max(px[i], c); break;
          case OpKind::square: kern.mul(n, px, px, po); break;
          case OpKind::scalar_mul: for (std::size_t i = 0; i < n; ++i) po[i] = c * px[i]; break;
          case OpKind::scalar_add: for (std::size_t i = 0; i < n; ++i) po[i] = px[i] + c; break;
          default: break;
        }
        return out;
      }
      case OpKind::sum:
      case OpKind::mean: {
        const Tensor& x = in(0);
        const bool mean = node.kind == OpKind::mean;
        if (node.axis == kAllAxes) {
          if (mean && x.size() == 0) throw ShapeError(where() + ": mean of an empty tensor");
          const double total = kern.sum(x.size(), x.data().data());
          return Tensor::scalar(mean ? total / static_cast<double>(x.size()) : total);
        }
        const std::size_t axis = resolve_axis(node.axis, x.rank(), where());
        const AxisSplit s = split_axis(x.shape(), axis);
        Shape shape = x.shape();
        shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
        Tensor out(shape, 0.0);
        const double* px = x.data().data();
        double* po = out.data().data();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t m = 0; m < s.mid; ++m) {
            const double* src = px + (o * s.mid + m) * s.inner;
            double* dst = po + o * s.inner;
            for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
          }
        }
        if (mean) {
          const double scale = 1.0 / static_cast<double>(s.mid);
          for (double& v : out.data()) v *= scale;
        }
        return out;
      }
      case OpKind::concat: {
        const Shape& first = in(0).shape();
        const std::size_t axis = resolve_axis(node.axis, first.size(), where());
        Shape shape = first;
        shape[axis] = 0;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          const Shape& s = in(i).shape();
          bool ok = s.size() == first.size();
          for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
          if (!ok) {
            throw ShapeError(where() + ": concat input " + shape_string(s) + " incompatible with " + shape_string(first));
          }
          shape[axis] += s[axis];
        }
        Tensor out(shape);
        const AxisSplit total = split_axis(shape, axis);
        double* po = out.data().data();
        for (std::size_t o = 0; o < total.outer; ++o) {
          for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            const Tensor& part = in(i);
            const std::size_t chunk = part.shape()[axis] * total.inner;
            const double* src = part.data().data() + o * chunk;
            po = std::copy(src, src + chunk, po);
          }
        }
        return out;
      }
      case OpKind::slice: {
        const Tensor& x = in(0);
        const std::size_t axis = resolve_axis(node.axis, x.rank(), where());
        if (node.end > x.shape()[axis]) {
          throw ShapeError(where() + ": slice end " + std::to_string(node.end) + " beyond extent " +
                           std::to_string(x.shape()[axis]));
        }
        Shape shape = x.shape();
        shape[axis] = node.end - node.begin;
        Tensor out(shape);
        const AxisSplit s = split_axis(x.shape(), axis);
        const std::size_t chunk = (node.end - node.begin) * s.inner;
        double* po = out.data().data();
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = x.data().data() + (o * s.mid + node.begin) * s.inner;
          po = std::copy(src, src + chunk, po);
        }
        return out;
      }
      case OpKind::reshape: {
        Tensor out = in(0);
        out.reshape(resolve_reshape(node.target_shape, out.size(), where()));
        return out;
      }
    }
    throw Error(where() + ": unhandled op");
  }

  const ExprGraph& graph_;
  const Bindings& bindings_;
};

// Reverse sweep. Adjoints are allocated lazily; only nodes that depend on a
// trainable parameter receive one.
class Backpropagator {
 public:
  Backpropagator(const ExprGraph& graph, const NodeValues& values)
      : graph_(graph), values_(values), adjoints_(values.size()), has_adjoint_(values.size(), false) {}

  GradientMap run(NodeId loss) {
    const auto& nodes = graph_.nodes();
    if (loss.value >= nodes.size()) throw Error("unknown loss node " + std::to_string(loss.value));
    if (values_[loss.value].size() != 1) {
      throw ShapeError("gradient needs a scalar loss; " + describe(graph_, loss.value) + " has shape " +
                       shape_string(values_[loss.value].shape()));
    }
    if (nodes[loss.value].requires_grad) {
      adjoint(loss.value).fill(1.0);
      for (std::size_t id = loss.value + 1; id-- > 0;) {
        if (has_adjoint_[id] && nodes[id].requires_grad) backward_node(id);
      }
    }
    GradientMap grads;
    for (NodeId p : graph_.parameters()) {
      const Node& n = nodes[p.value];
      if (has_adjoint_[p.value]) {
        grads.emplace(n.name, std::move(adjoints_[p.value]));
      } else {
        grads.emplace(n.name, Tensor(values_[p.value].shape(), 0.0));
      }
    }
    return grads;
  }

 private:
  Tensor& adjoint(std::size_t id) {
    if (!has_adjoint_[id]) {
      adjoints_[id] = Tensor(values_[id].shape(), 0.0);
      has_adjoint_[id] = true;
    }
    return adjoints_[id];
  }

  bool wants(NodeId id) const { return graph_.nodes()[id.value].requires_grad; }

  void backward_node(std::size_t id) {
    const Node& node = graph_.nodes()[id];
    const Tensor& g = adjoints_[id];
    const Tensor& y = values_[id];
    const auto in = [&](std::size_t i) -> const Tensor& { return values_[node.inputs[i].value]; };
    const auto& kern = kernels::active();

    switch (node.kind) {
      case OpKind::parameter:
      case OpKind::constant:
        return;
      case OpKind::matmul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const MatmulDims d = matmul_dims(node, a.shape(), b.shape(), describe(graph_, id));
        const double* pg = g.data().data();
        if (wants(node.inputs[0])) {
          double* da = adjoint(node.inputs[0].value).data().data();
          // dA = dC * op(B)^T
          if (node.transpose_b) {
            kern.gemm(false, false, d.m, d.k, d.n, pg, b.data().data(), da, true);
          } else {
            kern.gemm(false, true, d.m, d.k, d.n, pg, b.data().data(), da, true);
          }
        }
        if (wants(node.inputs[1])) {
          double* db = adjoint(node.inputs[1].value).data().data();
          if (node.transpose_b) {
            // dB (n x k) = dC^T * A
            kern.gemm(true, false, d.n, d.k, d.m, pg, a.data().data(), db, true);
          } else {
            // dB (k x n) = A^T * dC
            kern.gemm(true, false, d.k, d.n, d.m, a.data().data(), pg, db, true);
          }
        }
        return;
      }
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const bool want_a = wants(node.inputs[0]);
        const bool want_b = wants(node.inputs[1]);
        const std::size_t n = g.size();
        if (a.shape() == b.shape()) {
          if (want_a) {
            double* da = adjoint(node.inputs[0].value).data().data();
            if (node.kind == OpKind::mul) kern.mul_acc(n, g.data().data(), b.data().data(), da);
            else kern.axpy(n, 1.0, g.data().data(), da);
          }
          if (want_b) {
            double* db = adjoint(node.inputs[1].value).data().data();
            if (node.kind == OpKind::mul) kern.mul_acc(n, g.data().data(), a.data().data(), db);
            else kern.axpy(n, node.kind == OpKind::sub ? -1.0 : 1.0, g.data().data(), db);
          }
          return;
        }
        const Broadcast plan = plan_broadcast(a.shape(), b.shape(), describe(graph_, id));
        const double* pg = g.data().data();
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        double* da = want_a ? adjoint(node.inputs[0].value).data().data() : nullptr;
        double* db = want_b ? adjoint(node.inputs[1].value).data().data() : nullptr;
        const double sign_b = node.kind == OpKind::sub ? -1.0 : 1.0;
        const bool is_mul = node.kind == OpKind::mul;
        for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t ib) {
          if (da) da[ia] += is_mul ? pg[o] * pb[ib] : pg[o];
          if (db) db[ib] += is_mul ? pg[o] * pa[ia] : sign_b * pg[o];
        });
        return;
      }
      case OpKind::relu: {
        if (!wants(node.inputs[0])) return;
        kern.relu_backward(g.size(), in(0).data().data(), g.data().data(),
                           adjoint(node.inputs[0].value).data().data());
        return;
      }
      case OpKind::softmax:
      case OpKind::top_k_softmax: {
        if (!wants(node.inputs[0])) return;
        // dx = y * (g - <y, g>) per row; masked entries have y = 0.
        const std::size_t len = y.shape().back();
        const std::size_t rows = len == 0 ? 0 : y.size() / len;
        double* dx = adjoint(node.inputs[0].value).data().data();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* yr = y.data().data() + r * len;
          const double* gr = g.data().data() + r * len;
          double inner = 0.0;
          for (std::size_t j = 0; j < len; ++j) inner += yr[j] * gr[j];
          for (std::size_t j = 0; j < len; ++j) dx[r * len + j] += yr[j] * (gr[j] - inner);
        }
        return;
      }
      case OpKind::smooth_step: {
        if (!wants(node.inputs[0])) return;
        kern.smooth_step_backward(g.size(), node.scalar, in(0).data().data(), g.data().data(),
                                  adjoint(node.inputs[0].value).data().data());
        return;
      }
      case OpKind::log:
      case OpKind::exp:
      case OpKind::sigmoid:
      case OpKind::softplus:
      case OpKind::xlogx:
      case OpKind::reciprocal:
      case OpKind::square:
      case OpKind::scalar_mul:
      case OpKind::scalar_add: {
        if (!wants(node.inputs[0])) return;
        const double* px = in(0).data().data();
        const double* py = y.data().data();
        const double* pg = g.data().data();
        double* dx = adjoint(node.inputs[0].value).data().data();
        const std::size_t n = g.size();
        const double c = node.scalar;
        switch (node.kind) {
          case OpKind::log: for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i] / px[i]; break;
          case OpKind::exp: kern.mul_acc(n, pg, py, dx); break;
          case OpKind::sigmoid: for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i] * py[i] * (1.0 - py[i]); break;
          case OpKind::softplus: for (std::size_t i = 0; i < n; ++i) dx[i] += pg[i] * stable_sigmoid(px[i]); break;
          case OpKind::xlogx:
            for (std::size_t i = 0; i < n; ++i) {
              if (px[i] > 0.0) dx[i] += pg[i] * (std::log(px[i]) + 1.0);
            }
            break;
          case OpKind::reciprocal:
            for (std::size_t i = 0; i < n; ++i) {
              if (px[i] > c) dx[i] -= pg[i] * py[i] * py[i];
            }
            break;
          case OpKind::square: for (std::size_t i = 0; i < n; ++i) dx[i] += 2.0 * pg[i] * px[i]; break;
          case OpKind::scalar_mul: kern.axpy(n, c, pg, dx); break;
          case OpKind::scalar_add: kern.axpy(n, 1.0, pg, dx); break;
          default: break;
        }
        return;
      }
      case OpKind::sum:
      case OpKind::mean: {
        if (!wants(node.inputs[0])) return;
        const Tensor& x = in(0);
        Tensor& dx = adjoint(node.inputs[0].value);
        const bool mean = node.kind == OpKind::mean;
        if (node.axis == kAllAxes) {
          const double v = g.item() * (mean ? 1.0 / static_cast<double>(x.size()) : 1.0);
          for (double& d : dx.data()) d += v;
          return;
        }
        const std::size_t axis = resolve_axis(node.axis, x.rank(), describe(graph_, id));
        const AxisSplit s = split_axis(x.shape(), axis);
        const double scale = mean ? 1.0 / static_cast<double>(s.mid) : 1.0;
        const double* pg = g.data().data();
        double* pd = dx.data().data();
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t m = 0; m < s.mid; ++m) {
            kern.axpy(s.inner, scale, pg + o * s.inner, pd + (o * s.mid + m) * s.inner);
          }
        }
        return;
      }
      case OpKind::concat: {
        const std::size_t axis = resolve_axis(node.axis, y.rank(), describe(graph_, id));
        const AxisSplit total = split_axis(y.shape(), axis);
        const double* pg = g.data().data();
        std::size_t offset = 0;
        for (std::size_t o = 0; o < total.outer; ++o) {
          for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            const std::size_t chunk = in(i).shape()[axis] * total.inner;
            if (wants(node.inputs[i])) {
              double* dst = adjoint(node.inputs[i].value).data().data() + o * chunk;
              kern.axpy(chunk, 1.0, pg + offset, dst);
            }
            offset += chunk;
          }
        }
        return;
      }
      case OpKind::slice: {
        if (!wants(node.inputs[0])) return;
        const Tensor& x = in(0);
        const std::size_t axis = resolve_axis(node.axis, x.rank(), describe(graph_, id));
        const AxisSplit s = split_axis(x.shape(), axis);
        const std::size_t chunk = (node.end - node.begin) * s.inner;
        double* dx = adjoint(node.inputs[0].value).data().data();
        for (std::size_t o = 0; o < s.outer; ++o) {
          kern.axpy(chunk, 1.0, g.data().data() + o * chunk, dx + (o * s.mid + node.begin) * s.inner);
        }
        return;
      }
      case OpKind::reshape: {
        if (!wants(node.inputs[0])) return;
        kern.axpy(g.size(), 1.0, g.data().data(), adjoint(node.inputs[0].value).data().data());
        return;
      }
    }
  }

  const ExprGraph& graph_;
  const NodeValues& values_;
  std::vector<Tensor> adjoints_;
  std::vector<bool> has_adjoint_;
};

}  // namespace

NodeValues evaluate(const ExprGraph& graph, const Bindings& bindings) {
  return Evaluator(graph, bindings).forward();
}

ForwardBackward evaluate_with_gradient(const ExprGraph& graph, NodeId loss, const Bindings& bindings) {
  ForwardBackward result;
  result.values = Evaluator(graph, bindings).forward();
  result.gradients = Backpropagator(graph, result.values).run(loss);
  return result;
}

GradientMap gradient(const ExprGraph& graph, NodeId loss, const Bindings& bindings) {
  return evaluate_with_gradient(graph, loss, bindings).gradients;
}

std::vector<double> numeric_gradient(const std::function<double(std::span<const double>)>& fn,
                                     std::span<const double> point, double eps) {
  if (!(eps > 0.0)) throw DomainError("numeric_gradient needs eps > 0");
  std::vector<double> x(point.begin(), point.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = fn(x);
    x[i] = saved - eps;
    const double down = fn(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("numeric_gradient: non-finite function value at component " + std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

}  // namespace dselect
