// SPDX-License-Identifier: Apache-2.0
#include "claimspot/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "claimspot/errors.hpp"

namespace claimspot {

namespace {

constexpr Real kInvSqrt2 = 0.70710678118654752440;
constexpr Real kInvSqrt2Pi = 0.39894228040143267794;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::size_t view_rows(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t view_cols(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require_rank_le2(const Shape& s, std::string_view op) {
  if (s.empty() || s.size() > 2) {
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " +
                         shape_to_string(s));
  }
}

void require_same(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_to_string(a) + " vs " + shape_to_string(b));
  }
}

bool is_row_vector_for(const Shape& a, const Shape& b) {
  if (b.empty() || a.size() != 2) return false;
  if (b.size() == 1) return b[0] == a[1];
  return b.size() == 2 && b[0] == 1 && b[1] == a[1];
}

// Strided view of the lanes along one axis of a rank<=2 tensor.
struct AxisLanes {
  std::size_t count;   // number of independent lanes
  std::size_t length;  // elements per lane
  std::size_t stride;  // distance between consecutive lane elements
  std::size_t lane_step;

  static AxisLanes of(const Shape& s, std::size_t axis) {
    const std::size_t rows = view_rows(s);
    const std::size_t cols = view_cols(s);
    const bool along_cols = (s.size() == 1) || axis == 1;
    if (along_cols) return {rows, cols, 1, cols};
    return {cols, rows, cols, 1};
  }
};

Real gelu_value(Real x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

Real gelu_derivative(Real x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  if (shape_.empty()) throw DimensionError("tensor shape must not be empty");
  for (auto d : shape_) {
    if (d == 0) {
      throw DimensionError("tensor dimensions must be positive: " +
                           shape_to_string(shape_));
    }
  }
  values_.assign(product(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) : Tensor(std::move(shape)) {
  if (values.size() != values_.size()) {
    throw DimensionError("tensor of shape " + shape_to_string(shape_) +
                         " needs " + std::to_string(values_.size()) +
                         " values, got " + std::to_string(values.size()));
  }
  values_ = std::move(values);
}

Tensor Tensor::scalar(Real value) { return Tensor({1}, std::vector<Real>{value}); }

std::size_t Tensor::rows() const noexcept { return view_rows(shape_); }
std::size_t Tensor::cols() const noexcept { return view_cols(shape_); }

Real Tensor::item() const {
  if (values_.size() != 1) {
    throw ContractError("item() on tensor of shape " + shape_to_string(shape_));
  }
  return values_[0];
}

std::span<Real> Tensor::grad() {
  if (!grad_) throw StateError("tensor has no gradient");
  return *grad_;
}

std::span<const Real> Tensor::grad() const {
  if (!grad_) throw StateError("tensor has no gradient");
  return *grad_;
}

void Tensor::zero_grad() { grad_.emplace(values_.size(), Real{0}); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(),
                     [](Real v) { return std::isfinite(v); });
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Subtract: return "subtract";
    case OpKind::Multiply: return "multiply";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Softmax: return "softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Gelu: return "gelu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Dropout: return "dropout";
    case OpKind::Scale: return "scale";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::GatherRows: return "gather_rows";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph construction

NodeId Graph::push(Node n) {
  for (auto p : n.parents) {
    if (p >= nodes_.size()) throw ContractError("parent node does not exist");
  }
  nodes_.push_back(std::move(n));
  backward_done_ = false;
  return NodeId{nodes_.size() - 1};
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id.index >= nodes_.size()) throw ContractError("unknown node id");
  return nodes_[id.index];
}

Graph::Node& Graph::node(NodeId id) {
  if (id.index >= nodes_.size()) throw ContractError("unknown node id");
  return nodes_[id.index];
}

const Tensor& Graph::node_value(const Node& n) const {
  return n.external ? *n.external : n.data;
}

NodeId Graph::input(Tensor value) {
  Node n;
  n.shape = value.shape();
  n.differentiable_leaf = value.requires_grad();
  n.data = std::move(value);
  n.evaluated = true;
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  return input(std::move(value));
}

NodeId Graph::parameter(Tensor& tensor) {
  Node n;
  n.shape = tensor.shape();
  n.external = &tensor;
  n.external_mut = &tensor;
  n.differentiable_leaf = tensor.requires_grad();
  n.evaluated = true;
  return push(std::move(n));
}

NodeId Graph::constant_ref(const Tensor& tensor) {
  Node n;
  n.shape = tensor.shape();
  n.external = &tensor;
  n.evaluated = true;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  if (sa != sb && !is_row_vector_for(sa, sb)) {
    throw DimensionError("add: shape mismatch " + shape_to_string(sa) + " vs " +
                         shape_to_string(sb));
  }
  Node n;
  n.kind = OpKind::Add;
  n.parents = {a.index, b.index};
  n.shape = sa;
  return push(std::move(n));
}

NodeId Graph::subtract(NodeId a, NodeId b) {
  require_same(shape(a), shape(b), "subtract");
  Node n;
  n.kind = OpKind::Subtract;
  n.parents = {a.index, b.index};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::multiply(NodeId a, NodeId b) {
  require_same(shape(a), shape(b), "multiply");
  Node n;
  n.kind = OpKind::Multiply;
  n.parents = {a.index, b.index};
  n.shape = shape(a);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const auto& sa = shape(a);
  const auto& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw DimensionError("matmul: shape mismatch " + shape_to_string(sa) +
                         " vs " + shape_to_string(sb));
  }
  Node n;
  n.kind = OpKind::MatMul;
  n.parents = {a.index, b.index};
  n.shape = {sa[0], sb[1]};
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
  const auto& sa = shape(a);
  if (sa.size() != 2) {
    throw DimensionError("transpose: expected rank 2, got " + shape_to_string(sa));
  }
  Node n;
  n.kind = OpKind::Transpose;
  n.parents = {a.index};
  n.shape = {sa[1], sa[0]};
  return push(std::move(n));
}

NodeId Graph::concat(std::span<const NodeId> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  Shape out = shape(parts[0]);
  require_rank_le2(out, "concat");
  if (axis >= out.size()) throw DimensionError("concat: axis out of range");
  Node n;
  n.kind = OpKind::Concat;
  n.axis = axis;
  n.parents.push_back(parts[0].index);
  for (std::size_t i = 1; i < parts.size(); ++i) {
    const auto& s = shape(parts[i]);
    bool ok = s.size() == out.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      if (d != axis && s[d] != out[d]) ok = false;
    }
    if (!ok) {
      throw DimensionError("concat: shape mismatch " + shape_to_string(out) +
                           " vs " + shape_to_string(s));
    }
    out[axis] += s[axis];
    n.parents.push_back(parts[i].index);
  }
  n.shape = out;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& sa = shape(a);
  require_rank_le2(sa, "slice");
  if (axis >= sa.size() || begin >= end || end > sa[axis]) {
    throw DimensionError("slice: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " invalid for " +
                         shape_to_string(sa));
  }
  Node n;
  n.kind = OpKind::Slice;
  n.parents = {a.index};
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  n.shape = sa;
  n.shape[axis] = end - begin;
  return push(std::move(n));
}

NodeId Graph::softmax(NodeId a, std::size_t axis) {
  const auto& sa = shape(a);
  require_rank_le2(sa, "softmax");
  if (axis >= sa.size()) throw DimensionError("softmax: axis out of range");
  Node n;
  n.kind = OpKind::Softmax;
  n.parents = {a.index};
  n.axis = axis;
  n.shape = sa;
  return push(std::move(n));
}

NodeId Graph::log_softmax(NodeId a, std::size_t axis) {
  const auto& sa = shape(a);
  require_rank_le2(sa, "log_softmax");
  if (axis >= sa.size()) throw DimensionError("log_softmax: axis out of range");
  Node n;
  n.kind = OpKind::LogSoftmax;
  n.parents = {a.index};
  n.axis = axis;
  n.shape = sa;
  return push(std::move(n));
}

#define CLAIMSPOT_UNARY(name, op)      \
  NodeId Graph::name(NodeId a) {       \
    Node n;                            \
    n.kind = op;                       \
    n.parents = {a.index};             \
    n.shape = shape(a);                \
    return push(std::move(n));         \
  }

CLAIMSPOT_UNARY(log, OpKind::Log)
CLAIMSPOT_UNARY(exp, OpKind::Exp)
CLAIMSPOT_UNARY(gelu, OpKind::Gelu)
CLAIMSPOT_UNARY(tanh, OpKind::Tanh)

#undef CLAIMSPOT_UNARY

NodeId Graph::layer_norm(NodeId x, NodeId gamma, NodeId beta) {
  const auto& sx = shape(x);
  require_rank_le2(sx, "layer_norm");
  const std::size_t width = view_cols(sx);
  for (NodeId p : {gamma, beta}) {
    if (product(shape(p)) != width || view_cols(shape(p)) != width) {
      throw DimensionError("layer_norm: shape mismatch " + shape_to_string(sx) +
                           " vs " + shape_to_string(shape(p)));
    }
  }
  Node n;
  n.kind = OpKind::LayerNorm;
  n.parents = {x.index, gamma.index, beta.index};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::dropout(NodeId a, Tensor mask, Real keep_prob) {
  require_same(shape(a), mask.shape(), "dropout");
  if (!(keep_prob > 0 && keep_prob <= 1)) {
    throw ContractError("dropout: keep probability must lie in (0, 1]");
  }
  for (Real m : mask.values()) {
    if (m != 0 && m != 1) throw ContractError("dropout: mask must hold only 0 and 1");
  }
  Node n;
  n.kind = OpKind::Dropout;
  n.parents = {a.index};
  n.shape = shape(a);
  n.mask = std::move(mask);
  n.factor = keep_prob;
  return push(std::move(n));
}

NodeId Graph::scale(NodeId a, Real factor) {
  Node n;
  n.kind = OpKind::Scale;
  n.parents = {a.index};
  n.shape = shape(a);
  n.factor = factor;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  Node n;
  n.kind = OpKind::Sum;
  n.parents = {a.index};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::mean(NodeId a) {
  Node n;
  n.kind = OpKind::Mean;
  n.parents = {a.index};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::l2_norm(NodeId a) {
  Node n;
  n.kind = OpKind::L2Norm;
  n.parents = {a.index};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId table, std::vector<std::size_t> ids) {
  const auto& st = shape(table);
  if (st.size() != 2) {
    throw DimensionError("gather_rows: table must be rank 2, got " +
                         shape_to_string(st));
  }
  if (ids.empty()) throw ContractError("gather_rows: no ids");
  for (auto id : ids) {
    if (id >= st[0]) {
      throw InputError("gather_rows: id " + std::to_string(id) +
                       " out of range for table " + shape_to_string(st));
    }
  }
  Node n;
  n.kind = OpKind::GatherRows;
  n.parents = {table.index};
  n.shape = {ids.size(), st[1]};
  n.ids = std::move(ids);
  return push(std::move(n));
}

void Graph::retain_grad(NodeId id) { node(id).retained = true; }

const Shape& Graph::shape(NodeId id) const { return node(id).shape; }
OpKind Graph::kind(NodeId id) const { return node(id).kind; }

std::span<const std::size_t> Graph::parents(NodeId id) const {
  return node(id).parents;
}

const Tensor& Graph::value(NodeId id) const {
  const Node& n = node(id);
  if (!n.evaluated) {
    throw StateError("node #" + std::to_string(id.index) + " has not been evaluated");
  }
  return node_value(n);
}

Tensor Graph::gradient(NodeId id) const {
  const Node& n = node(id);
  if (!backward_done_) throw StateError("gradient requested before backward");
  if (n.grad.empty()) return Tensor(n.shape);
  return Tensor(n.shape, n.grad);
}

Tensor& Graph::leaf_value(NodeId id) {
  Node& n = node(id);
  if (n.kind != OpKind::Leaf) throw ContractError("leaf_value on interior node");
  if (n.external && !n.external_mut) {
    throw ContractError("leaf_value on read-only reference");
  }
  backward_done_ = false;
  last_forward_root_.reset();
  return n.external_mut ? *n.external_mut : n.data;
}

// ---------------------------------------------------------------------------
// Forward

std::vector<char> Graph::ancestors(NodeId root) const {
  std::vector<char> mark(nodes_.size(), 0);
  mark[root.index] = 1;
  for (std::size_t i = root.index + 1; i-- > 0;) {
    if (!mark[i]) continue;
    for (auto p : nodes_[i].parents) mark[p] = 1;
  }
  return mark;
}

const Tensor& Graph::forward(NodeId root) {
  node(root);
  const auto mark = ancestors(root);
  for (std::size_t i = 0; i <= root.index; ++i) {
    if (!mark[i]) continue;
    Node& n = nodes_[i];
    if (n.kind == OpKind::Leaf) {
      const Tensor& v = node_value(n);
      if (v.shape() != n.shape) {
        throw DimensionError("leaf #" + std::to_string(i) + " changed shape to " +
                             shape_to_string(v.shape()));
      }
      if (!v.all_finite()) {
        throw NumericError("leaf #" + std::to_string(i) + " holds a non-finite value");
      }
      continue;
    }
    evaluate(i);
    if (!n.data.all_finite()) {
      throw NumericError("node #" + std::to_string(i) + " (" +
                         std::string(op_name(n.kind)) +
                         ") produced a non-finite value");
    }
    n.evaluated = true;
  }
  last_forward_root_ = root.index;
  backward_done_ = false;
  return node_value(nodes_[root.index]);
}

void Graph::evaluate(std::size_t index) {
  Node& n = nodes_[index];
  auto in = [&](std::size_t k) -> const Tensor& {
    return node_value(nodes_[n.parents[k]]);
  };
  Tensor out(n.shape);
  auto o = out.values();

  switch (n.kind) {
    case OpKind::Leaf:
      return;
    case OpKind::Add: {
      const auto a = in(0).values();
      const auto b = in(1).values();
      if (a.size() == b.size()) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i];
      } else {
        const std::size_t cols = b.size();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] + b[i % cols];
      }
      break;
    }
    case OpKind::Subtract: {
      const auto a = in(0).values();
      const auto b = in(1).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] - b[i];
      break;
    }
    case OpKind::Multiply: {
      const auto a = in(0).values();
      const auto b = in(1).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * b[i];
      break;
    }
    case OpKind::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
      const Real* av = a.values().data();
      const Real* bv = b.values().data();
      Real* ov = o.data();
      for (std::size_t i = 0; i < m; ++i) {
        Real* orow = ov + i * p;
        for (std::size_t q = 0; q < k; ++q) {
          const Real s = av[i * k + q];
          if (s == 0) continue;
          const Real* brow = bv + q * p;
          for (std::size_t j = 0; j < p; ++j) orow[j] += s * brow[j];
        }
      }
      break;
    }
    case OpKind::Transpose: {
      const Tensor& a = in(0);
      const std::size_t r = a.shape()[0], c = a.shape()[1];
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[j * r + i] = a.values()[i * c + j];
      break;
    }
    case OpKind::Concat: {
      const std::size_t rows = view_rows(n.shape);
      const std::size_t cols = view_cols(n.shape);
      const bool along_cols = n.shape.size() == 1 || n.axis == 1;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Tensor& part = in(k);
        const std::size_t pr = part.rows(), pc = part.cols();
        for (std::size_t i = 0; i < pr; ++i) {
          for (std::size_t j = 0; j < pc; ++j) {
            const std::size_t r = along_cols ? i : i + offset;
            const std::size_t c = along_cols ? j + offset : j;
            o[r * cols + c] = part.values()[i * pc + j];
          }
        }
        offset += along_cols ? pc : pr;
      }
      (void)rows;
      break;
    }
    case OpKind::Slice: {
      const Tensor& a = in(0);
      const std::size_t ac = a.cols();
      const std::size_t rows = view_rows(n.shape), cols = view_cols(n.shape);
      const bool along_cols = n.shape.size() == 1 || n.axis == 1;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t r = along_cols ? i : i + n.begin;
          const std::size_t c = along_cols ? j + n.begin : j;
          o[i * cols + j] = a.values()[r * ac + c];
        }
      }
      break;
    }
    case OpKind::Softmax:
    case OpKind::LogSoftmax: {
      const auto a = in(0).values();
      const auto lanes = AxisLanes::of(n.shape, n.axis);
      for (std::size_t l = 0; l < lanes.count; ++l) {
        const std::size_t base = l * lanes.lane_step;
        Real mx = a[base];
        for (std::size_t t = 1; t < lanes.length; ++t)
          mx = std::max(mx, a[base + t * lanes.stride]);
        Real total = 0;
        for (std::size_t t = 0; t < lanes.length; ++t)
          total += std::exp(a[base + t * lanes.stride] - mx);
        if (n.kind == OpKind::Softmax) {
          for (std::size_t t = 0; t < lanes.length; ++t) {
            const std::size_t i = base + t * lanes.stride;
            o[i] = std::exp(a[i] - mx) / total;
          }
        } else {
          const Real log_total = std::log(total);
          for (std::size_t t = 0; t < lanes.length; ++t) {
            const std::size_t i = base + t * lanes.stride;
            o[i] = a[i] - mx - log_total;
          }
        }
      }
      break;
    }
    case OpKind::Log: {
      const auto a = in(0).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::log(a[i]);
      break;
    }
    case OpKind::Exp: {
      const auto a = in(0).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::exp(a[i]);
      break;
    }
    case OpKind::LayerNorm: {
      const auto x = in(0).values();
      const auto gamma = in(1).values();
      const auto beta = in(2).values();
      const std::size_t rows = view_rows(n.shape), width = view_cols(n.shape);
      n.cache.assign(rows, 0);  // reciprocal standard deviation per row
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * width;
        Real mu = 0;
        for (std::size_t j = 0; j < width; ++j) mu += xr[j];
        mu /= static_cast<Real>(width);
        Real var = 0;
        for (std::size_t j = 0; j < width; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<Real>(width);
        const Real rstd = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        n.cache[r] = rstd;
        for (std::size_t j = 0; j < width; ++j)
          o[r * width + j] = gamma[j] * ((xr[j] - mu) * rstd) + beta[j];
      }
      break;
    }
    case OpKind::Gelu: {
      const auto a = in(0).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = gelu_value(a[i]);
      break;
    }
    case OpKind::Tanh: {
      const auto a = in(0).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::tanh(a[i]);
      break;
    }
    case OpKind::Dropout: {
      const auto a = in(0).values();
      const auto m = n.mask.values();
      const Real inv_keep = 1.0 / n.factor;
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * m[i] * inv_keep;
      break;
    }
    case OpKind::Scale: {
      const auto a = in(0).values();
      for (std::size_t i = 0; i < o.size(); ++i) o[i] = a[i] * n.factor;
      break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      const auto a = in(0).values();
      Real total = 0;
      for (Real v : a) total += v;
      o[0] = n.kind == OpKind::Sum ? total : total / static_cast<Real>(a.size());
      break;
    }
    case OpKind::L2Norm: {
      const auto a = in(0).values();
      Real total = 0;
      for (Real v : a) total += v * v;
      o[0] = std::sqrt(total);
      break;
    }
    case OpKind::GatherRows: {
      const Tensor& table = in(0);
      const std::size_t width = table.cols();
      for (std::size_t t = 0; t < n.ids.size(); ++t) {
        const Real* src = table.values().data() + n.ids[t] * width;
        std::copy(src, src + width, o.data() + t * width);
      }
      break;
    }
  }
  n.data = std::move(out);
}

// ---------------------------------------------------------------------------
// Backward

void Graph::backward(NodeId root, BackwardOptions options) {
  const Node& r = node(root);
  if (!last_forward_root_ || !r.evaluated || *last_forward_root_ < root.index) {
    throw StateError("backward called before forward");
  }
  if (product(r.shape) != 1) {
    throw ContractError("backward root must be a scalar, got shape " +
                        shape_to_string(r.shape));
  }
  const auto mark = ancestors(root);
  for (std::size_t i = 0; i <= root.index; ++i) {
    if (mark[i] && !nodes_[i].evaluated) {
      throw StateError("backward called before forward");
    }
  }

  std::vector<char> wants(nodes_.size(), 0);
  for (std::size_t i = 0; i <= root.index; ++i) {
    if (!mark[i]) continue;
    const Node& n = nodes_[i];
    bool w = n.retained || (n.kind == OpKind::Leaf && n.differentiable_leaf);
    for (auto p : n.parents) w = w || wants[p];
    wants[i] = w;
  }
  for (auto& n : nodes_) n.grad.clear();
  for (std::size_t i = 0; i <= root.index; ++i) {
    if (wants[i]) nodes_[i].grad.assign(product(nodes_[i].shape), Real{0});
  }
  if (wants[root.index]) nodes_[root.index].grad[0] = options.seed;

  for (std::size_t i = root.index + 1; i-- > 0;) {
    if (!wants[i] || nodes_[i].kind == OpKind::Leaf) continue;
    propagate(i, wants);
  }

  if (options.accumulate_into_parameters) {
    for (std::size_t i = 0; i <= root.index; ++i) {
      Node& n = nodes_[i];
      if (!wants[i] || n.kind != OpKind::Leaf || !n.external_mut ||
          !n.external_mut->requires_grad()) {
        continue;
      }
      Tensor& t = *n.external_mut;
      if (!t.has_grad()) t.zero_grad();
      auto g = t.grad();
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.grad[k];
    }
  }
  backward_done_ = true;
}

void Graph::propagate(std::size_t index, const std::vector<char>& wants) {
  Node& n = nodes_[index];
  const std::vector<Real>& g = n.grad;
  auto parent_wants = [&](std::size_t k) { return wants[n.parents[k]] != 0; };
  auto pgrad = [&](std::size_t k) -> std::vector<Real>& {
    return nodes_[n.parents[k]].grad;
  };
  auto in = [&](std::size_t k) -> const Tensor& {
    return node_value(nodes_[n.parents[k]]);
  };
  const Tensor& y = n.data;

  switch (n.kind) {
    case OpKind::Leaf:
      return;
    case OpKind::Add: {
      if (parent_wants(0)) {
        auto& ga = pgrad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (parent_wants(1)) {
        auto& gb = pgrad(1);
        const std::size_t cols = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g[i];
      }
      break;
    }
    case OpKind::Subtract: {
      if (parent_wants(0)) {
        auto& ga = pgrad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (parent_wants(1)) {
        auto& gb = pgrad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
      break;
    }
    case OpKind::Multiply: {
      const auto a = in(0).values();
      const auto b = in(1).values();
      if (parent_wants(0)) {
        auto& ga = pgrad(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (parent_wants(1)) {
        auto& gb = pgrad(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
      const Real* av = a.values().data();
      const Real* bv = b.values().data();
      if (parent_wants(0)) {
        // dA = dY B^T, accumulated as row updates over B^T.
        std::vector<Real> bt(p * k);
        for (std::size_t q = 0; q < k; ++q)
          for (std::size_t j = 0; j < p; ++j) bt[j * k + q] = bv[q * p + j];
        Real* ga = pgrad(0).data();
        for (std::size_t i = 0; i < m; ++i) {
          const Real* grow = g.data() + i * p;
          Real* garow = ga + i * k;
          for (std::size_t j = 0; j < p; ++j) {
            const Real s = grow[j];
            if (s == 0) continue;
            const Real* btrow = bt.data() + j * k;
            for (std::size_t q = 0; q < k; ++q) garow[q] += s * btrow[q];
          }
        }
      }
      if (parent_wants(1)) {
        Real* gb = pgrad(1).data();
        for (std::size_t i = 0; i < m; ++i) {
          const Real* grow = g.data() + i * p;
          for (std::size_t q = 0; q < k; ++q) {
            const Real s = av[i * k + q];
            if (s == 0) continue;
            Real* gbrow = gb + q * p;
            for (std::size_t j = 0; j < p; ++j) gbrow[j] += s * grow[j];
          }
        }
      }
      break;
    }
    case OpKind::Transpose: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const std::size_t r = n.shape[1], c = n.shape[0];  // parent is r x c
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
      break;
    }
    case OpKind::Concat: {
      const std::size_t cols = view_cols(n.shape);
      const bool along_cols = n.shape.size() == 1 || n.axis == 1;
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.parents.size(); ++k) {
        const Shape& ps = nodes_[n.parents[k]].shape;
        const std::size_t pr = view_rows(ps), pc = view_cols(ps);
        if (parent_wants(k)) {
          auto& gp = pgrad(k);
          for (std::size_t i = 0; i < pr; ++i) {
            for (std::size_t j = 0; j < pc; ++j) {
              const std::size_t r = along_cols ? i : i + offset;
              const std::size_t c = along_cols ? j + offset : j;
              gp[i * pc + j] += g[r * cols + c];
            }
          }
        }
        offset += along_cols ? pc : pr;
      }
      break;
    }
    case OpKind::Slice: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const std::size_t ac = view_cols(nodes_[n.parents[0]].shape);
      const std::size_t rows = view_rows(n.shape), cols = view_cols(n.shape);
      const bool along_cols = n.shape.size() == 1 || n.axis == 1;
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t r = along_cols ? i : i + n.begin;
          const std::size_t c = along_cols ? j + n.begin : j;
          ga[r * ac + c] += g[i * cols + j];
        }
      }
      break;
    }
    case OpKind::Softmax: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto yv = y.values();
      const auto lanes = AxisLanes::of(n.shape, n.axis);
      for (std::size_t l = 0; l < lanes.count; ++l) {
        const std::size_t base = l * lanes.lane_step;
        Real dot = 0;
        for (std::size_t t = 0; t < lanes.length; ++t) {
          const std::size_t i = base + t * lanes.stride;
          dot += g[i] * yv[i];
        }
        for (std::size_t t = 0; t < lanes.length; ++t) {
          const std::size_t i = base + t * lanes.stride;
          ga[i] += yv[i] * (g[i] - dot);
        }
      }
      break;
    }
    case OpKind::LogSoftmax: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto yv = y.values();
      const auto lanes = AxisLanes::of(n.shape, n.axis);
      for (std::size_t l = 0; l < lanes.count; ++l) {
        const std::size_t base = l * lanes.lane_step;
        Real total = 0;
        for (std::size_t t = 0; t < lanes.length; ++t) total += g[base + t * lanes.stride];
        for (std::size_t t = 0; t < lanes.length; ++t) {
          const std::size_t i = base + t * lanes.stride;
          ga[i] += g[i] - std::exp(yv[i]) * total;
        }
      }
      break;
    }
    case OpKind::Log: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto a = in(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[i];
      break;
    }
    case OpKind::Exp: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto yv = y.values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * yv[i];
      break;
    }
    case OpKind::LayerNorm: {
      const auto x = in(0).values();
      const auto gamma = in(1).values();
      const std::size_t rows = view_rows(n.shape), width = view_cols(n.shape);
      const Real inv_w = 1.0 / static_cast<Real>(width);
      std::vector<Real> xhat(width), gxhat(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = x.data() + r * width;
        const Real* gr = g.data() + r * width;
        Real mu = 0;
        for (std::size_t j = 0; j < width; ++j) mu += xr[j];
        mu *= inv_w;
        const Real rstd = n.cache[r];
        Real sum_g = 0, sum_gx = 0;
        for (std::size_t j = 0; j < width; ++j) {
          xhat[j] = (xr[j] - mu) * rstd;
          gxhat[j] = gr[j] * gamma[j];
          sum_g += gxhat[j];
          sum_gx += gxhat[j] * xhat[j];
        }
        if (parent_wants(0)) {
          Real* gx = pgrad(0).data() + r * width;
          for (std::size_t j = 0; j < width; ++j)
            gx[j] += rstd * inv_w *
                     (static_cast<Real>(width) * gxhat[j] - sum_g - xhat[j] * sum_gx);
        }
        if (parent_wants(1)) {
          auto& gg = pgrad(1);
          for (std::size_t j = 0; j < width; ++j) gg[j] += gr[j] * xhat[j];
        }
        if (parent_wants(2)) {
          auto& gb = pgrad(2);
          for (std::size_t j = 0; j < width; ++j) gb[j] += gr[j];
        }
      }
      break;
    }
    case OpKind::Gelu: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto a = in(0).values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(a[i]);
      break;
    }
    case OpKind::Tanh: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto yv = y.values();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1 - yv[i] * yv[i]);
      break;
    }
    case OpKind::Dropout: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const auto m = n.mask.values();
      const Real inv_keep = 1.0 / n.factor;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * m[i] * inv_keep;
      break;
    }
    case OpKind::Scale: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.factor;
      break;
    }
    case OpKind::Sum:
    case OpKind::Mean: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const Real d = n.kind == OpKind::Sum ? g[0] : g[0] / static_cast<Real>(ga.size());
      for (auto& v : ga) v += d;
      break;
    }
    case OpKind::L2Norm: {
      if (!parent_wants(0)) break;
      auto& ga = pgrad(0);
      const Real norm = y[0];
      if (norm == 0) break;
      const auto a = in(0).values();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * a[i] / norm;
      break;
    }
    case OpKind::GatherRows: {
      if (!parent_wants(0)) break;
      auto& gt = pgrad(0);
      const std::size_t width = n.shape[1];
      for (std::size_t t = 0; t < n.ids.size(); ++t) {
        Real* dst = gt.data() + n.ids[t] * width;
        const Real* src = g.data() + t * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------

Real grad_check(Graph& graph, NodeId root, NodeId leaf, Real step) {
  if (!(step > 0)) throw ContractError("grad_check: step must be positive");
  if (graph.kind(leaf) != OpKind::Leaf) {
    throw ContractError("grad_check: target is not a leaf");
  }
  Tensor& values = graph.leaf_value(leaf);
  graph.retain_grad(leaf);
  graph.forward(root);
  graph.backward(root, BackwardOptions{.accumulate_into_parameters = false});
  const Tensor analytic = graph.gradient(leaf);

  Real worst = 0;
  auto v = values.values();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Real original = v[i];
    v[i] = original + step;
    const Real up = graph.forward(root).item();
    v[i] = original - step;
    const Real down = graph.forward(root).item();
    v[i] = original;
    const Real numeric = (up - down) / (2 * step);
    if (!std::isfinite(numeric)) {
      throw NumericError("grad_check: non-finite finite difference at entry " +
                         std::to_string(i));
    }
    const Real a = analytic[i];
    const Real denom = std::max({std::abs(a), std::abs(numeric), Real{1e-8}});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  graph.forward(root);
  return worst;
}

}  // namespace claimspot
