// SPDX-License-Identifier: Apache-2.0
//
// Minimal define-then-run reverse-mode automatic differentiation over dense
// row-major tensors. A Graph is built once per step, evaluated with
// forward(), and differentiated with backward(); leaves may own their data or
// reference tensors that live elsewhere (model parameters).
#pragma once

#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace claimspot {

using Real = double;
using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Dense real array with an optional gradient slot.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real{0});
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor scalar(Real value);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  /// Row count when viewed as a matrix (rank-1 tensors are a single row).
  std::size_t rows() const noexcept;
  std::size_t cols() const noexcept;

  std::span<Real> values() noexcept { return values_; }
  std::span<const Real> values() const noexcept { return values_; }
  Real& operator[](std::size_t i) { return values_[i]; }
  Real operator[](std::size_t i) const { return values_[i]; }
  Real& at(std::size_t row, std::size_t col) { return values_[row * cols() + col]; }
  Real at(std::size_t row, std::size_t col) const { return values_[row * cols() + col]; }
  /// Value of a single-element tensor.
  Real item() const;

  bool requires_grad() const noexcept { return requires_grad_; }
  void set_requires_grad(bool on) noexcept { requires_grad_ = on; }

  bool has_grad() const noexcept { return grad_.has_value(); }
  std::span<Real> grad();
  std::span<const Real> grad() const;
  /// Allocates (or resets) the gradient slot to zeros.
  void zero_grad();
  void clear_grad() noexcept { grad_.reset(); }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.values_ == b.values_;
  }

 private:
  Shape shape_;
  std::vector<Real> values_;
  bool requires_grad_ = false;
  std::optional<std::vector<Real>> grad_;
};

enum class OpKind {
  Leaf,
  Add,
  Subtract,
  Multiply,
  MatMul,
  Transpose,
  Concat,
  Slice,
  Softmax,
  LogSoftmax,
  Log,
  Exp,
  LayerNorm,
  Gelu,
  Tanh,
  Dropout,
  Scale,
  Sum,
  Mean,
  L2Norm,
  GatherRows,
};

std::string_view op_name(OpKind kind);

/// Handle to a node inside one Graph.
struct NodeId {
  std::size_t index = 0;
  auto operator<=>(const NodeId&) const = default;
};

/// Epsilon added to the variance in layer normalization.
inline constexpr Real kLayerNormEpsilon = 1e-12;

struct BackwardOptions {
  /// Add leaf gradients into the referenced parameter tensors' grad slots.
  bool accumulate_into_parameters = true;
  /// Gradient seeded at the root; backward then yields d(seed * root).
  Real seed = 1;
};

/// Computation graph. Nodes are appended in topological order; the structure
/// is fixed once built and only leaf values may change between evaluations.
class Graph {
 public:
  /// Owned leaf; differentiated when `value.requires_grad()` is set.
  NodeId input(Tensor value);
  /// Owned leaf that is never differentiated.
  NodeId constant(Tensor value);
  /// Leaf referencing an external tensor. backward() accumulates into
  /// `tensor.grad()` when the tensor requires grad.
  NodeId parameter(Tensor& tensor);
  /// Read-only leaf referencing an external tensor; never differentiated.
  NodeId constant_ref(const Tensor& tensor);

  /// Elementwise sum. `b` may also be a row vector broadcast over the rows of `a`.
  NodeId add(NodeId a, NodeId b);
  NodeId subtract(NodeId a, NodeId b);
  NodeId multiply(NodeId a, NodeId b);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  NodeId concat(std::span<const NodeId> parts, std::size_t axis);
  NodeId slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end);
  NodeId softmax(NodeId a, std::size_t axis);
  NodeId log_softmax(NodeId a, std::size_t axis);
  NodeId log(NodeId a);
  NodeId exp(NodeId a);
  /// Row-wise normalization over the last axis, then `gamma * x + beta`.
  NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta);
  NodeId gelu(NodeId a);
  NodeId tanh(NodeId a);
  /// `a * mask / keep_prob` with an externally drawn 0/1 mask.
  NodeId dropout(NodeId a, Tensor mask, Real keep_prob);
  NodeId scale(NodeId a, Real factor);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId l2_norm(NodeId a);
  /// Row lookup: output row t is `table[ids[t]]`.
  NodeId gather_rows(NodeId table, std::vector<std::size_t> ids);

  /// Keep the gradient of an interior node so it can be read after backward.
  void retain_grad(NodeId node);

  /// Evaluates every ancestor of `root` and returns the root's value.
  const Tensor& forward(NodeId root);
  /// Propagates d(root)/d(node) to every node on a path to a differentiable
  /// leaf or retained node. `root` must hold a single element.
  void backward(NodeId root, BackwardOptions options = {});

  const Tensor& value(NodeId node) const;
  Tensor gradient(NodeId node) const;
  const Shape& shape(NodeId node) const;
  OpKind kind(NodeId node) const;
  std::span<const std::size_t> parents(NodeId node) const;
  /// Mutable storage behind a leaf; used to probe the graph numerically.
  Tensor& leaf_value(NodeId node);
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> parents;
    Shape shape;
    Tensor data;  // leaf storage or cached forward output
    const Tensor* external = nullptr;
    Tensor* external_mut = nullptr;
    bool differentiable_leaf = false;
    bool retained = false;
    bool evaluated = false;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    Real factor = 0;
    Tensor mask;
    std::vector<std::size_t> ids;
    std::vector<Real> cache;
    std::vector<Real> grad;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;
  Node& node(NodeId id);
  const Tensor& node_value(const Node& n) const;
  std::vector<char> ancestors(NodeId root) const;
  void evaluate(std::size_t index);
  void propagate(std::size_t index, const std::vector<char>& wants);

  std::vector<Node> nodes_;
  std::optional<std::size_t> last_forward_root_;
  bool backward_done_ = false;
};

/// Maximum over the leaf's entries of
/// |analytic - central difference| / max(|analytic|, |central difference|, 1e-8).
/// Leaf values are restored before returning.
Real grad_check(Graph& graph, NodeId root, NodeId leaf, Real step);

}  // namespace claimspot
