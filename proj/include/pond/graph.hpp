#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pond/tensor.hpp"

namespace pond::ng {

using NodeId = std::size_t;
using Bindings = std::unordered_map<NodeId, Tensor>;
using Gradients = std::map<NodeId, Tensor>;

enum class Op {
  Leaf,
  MatMul,
  Add,
  Mul,
  Relu,
  Tanh,
  Exp,
  Log,
  Sqrt,
  Softmax,
  LogSumExp,
  LayerNorm,
  Concat,
  Slice,
  Mean,
  Sum,
  Reshape,
  Transpose,
  Scale,
  CrossEntropy,
};

std::string_view op_name(Op op);

inline constexpr double kLayerNormEpsilon = 1e-5;

// A define-then-run computation graph.
//
// Nodes are appended in topological order: every node's inputs precede it.
// Shapes are inferred at construction, so shape errors surface where the
// offending node is added. `forward` evaluates and caches every node value;
// `backward` then walks the nodes once in reverse order.
//
// Broadcasting (add, mul, matmul batch axes) is limited to leading-axis
// expansion: the smaller operand's shape must be a suffix of the larger's.
class Graph {
 public:
  // Unbound leaf; must be supplied through forward's bindings.
  NodeId leaf(Shape shape, bool trainable = false, std::string label = {});
  // Leaf bound to `value` until rebound.
  NodeId leaf(Tensor value, bool trainable = false, std::string label = {});
  NodeId constant(Tensor value, std::string label = {}) {
    return leaf(std::move(value), false, std::move(label));
  }

  // a [..., M, K] x b [..., K, N] -> [..., M, N]
  NodeId matmul(NodeId a, NodeId b);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b) { return add(a, scale(b, -1.0)); }
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  NodeId exp(NodeId x);
  NodeId log(NodeId x);
  NodeId sqrt(NodeId x);
  // Along the last axis.
  NodeId softmax(NodeId x);
  // Along the last axis; the axis is removed.
  NodeId logsumexp(NodeId x);
  // Normalizes the last axis, then applies learnable scale and shift of
  // shape [last extent].
  NodeId layer_norm(NodeId x, NodeId gain, NodeId shift);
  NodeId concat(std::span<const NodeId> parts, std::size_t axis);
  NodeId slice(NodeId x, std::size_t axis, std::size_t start, std::size_t length);
  // The axis is removed (a rank-1 input yields shape [1]).
  NodeId mean(NodeId x, std::size_t axis);
  // Sum of all entries, shape [1].
  NodeId sum(NodeId x);
  NodeId reshape(NodeId x, Shape shape);
  NodeId transpose(NodeId x, std::vector<std::size_t> perm);
  NodeId scale(NodeId x, double factor);
  // -(1/B) * sum_b sum_k onehot[b,k] * log(probs[b,k]) for probs [B, K].
  NodeId cross_entropy(NodeId probs, NodeId onehot);

  // Replaces the value bound to a leaf.
  void bind(NodeId leaf, Tensor value);

  // Evaluates every node up to and including `root`, caching values.
  const Tensor& forward(NodeId root, const Bindings& bindings = {});
  // Evaluates the whole graph; returns the last node's value.
  const Tensor& forward(const Bindings& bindings = {});

  // Gradient of the scalar `root` w.r.t. every trainable leaf.
  Gradients backward(NodeId root) const;

  const Tensor& value(NodeId id) const;
  const Shape& shape(NodeId id) const { return nodes_.at(id).shape; }
  Op op(NodeId id) const { return nodes_.at(id).op; }
  bool trainable(NodeId id) const { return nodes_.at(id).trainable; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<NodeId> trainable_leaves() const;
  bool evaluated() const noexcept { return evaluated_upto_ > 0; }

 private:
  struct Node {
    Op op = Op::Leaf;
    std::vector<NodeId> inputs;
    Shape shape;
    bool trainable = false;
    bool needs_grad = false;
    bool bound = false;
    std::string label;
    // Attributes; meaning depends on op.
    std::size_t axis = 0;
    std::size_t start = 0;
    std::size_t length = 0;
    double factor = 1.0;
    std::vector<std::size_t> perm;
  };

  NodeId push(Node node);
  std::string describe(NodeId id) const;
  void check_input(NodeId id) const;
  Tensor evaluate(NodeId id) const;
  void accumulate_input_grads(NodeId id, const Tensor& grad, std::vector<Tensor>& grads) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::size_t evaluated_upto_ = 0;
};

}  // namespace pond::ng
