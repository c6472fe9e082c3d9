#include "pond/graph.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "pond/errors.hpp"

namespace pond::ng {

namespace {
// Calls f(i, ia, ib) over an elementwise binary op whose smaller operand
// repeats along the leading axes.
template <class F>
inline void broadcast2(std::size_t total, std::size_t na, std::size_t nb, F&& f) {
  if (na == total && nb == total) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
  } else if (na == total) {
    for (std::size_t base = 0; base < total; base += nb)
      for (std::size_t j = 0; j < nb; ++j) f(base + j, base + j, j);
  } else if (nb == total) {
    for (std::size_t base = 0; base < total; base += na)
      for (std::size_t j = 0; j < na; ++j) f(base + j, j, base + j);
  } else {
    for (std::size_t i = 0; i < total; ++i) f(i, i % na, i % nb);
  }
}
}  // namespace

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

bool is_suffix(const Shape& shorter, const Shape& longer) {
  if (shorter.size() > longer.size()) return false;
  return std::equal(shorter.begin(), shorter.end(), longer.end() - shorter.size());
}

Shape leading(const Shape& s) { return Shape(s.begin(), s.end() - 2); }

// [outer, axis extent, inner] view of a shape around `axis`.
struct AxisView {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out.empty()) out.push_back(1);
  return out;
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Calls fn(out_index, in_offset) for every element of the permuted tensor.
template <class Fn>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, Fn&& fn) {
  const auto in_strides = strides_of(in_shape);
  const std::size_t rank = in_shape.size();
  Shape out_shape(rank);
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_strides[perm[i]];
  }
  std::vector<std::size_t> idx(rank, 0);
  const std::size_t total = numel(in_shape);
  std::size_t offset = 0;
  for (std::size_t o = 0; o < total; ++o) {
    fn(o, offset);
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        offset += step[d];
        break;
      }
      offset -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Sqrt: return "sqrt";
    case Op::Softmax: return "softmax";
    case Op::LogSumExp: return "logsumexp";
    case Op::LayerNorm: return "layer_norm";
    case Op::Concat: return "concat";
    case Op::Slice: return "slice";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::Reshape: return "reshape";
    case Op::Transpose: return "transpose";
    case Op::Scale: return "scale";
    case Op::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

std::string Graph::describe(NodeId id) const {
  const auto& n = nodes_[id];
  std::string s = "node " + std::to_string(id) + " (" + std::string(op_name(n.op));
  if (!n.label.empty()) s += " '" + n.label + "'";
  return s + ")";
}

void Graph::check_input(NodeId id) const {
  if (id >= nodes_.size())
    throw InvalidArgument("input node " + std::to_string(id) + " does not exist");
}

NodeId Graph::push(Node node) {
  for (auto in : node.inputs) {
    check_input(in);
    node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
  }
  nodes_.push_back(std::move(node));
  values_.emplace_back();
  return nodes_.size() - 1;
}

NodeId Graph::leaf(Shape shape, bool trainable, std::string label) {
  if (shape.empty() || numel(shape) == 0)
    throw ShapeError("leaf '" + label + "' has an empty shape");
  Node n;
  n.op = Op::Leaf;
  n.shape = std::move(shape);
  n.trainable = trainable;
  n.needs_grad = trainable;
  n.label = std::move(label);
  return push(std::move(n));
}

NodeId Graph::leaf(Tensor value, bool trainable, std::string label) {
  NodeId id = leaf(value.shape(), trainable, std::move(label));
  values_[id] = std::move(value);
  nodes_[id].bound = true;
  return id;
}

void Graph::bind(NodeId id, Tensor value) {
  check_input(id);
  auto& n = nodes_[id];
  if (n.op != Op::Leaf) throw InvalidArgument(describe(id) + " is not a leaf");
  if (value.shape() != n.shape)
    throw ShapeError(describe(id) + " expects " + to_string(n.shape) + ", bound " +
                     to_string(value.shape()));
  values_[id] = std::move(value);
  n.bound = true;
  evaluated_upto_ = std::min(evaluated_upto_, id);
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  check_input(a);
  check_input(b);
  const Shape& sa = nodes_[a].shape;
  const Shape& sb = nodes_[b].shape;
  if (sa.size() < 2 || sb.size() < 2)
    throw ShapeError("matmul needs rank >= 2 operands, got " + to_string(sa) + " x " + to_string(sb) +
                     " at node " + std::to_string(nodes_.size()));
  if (sa[sa.size() - 1] != sb[sb.size() - 2])
    throw ShapeError("matmul inner extents differ: " + to_string(sa) + " x " + to_string(sb) +
                     " at node " + std::to_string(nodes_.size()));
  Shape la = leading(sa), lb = leading(sb);
  Shape out;
  if (is_suffix(lb, la))
    out = la;
  else if (is_suffix(la, lb))
    out = lb;
  else
    throw ShapeError("matmul batch axes not broadcastable: " + to_string(sa) + " x " + to_string(sb) +
                     " at node " + std::to_string(nodes_.size()));
  out.push_back(sa[sa.size() - 2]);
  out.push_back(sb[sb.size() - 1]);
  Node n;
  n.op = Op::MatMul;
  n.inputs = {a, b};
  n.shape = std::move(out);
  return push(std::move(n));
}

namespace {
Shape broadcast_shape(const Shape& a, const Shape& b, std::size_t at, std::string_view op) {
  if (is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  throw ShapeError(std::string(op) + " operands not broadcastable: " + to_string(a) + " vs " +
                   to_string(b) + " at node " + std::to_string(at));
}
}  // namespace

NodeId Graph::add(NodeId a, NodeId b) {
  check_input(a);
  check_input(b);
  Node n;
  n.op = Op::Add;
  n.inputs = {a, b};
  n.shape = broadcast_shape(nodes_[a].shape, nodes_[b].shape, nodes_.size(), "add");
  return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check_input(a);
  check_input(b);
  Node n;
  n.op = Op::Mul;
  n.inputs = {a, b};
  n.shape = broadcast_shape(nodes_[a].shape, nodes_[b].shape, nodes_.size(), "mul");
  return push(std::move(n));
}

#define POND_UNARY(fn, opkind)      \
  NodeId Graph::fn(NodeId x) {      \
    check_input(x);                 \
    Node n;                         \
    n.op = opkind;                  \
    n.inputs = {x};                 \
    n.shape = nodes_[x].shape;      \
    return push(std::move(n));      \
  }

POND_UNARY(relu, Op::Relu)
POND_UNARY(tanh, Op::Tanh)
POND_UNARY(exp, Op::Exp)
POND_UNARY(log, Op::Log)
POND_UNARY(sqrt, Op::Sqrt)
POND_UNARY(softmax, Op::Softmax)
#undef POND_UNARY

NodeId Graph::logsumexp(NodeId x) {
  check_input(x);
  Node n;
  n.op = Op::LogSumExp;
  n.inputs = {x};
  n.shape = drop_axis(nodes_[x].shape, nodes_[x].shape.size() - 1);
  return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId shift) {
  check_input(x);
  check_input(gain);
  check_input(shift);
  const Shape& sx = nodes_[x].shape;
  const Shape param{sx.back()};
  if (nodes_[gain].shape != param || nodes_[shift].shape != param)
    throw ShapeError("layer_norm scale/shift must be " + to_string(param) + " at node " +
                     std::to_string(nodes_.size()));
  Node n;
  n.op = Op::LayerNorm;
  n.inputs = {x, gain, shift};
  n.shape = sx;
  return push(std::move(n));
}

NodeId Graph::concat(std::span<const NodeId> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of nothing at node " + std::to_string(nodes_.size()));
  for (auto p : parts) check_input(p);
  Shape out = nodes_[parts[0]].shape;
  if (axis >= out.size())
    throw ShapeError("concat axis " + std::to_string(axis) + " out of range for " + to_string(out));
  out[axis] = 0;
  for (auto p : parts) {
    const Shape& s = nodes_[p].shape;
    bool ok = s.size() == out.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != out[i]) ok = false;
    if (!ok)
      throw ShapeError("concat operand " + to_string(s) + " incompatible with " +
                       to_string(nodes_[parts[0]].shape) + " on axis " + std::to_string(axis) +
                       " at node " + std::to_string(nodes_.size()));
    out[axis] += s[axis];
  }
  Node n;
  n.op = Op::Concat;
  n.inputs.assign(parts.begin(), parts.end());
  n.shape = std::move(out);
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId x, std::size_t axis, std::size_t start, std::size_t length) {
  check_input(x);
  Shape out = nodes_[x].shape;
  if (axis >= out.size() || length == 0 || start + length > out[axis])
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") on axis " +
                     std::to_string(axis) + " of " + to_string(out) + " at node " +
                     std::to_string(nodes_.size()));
  out[axis] = length;
  Node n;
  n.op = Op::Slice;
  n.inputs = {x};
  n.shape = std::move(out);
  n.axis = axis;
  n.start = start;
  n.length = length;
  return push(std::move(n));
}

NodeId Graph::mean(NodeId x, std::size_t axis) {
  check_input(x);
  const Shape& s = nodes_[x].shape;
  if (axis >= s.size())
    throw ShapeError("mean axis " + std::to_string(axis) + " out of range for " + to_string(s));
  Node n;
  n.op = Op::Mean;
  n.inputs = {x};
  n.shape = drop_axis(s, axis);
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
  check_input(x);
  Node n;
  n.op = Op::Sum;
  n.inputs = {x};
  n.shape = {1};
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, Shape shape) {
  check_input(x);
  if (shape.empty() || numel(shape) != numel(nodes_[x].shape))
    throw ShapeError("cannot reshape " + to_string(nodes_[x].shape) + " to " + to_string(shape) +
                     " at node " + std::to_string(nodes_.size()));
  Node n;
  n.op = Op::Reshape;
  n.inputs = {x};
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::transpose(NodeId x, std::vector<std::size_t> perm) {
  check_input(x);
  const Shape& s = nodes_[x].shape;
  std::vector<std::size_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  bool ok = perm.size() == s.size();
  for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == i;
  if (!ok)
    throw ShapeError("invalid transpose permutation for " + to_string(s) + " at node " +
                     std::to_string(nodes_.size()));
  Node n;
  n.op = Op::Transpose;
  n.inputs = {x};
  n.shape.resize(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) n.shape[i] = s[perm[i]];
  n.perm = std::move(perm);
  return push(std::move(n));
}

NodeId Graph::scale(NodeId x, double factor) {
  check_input(x);
  Node n;
  n.op = Op::Scale;
  n.inputs = {x};
  n.shape = nodes_[x].shape;
  n.factor = factor;
  return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId probs, NodeId onehot) {
  check_input(probs);
  check_input(onehot);
  const Shape& sp = nodes_[probs].shape;
  if (sp.size() != 2 || nodes_[onehot].shape != sp)
    throw ShapeError("cross_entropy needs matching [B,K] operands, got " + to_string(sp) + " and " +
                     to_string(nodes_[onehot].shape) + " at node " + std::to_string(nodes_.size()));
  Node n;
  n.op = Op::CrossEntropy;
  n.inputs = {probs, onehot};
  n.shape = {1};
  return push(std::move(n));
}

const Tensor& Graph::value(NodeId id) const {
  check_input(id);
  if (id >= evaluated_upto_ && !(nodes_[id].op == Op::Leaf && nodes_[id].bound))
    throw StateError(describe(id) + " has not been evaluated");
  return values_[id];
}

std::vector<NodeId> Graph::trainable_leaves() const {
  std::vector<NodeId> out;
  for (NodeId i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].op == Op::Leaf && nodes_[i].trainable) out.push_back(i);
  return out;
}

const Tensor& Graph::forward(const Bindings& bindings) {
  if (nodes_.empty()) throw StateError("forward on an empty graph");
  return forward(nodes_.size() - 1, bindings);
}

const Tensor& Graph::forward(NodeId root, const Bindings& bindings) {
  check_input(root);
  for (const auto& [id, t] : bindings) bind(id, t);
  for (NodeId id = evaluated_upto_; id <= root; ++id) {
    auto& n = nodes_[id];
    if (n.op == Op::Leaf) {
      if (!n.bound) throw StateError(describe(id) + " is not bound");
      if (!values_[id].all_finite()) throw NumericFault(describe(id) + " holds non-finite values");
      continue;
    }
    values_[id] = evaluate(id);
    if (!values_[id].all_finite())
      throw NumericFault(describe(id) + " produced a non-finite value from finite inputs");
  }
  evaluated_upto_ = std::max(evaluated_upto_, root + 1);
  return values_[root];
}

Tensor Graph::evaluate(NodeId id) const {
  const Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return values_[n.inputs[k]]; };
  Tensor out(n.shape);
  double* o = out.raw();
  const std::size_t total = out.size();

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t M = a.shape()[a.rank() - 2], K = a.shape().back(), N = b.shape().back();
      const std::size_t na = numel(leading(a.shape())), nb = numel(leading(b.shape()));
      const std::size_t batches = std::max(na, nb);
      for (std::size_t i = 0; i < batches; ++i) {
        ConstMapMat A(a.raw() + (i % na) * M * K, M, K);
        ConstMapMat B(b.raw() + (i % nb) * K * N, K, N);
        MapMat C(o + i * M * N, M, N);
        C.noalias() = A * B;
      }
      break;
    }
    case Op::Add:
    case Op::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t na = a.size(), nb = b.size();
      const double* pa = a.raw();
      const double* pb = b.raw();
      if (n.op == Op::Add)
        broadcast2(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] + pb[ib]; });
      else
        broadcast2(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = pa[ia] * pb[ib]; });
      break;
    }
    case Op::Relu:
      for (std::size_t i = 0; i < total; ++i) o[i] = in(0)[i] > 0.0 ? in(0)[i] : 0.0;
      break;
    case Op::Tanh:
      for (std::size_t i = 0; i < total; ++i) o[i] = std::tanh(in(0)[i]);
      break;
    case Op::Exp:
      for (std::size_t i = 0; i < total; ++i) o[i] = std::exp(in(0)[i]);
      break;
    case Op::Log:
      for (std::size_t i = 0; i < total; ++i) o[i] = std::log(in(0)[i]);
      break;
    case Op::Sqrt:
      for (std::size_t i = 0; i < total; ++i) o[i] = std::sqrt(in(0)[i]);
      break;
    case Op::Softmax: {
      const Tensor& x = in(0);
      const std::size_t d = n.shape.back(), rows = total / d;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.raw() + r * d;
        double* yr = o + r * d;
        const double mx = *std::max_element(xr, xr + d);
        double z = 0.0;
        for (std::size_t k = 0; k < d; ++k) z += (yr[k] = std::exp(xr[k] - mx));
        for (std::size_t k = 0; k < d; ++k) yr[k] /= z;
      }
      break;
    }
    case Op::LogSumExp: {
      const Tensor& x = in(0);
      const std::size_t d = x.shape().back(), rows = x.size() / d;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.raw() + r * d;
        const double mx = *std::max_element(xr, xr + d);
        double z = 0.0;
        for (std::size_t k = 0; k < d; ++k) z += std::exp(xr[k] - mx);
        o[r] = mx + std::log(z);
      }
      break;
    }
    case Op::LayerNorm: {
      const Tensor& x = in(0);
      const Tensor& g = in(1);
      const Tensor& s = in(2);
      const std::size_t d = n.shape.back(), rows = total / d;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.raw() + r * d;
        double mu = 0.0;
        for (std::size_t k = 0; k < d; ++k) mu += xr[k];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t k = 0; k < d; ++k) var += (xr[k] - mu) * (xr[k] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        for (std::size_t k = 0; k < d; ++k) o[r * d + k] = (xr[k] - mu) * inv * g[k] + s[k];
      }
      break;
    }
    case Op::Concat: {
      const AxisView ov = axis_view(n.shape, n.axis);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& p = in(k);
        const std::size_t ext = p.shape()[n.axis];
        const std::size_t chunk = ext * ov.inner;
        for (std::size_t r = 0; r < ov.outer; ++r)
          std::copy_n(p.raw() + r * chunk, chunk, o + r * ov.extent * ov.inner + offset * ov.inner);
        offset += ext;
      }
      break;
    }
    case Op::Slice: {
      const AxisView iv = axis_view(in(0).shape(), n.axis);
      const std::size_t chunk = n.length * iv.inner;
      for (std::size_t r = 0; r < iv.outer; ++r)
        std::copy_n(in(0).raw() + r * iv.extent * iv.inner + n.start * iv.inner, chunk, o + r * chunk);
      break;
    }
    case Op::Mean: {
      const AxisView iv = axis_view(in(0).shape(), n.axis);
      const double* x = in(0).raw();
      for (std::size_t r = 0; r < iv.outer; ++r)
        for (std::size_t j = 0; j < iv.inner; ++j) {
          double acc = 0.0;
          for (std::size_t k = 0; k < iv.extent; ++k) acc += x[(r * iv.extent + k) * iv.inner + j];
          o[r * iv.inner + j] = acc / static_cast<double>(iv.extent);
        }
      break;
    }
    case Op::Sum: {
      double acc = 0.0;
      for (double v : in(0).values()) acc += v;
      o[0] = acc;
      break;
    }
    case Op::Reshape:
      std::copy_n(in(0).raw(), total, o);
      break;
    case Op::Transpose: {
      const double* x = in(0).raw();
      for_each_permuted(in(0).shape(), n.perm, [&](std::size_t oi, std::size_t ii) { o[oi] = x[ii]; });
      break;
    }
    case Op::Scale:
      for (std::size_t i = 0; i < total; ++i) o[i] = n.factor * in(0)[i];
      break;
    case Op::CrossEntropy: {
      const Tensor& p = in(0);
      const Tensor& y = in(1);
      const double batch = static_cast<double>(p.shape()[0]);
      double acc = 0.0;
      for (std::size_t i = 0; i < p.size(); ++i)
        if (y[i] != 0.0) acc -= y[i] * std::log(p[i]);
      o[0] = acc / batch;
      break;
    }
  }
  return out;
}

namespace {
// Adds `src` into `dst`, summing over the leading axes `dst` was broadcast over.
void reduce_into(Tensor& dst, const Tensor& src) {
  const std::size_t nd = dst.size();
  double* d = dst.raw();
  const double* s = src.raw();
  for (std::size_t base = 0; base < src.size(); base += nd)
    for (std::size_t j = 0; j < nd; ++j) d[j] += s[base + j];
}
}  // namespace

void Graph::accumulate_input_grads(NodeId id, const Tensor& g, std::vector<Tensor>& grads) const {
  const Node& n = nodes_[id];
  auto in = [&](std::size_t k) -> const Tensor& { return values_[n.inputs[k]]; };
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };
  auto slot = [&](std::size_t k) -> Tensor& {
    Tensor& t = grads[n.inputs[k]];
    if (t.size() == 0) t = Tensor(nodes_[n.inputs[k]].shape);
    return t;
  };
  const Tensor& y = values_[id];
  const double* gy = g.raw();
  const std::size_t total = g.size();

  switch (n.op) {
    case Op::Leaf:
      break;
    case Op::MatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t M = a.shape()[a.rank() - 2], K = a.shape().back(), N = b.shape().back();
      const std::size_t na = numel(leading(a.shape())), nb = numel(leading(b.shape()));
      const std::size_t batches = std::max(na, nb);
      if (wants(0)) {
        Tensor& ga = slot(0);
        for (std::size_t i = 0; i < batches; ++i) {
          ConstMapMat G(gy + i * M * N, M, N);
          ConstMapMat B(b.raw() + (i % nb) * K * N, K, N);
          MapMat GA(ga.raw() + (i % na) * M * K, M, K);
          GA.noalias() += G * B.transpose();
        }
      }
      if (wants(1)) {
        Tensor& gb = slot(1);
        for (std::size_t i = 0; i < batches; ++i) {
          ConstMapMat G(gy + i * M * N, M, N);
          ConstMapMat A(a.raw() + (i % na) * M * K, M, K);
          MapMat GB(gb.raw() + (i % nb) * K * N, K, N);
          GB.noalias() += A.transpose() * G;
        }
      }
      break;
    }
    case Op::Add:
      if (wants(0)) reduce_into(slot(0), g);
      if (wants(1)) reduce_into(slot(1), g);
      break;
    case Op::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t na = a.size(), nb = b.size();
      if (wants(0)) {
        double* ga = slot(0).raw();
        const double* pb = b.raw();
        broadcast2(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += gy[i] * pb[ib]; });
      }
      if (wants(1)) {
        double* gb = slot(1).raw();
        const double* pa = a.raw();
        broadcast2(total, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += gy[i] * pa[ia]; });
      }
      break;
    }
    case Op::Relu: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += in(0)[i] > 0.0 ? gy[i] : 0.0;
      break;
    }
    case Op::Tanh: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += gy[i] * (1.0 - y[i] * y[i]);
      break;
    }
    case Op::Exp: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += gy[i] * y[i];
      break;
    }
    case Op::Log: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += gy[i] / in(0)[i];
      break;
    }
    case Op::Sqrt: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += gy[i] / (2.0 * y[i]);
      break;
    }
    case Op::Softmax: {
      double* gx = slot(0).raw();
      const std::size_t d = n.shape.back(), rows = total / d;
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t k = 0; k < d; ++k) dot += gy[r * d + k] * y[r * d + k];
        for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += y[r * d + k] * (gy[r * d + k] - dot);
      }
      break;
    }
    case Op::LogSumExp: {
      const Tensor& x = in(0);
      double* gx = slot(0).raw();
      const std::size_t d = x.shape().back(), rows = x.size() / d;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < d; ++k) gx[r * d + k] += gy[r] * std::exp(x[r * d + k] - y[r]);
      break;
    }
    case Op::LayerNorm: {
      const Tensor& x = in(0);
      const Tensor& gain = in(1);
      const std::size_t d = n.shape.back(), rows = total / d;
      const double dd = static_cast<double>(d);
      std::vector<double> xhat(d), dxhat(d);
      double* gx = wants(0) ? slot(0).raw() : nullptr;
      double* gg = wants(1) ? slot(1).raw() : nullptr;
      double* gs = wants(2) ? slot(2).raw() : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.raw() + r * d;
        const double* gr = gy + r * d;
        double mu = 0.0;
        for (std::size_t k = 0; k < d; ++k) mu += xr[k];
        mu /= dd;
        double var = 0.0;
        for (std::size_t k = 0; k < d; ++k) var += (xr[k] - mu) * (xr[k] - mu);
        var /= dd;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEpsilon);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          xhat[k] = (xr[k] - mu) * inv;
          dxhat[k] = gr[k] * gain[k];
          mean_dxhat += dxhat[k];
          mean_dxhat_xhat += dxhat[k] * xhat[k];
          if (gg) gg[k] += gr[k] * xhat[k];
          if (gs) gs[k] += gr[k];
        }
        mean_dxhat /= dd;
        mean_dxhat_xhat /= dd;
        if (gx)
          for (std::size_t k = 0; k < d; ++k)
            gx[r * d + k] += inv * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
      }
      break;
    }
    case Op::Concat: {
      const AxisView ov = axis_view(n.shape, n.axis);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t ext = nodes_[n.inputs[k]].shape[n.axis];
        if (wants(k)) {
          double* gp = slot(k).raw();
          const std::size_t chunk = ext * ov.inner;
          for (std::size_t r = 0; r < ov.outer; ++r) {
            const double* src = gy + r * ov.extent * ov.inner + offset * ov.inner;
            for (std::size_t j = 0; j < chunk; ++j) gp[r * chunk + j] += src[j];
          }
        }
        offset += ext;
      }
      break;
    }
    case Op::Slice: {
      const AxisView iv = axis_view(nodes_[n.inputs[0]].shape, n.axis);
      const std::size_t chunk = n.length * iv.inner;
      double* gx = slot(0).raw();
      for (std::size_t r = 0; r < iv.outer; ++r) {
        double* dst = gx + r * iv.extent * iv.inner + n.start * iv.inner;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += gy[r * chunk + j];
      }
      break;
    }
    case Op::Mean: {
      const AxisView iv = axis_view(nodes_[n.inputs[0]].shape, n.axis);
      double* gx = slot(0).raw();
      const double w = 1.0 / static_cast<double>(iv.extent);
      for (std::size_t r = 0; r < iv.outer; ++r)
        for (std::size_t k = 0; k < iv.extent; ++k)
          for (std::size_t j = 0; j < iv.inner; ++j)
            gx[(r * iv.extent + k) * iv.inner + j] += w * gy[r * iv.inner + j];
      break;
    }
    case Op::Sum: {
      Tensor& gx = slot(0);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0];
      break;
    }
    case Op::Reshape: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += gy[i];
      break;
    }
    case Op::Transpose: {
      double* gx = slot(0).raw();
      for_each_permuted(nodes_[n.inputs[0]].shape, n.perm,
                        [&](std::size_t oi, std::size_t ii) { gx[ii] += gy[oi]; });
      break;
    }
    case Op::Scale: {
      double* gx = slot(0).raw();
      for (std::size_t i = 0; i < total; ++i) gx[i] += n.factor * gy[i];
      break;
    }
    case Op::CrossEntropy: {
      const Tensor& p = in(0);
      const Tensor& t = in(1);
      const double batch = static_cast<double>(p.shape()[0]);
      if (wants(0)) {
        double* gp = slot(0).raw();
        for (std::size_t i = 0; i < p.size(); ++i)
          if (t[i] != 0.0) gp[i] -= gy[0] * t[i] / (p[i] * batch);
      }
      if (wants(1)) {
        double* gt = slot(1).raw();
        for (std::size_t i = 0; i < p.size(); ++i) gt[i] -= gy[0] * std::log(p[i]) / batch;
      }
      break;
    }
  }
}

Gradients Graph::backward(NodeId root) const {
  check_input(root);
  if (root >= evaluated_upto_) throw StateError("backward from " + describe(root) + " before forward");
  if (numel(nodes_[root].shape) != 1)
    throw ShapeError("backward root " + describe(root) + " is not scalar: " + to_string(nodes_[root].shape));

  std::vector<Tensor> grads(root + 1);
  grads[root] = Tensor::filled(nodes_[root].shape, 1.0);
  for (NodeId id = root + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (n.op == Op::Leaf || !n.needs_grad || grads[id].size() == 0) continue;
    accumulate_input_grads(id, grads[id], grads);
  }

  Gradients out;
  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.op != Op::Leaf || !n.trainable) continue;
    if (id <= root && grads[id].size() != 0)
      out.emplace(id, std::move(grads[id]));
    else
      out.emplace(id, Tensor(n.shape));
  }
  return out;
}

}  // namespace pond::ng
