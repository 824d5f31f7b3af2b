// Copyright 2026 The PromptFuse Lab Authors
// SPDX-License-Identifier: Apache-2.0

// Tape-based reverse-mode automatic differentiation over rank-2 tensors.
//
// A Graph records every operation as it is executed. Nodes are appended in
// execution order, so the node vector is already a topological order and
// backward() is a single reverse sweep. The primitive set is deliberately
// small: exactly what the transformer, the modality encoders and the prompt
// encoders need. There is no implicit broadcasting; row-vector bias addition
// and row repetition are explicit primitives.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "promptfuse/error.hpp"
#include "promptfuse/tensor.hpp"

namespace promptfuse::ad {

using NodeId = std::size_t;

enum class OpKind {
  kLeaf,
  kMatMul,
  kMatMulNT,
  kAdd,
  kSub,
  kMul,
  kScale,
  kAddRow,
  kRepeatRows,
  kMaskedSoftmax,
  kLayerNorm,
  kGelu,
  kRelu,
  kTanh,
  kSigmoid,
  kEmbedding,
  kConcatRows,
  kConcatCols,
  kSliceRows,
  kSliceCols,
  kMeanRows,
  kSum,
  kCrossEntropy,
  kLogSoftmaxAt,
  kGather,
};

const char* op_name(OpKind kind);

// Additive mask value for blocked attention entries. exp(kMaskedLogit - max)
// underflows to exactly zero in both float and double.
template <typename T>
constexpr T kMaskedLogit = T(-1e30);

template <typename T>
class Graph;

// Lightweight handle to a node of a Graph.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Graph<T>* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph<T>& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  Graph<T>* graph_ = nullptr;
  NodeId id_ = 0;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return Var<T>(this, push(OpKind::kLeaf, {}, std::move(value), nullptr, requires_grad));
  }
  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  // Appends an operation node. requires_grad is inherited from the inputs.
  NodeId push(OpKind kind, std::vector<NodeId> inputs, Tensor<T> value, BackwardFn fn,
              bool leaf_requires_grad = false) {
    if (in_backward_) {
      fail(ErrorCategory::kGraphState, "graph mutated during backward");
    }
    Node node;
    node.kind = kind;
    node.requires_grad = leaf_requires_grad;
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) {
        fail(ErrorCategory::kGraphState, "node input refers to a later node");
      }
      node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
    }
    node.inputs = std::move(inputs);
    node.value = std::move(value);
    if (node.requires_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return nodes_.size() - 1;
  }

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<NodeId>& inputs(NodeId id) const { return nodes_.at(id).inputs; }
  const Tensor<T>& value(NodeId id) const { return nodes_.at(id).value; }
  bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  // Gradient of the last backward() output with respect to node `id`, or
  // nullopt when the node does not require gradients. Only leaf gradients are
  // retained after backward().
  std::optional<Tensor<T>> grad(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (!n.requires_grad || !backward_done_) return std::nullopt;
    if (n.grad.empty() && n.value.size() != 0) return Tensor<T>(n.value.rows(), n.value.cols());
    return n.grad;
  }
  std::optional<Tensor<T>> grad(const Var<T>& v) const { return grad(v.id()); }

  void backward(const Var<T>& output) {
    const NodeId out = output.id();
    if (nodes_.at(out).value.shape() != Shape{1, 1}) {
      fail(ErrorCategory::kShapeMismatch,
           "backward requires a scalar output, got " + to_string(nodes_[out].value.shape()));
    }
    in_backward_ = true;
    for (Node& n : nodes_) n.grad = Tensor<T>();
    if (nodes_[out].requires_grad) {
      nodes_[out].grad = Tensor<T>(1, 1, T(1));
      for (NodeId id = out + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, id);
        if (n.kind != OpKind::kLeaf) n.grad = Tensor<T>();
      }
    }
    in_backward_ = false;
    backward_done_ = true;
  }

  // Used by backward functions.
  const Tensor<T>& grad_out(NodeId id) const { return nodes_[id].grad; }

  // Gradient accumulator for input `id`, allocated on first use; nullptr when
  // the input does not require gradients.
  Tensor<T>* grad_sink(NodeId id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.rows(), n.value.cols());
    return &n.grad;
  }

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool in_backward_ = false;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph_->value(id_);
}

template <typename T>
bool Var<T>::requires_grad() const {
  return graph_->requires_grad(id_);
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void check(bool ok, ErrorCategory cat, const std::string& msg) {
  if (!ok) fail(cat, msg);
}

template <typename T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  check(a.shape() == b.shape(), ErrorCategory::kShapeMismatch,
        std::string(op) + ": " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename T>
void same_graph(const Var<T>& a, const Var<T>& b) {
  check(&a.graph() == &b.graph(), ErrorCategory::kGraphState, "operands from different graphs");
}

}  // namespace detail

// A * B
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::same_graph(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  detail::check(b.rows() == k, ErrorCategory::kShapeMismatch,
                "matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> out(m, n);
  kernels::gemm_nn(m, k, n, a.value().data(), b.value().data(), out.data());
  const NodeId ia = a.id(), ib = b.id();
  auto fn = [ia, ib, m, k, n](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* da = g.grad_sink(ia)) {
      kernels::gemm_nt(m, n, k, go.data(), g.value(ib).data(), da->data());
    }
    if (Tensor<T>* db = g.grad_sink(ib)) {
      kernels::gemm_tn(k, m, n, g.value(ia).data(), go.data(), db->data());
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kMatMul, {ia, ib}, std::move(out), fn));
}

// A * B^T
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::same_graph(a, b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  detail::check(b.cols() == k, ErrorCategory::kShapeMismatch,
                "matmul_nt: " + to_string(a.shape()) + " x " + to_string(b.shape()) + "^T");
  Tensor<T> out(m, n);
  kernels::gemm_nt(m, k, n, a.value().data(), b.value().data(), out.data());
  const NodeId ia = a.id(), ib = b.id();
  auto fn = [ia, ib, m, k, n](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* da = g.grad_sink(ia)) {
      kernels::gemm_nn(m, n, k, go.data(), g.value(ib).data(), da->data());
    }
    if (Tensor<T>* db = g.grad_sink(ib)) {
      kernels::gemm_tn(n, m, k, go.data(), g.value(ia).data(), db->data());
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kMatMulNT, {ia, ib}, std::move(out), fn));
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_graph(a, b);
  detail::same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const NodeId ia = a.id(), ib = b.id();
  auto fn = [ia, ib](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    for (NodeId in : {ia, ib}) {
      if (Tensor<T>* d = g.grad_sink(in)) {
        for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i];
      }
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kAdd, {ia, ib}, std::move(out), fn));
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::same_graph(a, b);
  detail::same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const NodeId ia = a.id(), ib = b.id();
  auto fn = [ia, ib](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* d = g.grad_sink(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i];
    }
    if (Tensor<T>* d = g.grad_sink(ib)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] -= go[i];
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kSub, {ia, ib}, std::move(out), fn));
}

// Elementwise product.
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_graph(a, b);
  detail::same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const Tensor<T>& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const NodeId ia = a.id(), ib = b.id();
  auto fn = [ia, ib](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* d = g.grad_sink(ia)) {
      const Tensor<T>& bv = g.value(ib);
      for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * bv[i];
    }
    if (Tensor<T>* d = g.grad_sink(ib)) {
      const Tensor<T>& av = g.value(ia);
      for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * av[i];
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kMul, {ia, ib}, std::move(out), fn));
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& x : out.values()) x *= factor;
  const NodeId ia = a.id();
  auto fn = [ia, factor](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* d = g.grad_sink(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * factor;
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kScale, {ia}, std::move(out), fn));
}

// Adds the 1xC row vector `row` to every row of `a` (bias addition).
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  detail::same_graph(a, row);
  detail::check(row.rows() == 1 && row.cols() == a.cols(), ErrorCategory::kShapeMismatch,
                "add_row: " + to_string(a.shape()) + " + " + to_string(row.shape()));
  Tensor<T> out = a.value();
  const Tensor<T>& rv = row.value();
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto o = out.row(r);
    for (std::size_t c = 0; c < o.size(); ++c) o[c] += rv[c];
  }
  const NodeId ia = a.id(), ir = row.id();
  auto fn = [ia, ir](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* d = g.grad_sink(ia)) {
      for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i];
    }
    if (Tensor<T>* d = g.grad_sink(ir)) {
      for (std::size_t r = 0; r < go.rows(); ++r) {
        auto gr = go.row(r);
        for (std::size_t c = 0; c < gr.size(); ++c) (*d)[c] += gr[c];
      }
    }
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kAddRow, {ia, ir}, std::move(out), fn));
}

// Stacks `count` copies of the 1xC row vector.
template <typename T>
Var<T> repeat_rows(const Var<T>& row, std::size_t count) {
  detail::check(row.rows() == 1, ErrorCategory::kShapeMismatch,
                "repeat_rows expects a row vector, got " + to_string(row.shape()));
  Tensor<T> out(count, row.cols());
  for (std::size_t r = 0; r < count; ++r) {
    std::copy(row.value().data(), row.value().data() + row.cols(), out.row(r).data());
  }
  const NodeId ir = row.id();
  auto fn = [ir](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    if (Tensor<T>* d = g.grad_sink(ir)) {
      for (std::size_t r = 0; r < go.rows(); ++r) {
        auto gr = go.row(r);
        for (std::size_t c = 0; c < gr.size(); ++c) (*d)[c] += gr[c];
      }
    }
  };
  return Var<T>(&row.graph(), row.graph().push(OpKind::kRepeatRows, {ir}, std::move(out), fn));
}

// Row-wise softmax of (logits + mask). `mask` holds 0 for visible entries and
// kMaskedLogit for blocked ones; blocked entries come out as exactly 0.
template <typename T>
Var<T> masked_softmax(const Var<T>& logits, const Tensor<T>& mask) {
  detail::check(mask.shape() == logits.shape(), ErrorCategory::kShapeMismatch,
                "masked_softmax: mask " + to_string(mask.shape()) + " vs logits " +
                    to_string(logits.shape()));
  const Tensor<T>& x = logits.value();
  Tensor<T> out(x.rows(), x.cols());
  const T blocked = kMaskedLogit<T> / T(2);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    auto mr = mask.row(r);
    auto orow = out.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    bool any_open = false;
    for (std::size_t c = 0; c < xr.size(); ++c) {
      if (mr[c] > blocked) {
        any_open = true;
        mx = std::max(mx, xr[c] + mr[c]);
      }
    }
    if (!any_open) {
      fail(ErrorCategory::kInvalidArgument,
           "masked_softmax: row " + std::to_string(r) + " is fully masked");
    }
    T total = 0;
    for (std::size_t c = 0; c < xr.size(); ++c) {
      const T e = mr[c] > blocked ? std::exp(xr[c] + mr[c] - mx) : T(0);
      orow[c] = e;
      total += e;
    }
    for (auto& v : orow) v /= total;
  }
  const NodeId il = logits.id();
  auto fn = [il](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(il);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    const Tensor<T>& y = g.value(self);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      auto gr = go.row(r);
      T dot = 0;
      for (std::size_t c = 0; c < yr.size(); ++c) dot += yr[c] * gr[c];
      auto dr = d->row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) dr[c] += yr[c] * (gr[c] - dot);
    }
  };
  return Var<T>(&logits.graph(),
                logits.graph().push(OpKind::kMaskedSoftmax, {il}, std::move(out), fn));
}

// Row-wise layer normalization with learned 1xC gain and bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
  detail::same_graph(x, gain);
  detail::same_graph(x, bias);
  const std::size_t rows = x.rows(), cols = x.cols();
  detail::check(gain.shape() == Shape{1, cols} && bias.shape() == Shape{1, cols},
                ErrorCategory::kShapeMismatch, "layer_norm: parameter width mismatch");
  Tensor<T> out(rows, cols);
  Tensor<T> xhat(rows, cols);
  std::vector<T> inv_std(rows);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gain.value();
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = xv.row(r);
    T mean = 0;
    for (T v : xr) mean += v;
    mean /= T(cols);
    T var = 0;
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= T(cols);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    auto hr = xhat.row(r);
    auto orow = out.row(r);
    for (std::size_t c = 0; c < cols; ++c) {
      hr[c] = (xr[c] - mean) * is;
      orow[c] = hr[c] * gv[c] + bv[c];
    }
  }
  const NodeId ix = x.id(), ig = gain.id(), ib = bias.id();
  auto fn = [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g,
                                                                              NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    const std::size_t rows = go.rows(), cols = go.cols();
    if (Tensor<T>* dg = g.grad_sink(ig)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*dg)[c] += go(r, c) * xhat(r, c);
    }
    if (Tensor<T>* db = g.grad_sink(ib)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) (*db)[c] += go(r, c);
    }
    if (Tensor<T>* dx = g.grad_sink(ix)) {
      const Tensor<T>& gv = g.value(ig);
      std::vector<T> dxhat(cols);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_d = 0, mean_dx = 0;
        for (std::size_t c = 0; c < cols; ++c) {
          dxhat[c] = go(r, c) * gv[c];
          mean_d += dxhat[c];
          mean_dx += dxhat[c] * xhat(r, c);
        }
        mean_d /= T(cols);
        mean_dx /= T(cols);
        for (std::size_t c = 0; c < cols; ++c) {
          (*dx)(r, c) += inv_std[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
        }
      }
    }
  };
  return Var<T>(&x.graph(), x.graph().push(OpKind::kLayerNorm, {ix, ig, ib}, std::move(out), fn));
}

namespace detail {

// Shared shape for pointwise nonlinearities: derivative computed from the
// input value and the output value.
template <typename T, typename Fwd, typename Deriv>
Var<T> pointwise(const Var<T>& a, OpKind kind, Fwd fwd, Deriv deriv) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = fwd(v);
  const NodeId ia = a.id();
  auto fn = [ia, deriv](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(ia);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    const Tensor<T>& x = g.value(ia);
    const Tensor<T>& y = g.value(self);
    for (std::size_t i = 0; i < go.size(); ++i) (*d)[i] += go[i] * deriv(x[i], y[i]);
  };
  return Var<T>(&a.graph(), a.graph().push(kind, {ia}, std::move(out), fn));
}

}  // namespace detail

// tanh-approximated GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T c = T(0.044715);
  return detail::pointwise(
      a, OpKind::kGelu,
      [](T x) { return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x))); },
      [](T x, T) {
        const T u = k * (x + c * x * x * x);
        const T t = std::tanh(u);
        const T du = k * (T(1) + T(3) * c * x * x);
        return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
      });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return detail::pointwise(
      a, OpKind::kRelu, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return detail::pointwise(
      a, OpKind::kTanh, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return detail::pointwise(
      a, OpKind::kSigmoid, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

// Gathers rows of `table` (V x C) by id.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const int> ids) {
  const std::size_t cols = table.cols();
  Tensor<T> out(ids.size(), cols);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int id = ids[i];
    detail::check(id >= 0 && static_cast<std::size_t>(id) < table.rows(),
                  ErrorCategory::kInvalidArgument,
                  "embedding: id " + std::to_string(id) + " out of range");
    auto src = table.value().row(static_cast<std::size_t>(id));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  const NodeId it = table.id();
  auto fn = [it, idv = std::vector<int>(ids.begin(), ids.end())](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(it);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      auto dr = d->row(static_cast<std::size_t>(idv[i]));
      auto gr = go.row(i);
      for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c];
    }
  };
  return Var<T>(&table.graph(), table.graph().push(OpKind::kEmbedding, {it}, std::move(out), fn));
}

// Vertical concatenation. Parts may have zero rows but must share widths.
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  detail::check(!parts.empty(), ErrorCategory::kInvalidArgument, "concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    detail::same_graph(parts[0], p);
    detail::check(p.cols() == cols, ErrorCategory::kShapeMismatch,
                  "concat_rows: width " + std::to_string(p.cols()) + " vs " +
                      std::to_string(cols));
    rows += p.rows();
    ids.push_back(p.id());
  }
  Tensor<T> out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += p.value().size();
  }
  auto fn = [ids](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    std::size_t offset = 0;
    for (NodeId in : ids) {
      const std::size_t n = g.value(in).size();
      if (Tensor<T>* d = g.grad_sink(in)) {
        for (std::size_t i = 0; i < n; ++i) (*d)[i] += go[offset + i];
      }
      offset += n;
    }
  };
  Graph<T>& graph = parts[0].graph();
  return Var<T>(&graph, graph.push(OpKind::kConcatRows, ids, std::move(out), fn));
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

// Horizontal concatenation.
template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  detail::check(!parts.empty(), ErrorCategory::kInvalidArgument, "concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  std::vector<NodeId> ids;
  for (const auto& p : parts) {
    detail::same_graph(parts[0], p);
    detail::check(p.rows() == rows, ErrorCategory::kShapeMismatch,
                  "concat_cols: height " + std::to_string(p.rows()) + " vs " +
                      std::to_string(rows));
    cols += p.cols();
    ids.push_back(p.id());
  }
  Tensor<T> out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r) {
      auto src = p.value().row(r);
      std::copy(src.begin(), src.end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += p.cols();
  }
  auto fn = [ids](Graph<T>& g, NodeId self) {
    const Tensor<T>& go = g.grad_out(self);
    std::size_t offset = 0;
    for (NodeId in : ids) {
      const std::size_t w = g.value(in).cols();
      if (Tensor<T>* d = g.grad_sink(in)) {
        for (std::size_t r = 0; r < go.rows(); ++r)
          for (std::size_t c = 0; c < w; ++c) (*d)(r, c) += go(r, offset + c);
      }
      offset += w;
    }
  };
  Graph<T>& graph = parts[0].graph();
  return Var<T>(&graph, graph.push(OpKind::kConcatCols, ids, std::move(out), fn));
}

template <typename T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols(std::span<const Var<T>>(parts.begin(), parts.size()));
}

template <typename T>
Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count) {
  detail::check(begin + count <= a.rows(), ErrorCategory::kShapeMismatch,
                "slice_rows out of range");
  const std::size_t cols = a.cols();
  Tensor<T> out(count, cols);
  std::copy(a.value().data() + begin * cols, a.value().data() + (begin + count) * cols,
            out.data());
  const NodeId ia = a.id();
  auto fn = [ia, begin, cols](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(ia);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    for (std::size_t i = 0; i < go.size(); ++i) (*d)[begin * cols + i] += go[i];
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kSliceRows, {ia}, std::move(out), fn));
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
  detail::check(begin + count <= a.cols(), ErrorCategory::kShapeMismatch,
                "slice_cols out of range");
  Tensor<T> out(a.rows(), count);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto src = a.value().row(r);
    std::copy(src.begin() + static_cast<std::ptrdiff_t>(begin),
              src.begin() + static_cast<std::ptrdiff_t>(begin + count), out.row(r).begin());
  }
  const NodeId ia = a.id();
  auto fn = [ia, begin](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(ia);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    for (std::size_t r = 0; r < go.rows(); ++r)
      for (std::size_t c = 0; c < go.cols(); ++c) (*d)(r, begin + c) += go(r, c);
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kSliceCols, {ia}, std::move(out), fn));
}

// Mean over rows: RxC -> 1xC.
template <typename T>
Var<T> mean_rows(const Var<T>& a) {
  detail::check(a.rows() > 0, ErrorCategory::kInvalidArgument, "mean_rows of empty tensor");
  const std::size_t rows = a.rows(), cols = a.cols();
  Tensor<T> out(1, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto src = a.value().row(r);
    for (std::size_t c = 0; c < cols; ++c) out[c] += src[c];
  }
  for (auto& v : out.values()) v /= T(rows);
  const NodeId ia = a.id();
  auto fn = [ia, rows](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(ia);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < go.cols(); ++c) (*d)(r, c) += go[c] / T(rows);
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kMeanRows, {ia}, std::move(out), fn));
}

// Sum of all entries -> 1x1.
template <typename T>
Var<T> sum(const Var<T>& a) {
  T total = 0;
  for (T v : a.value().values()) total += v;
  const NodeId ia = a.id();
  auto fn = [ia](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(ia);
    if (!d) return;
    const T go = g.grad_out(self)[0];
    for (auto& v : d->values()) v += go;
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kSum, {ia}, Tensor<T>::scalar(total), fn));
}

// Mean over rows whose target != ignore_id of -log softmax(logits[row])[target].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const int> targets, int ignore_id) {
  const Tensor<T>& x = logits.value();
  detail::check(targets.size() == x.rows(), ErrorCategory::kShapeMismatch,
                "cross_entropy: " + std::to_string(x.rows()) + " steps vs " +
                    std::to_string(targets.size()) + " targets");
  Tensor<T> probs(x.rows(), x.cols());
  T total = 0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    T mx = *std::max_element(xr.begin(), xr.end());
    T z = 0;
    for (T v : xr) z += std::exp(v - mx);
    const T log_z = mx + std::log(z);
    auto pr = probs.row(r);
    for (std::size_t c = 0; c < xr.size(); ++c) pr[c] = std::exp(xr[c] - log_z);
    if (targets[r] == ignore_id) continue;
    detail::check(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < x.cols(),
                  ErrorCategory::kInvalidArgument, "cross_entropy: target out of range");
    total += log_z - xr[static_cast<std::size_t>(targets[r])];
    ++counted;
  }
  detail::check(counted > 0, ErrorCategory::kInvalidArgument,
                "cross_entropy: every target position is padding");
  const NodeId il = logits.id();
  auto fn = [il, probs = std::move(probs), tv = std::vector<int>(targets.begin(), targets.end()),
             ignore_id, counted](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(il);
    if (!d) return;
    const T go = g.grad_out(self)[0] / T(counted);
    for (std::size_t r = 0; r < probs.rows(); ++r) {
      if (tv[r] == ignore_id) continue;
      auto dr = d->row(r);
      auto pr = probs.row(r);
      for (std::size_t c = 0; c < pr.size(); ++c) dr[c] += go * pr[c];
      dr[static_cast<std::size_t>(tv[r])] -= go;
    }
  };
  return Var<T>(&logits.graph(),
                logits.graph().push(OpKind::kCrossEntropy, {il},
                                    Tensor<T>::scalar(total / T(counted)), fn));
}

// log softmax(logits[row])[col] as a scalar.
template <typename T>
Var<T> log_softmax_at(const Var<T>& logits, std::size_t row, std::size_t col) {
  const Tensor<T>& x = logits.value();
  detail::check(row < x.rows() && col < x.cols(), ErrorCategory::kInvalidArgument,
                "log_softmax_at: index out of range");
  auto xr = x.row(row);
  T mx = *std::max_element(xr.begin(), xr.end());
  T z = 0;
  for (T v : xr) z += std::exp(v - mx);
  const T log_z = mx + std::log(z);
  std::vector<T> p(xr.size());
  for (std::size_t c = 0; c < xr.size(); ++c) p[c] = std::exp(xr[c] - log_z);
  const NodeId il = logits.id();
  auto fn = [il, row, col, p = std::move(p)](Graph<T>& g, NodeId self) {
    Tensor<T>* d = g.grad_sink(il);
    if (!d) return;
    const T go = g.grad_out(self)[0];
    auto dr = d->row(row);
    for (std::size_t c = 0; c < p.size(); ++c) dr[c] -= go * p[c];
    dr[col] += go;
  };
  return Var<T>(&logits.graph(),
                logits.graph().push(OpKind::kLogSoftmaxAt, {il},
                                    Tensor<T>::scalar(xr[col] - log_z), fn));
}

// out.flat[i] = a.flat[index[i]], reshaped to rows x cols. Used for patch
// extraction and framing, where the index map is a fixed permutation or
// selection of the raw input.
template <typename T>
Var<T> gather(const Var<T>& a, std::span<const std::size_t> index, std::size_t rows,
              std::size_t cols) {
  detail::check(index.size() == rows * cols, ErrorCategory::kShapeMismatch,
                "gather: index length does not match output shape");
  Tensor<T> out(rows, cols);
  const Tensor<T>& av = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check(index[i] < av.size(), ErrorCategory::kInvalidArgument,
                  "gather: index out of range");
    out[i] = av[index[i]];
  }
  const NodeId ia = a.id();
  auto fn = [ia, idx = std::vector<std::size_t>(index.begin(), index.end())](Graph<T>& g,
                                                                             NodeId self) {
    Tensor<T>* d = g.grad_sink(ia);
    if (!d) return;
    const Tensor<T>& go = g.grad_out(self);
    for (std::size_t i = 0; i < idx.size(); ++i) (*d)[idx[i]] += go[i];
  };
  return Var<T>(&a.graph(), a.graph().push(OpKind::kGather, {ia}, std::move(out), fn));
}

}  // namespace promptfuse::ad
