#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <vector>

#include "deepmts/param_store.hpp"
#include "deepmts/tensor.hpp"

namespace deepmts::nn {

/// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const noexcept { return id != npos; }
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
/// node list backwards is a valid topological order for the adjoint sweep.
template <class T>
class Tape {
 public:
  /// Receives the tape and the node being differentiated; reads grad(self)
  /// and accumulates into accumulate_grad(parent) for each parent.
  using BackwardFn = std::function<void(Tape&, Var self)>;

  Var input(Tensor<T> value, bool requires_grad = false) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  /// Leaf bound to a stored parameter; no copy of the value is made.
  Var parameter(Param<T>& param) {
    Node n;
    n.ref = &param.value;
    n.param = &param;
    n.requires_grad = param.trainable;
    return push(std::move(n));
  }

  Var record(Tensor<T> value, std::vector<Var> parents, BackwardFn fn) {
    if (!value.all_finite()) throw RuntimeFailure("non-finite value produced on tape (node " + std::to_string(nodes_.size()) + ")");
    Node n;
    n.value = std::move(value);
    for (Var p : parents) n.requires_grad = n.requires_grad || requires_grad(p);
    n.parents = std::move(parents);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.ref != nullptr ? *n.ref : n.value;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const std::vector<Var>& parents(Var v) const { return node(v).parents; }

  /// Gradient of the last backward() target w.r.t. v; empty if v never
  /// received one.
  const Tensor<T>& grad(Var v) const { return node(v).grad; }

  /// Zero-initialised on first touch.
  Tensor<T>& accumulate_grad(Var v) {
    Node& n = node(v);
    if (n.grad.empty() && !value(v).empty()) n.grad = Tensor<T>(value(v).shape());
    if (n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  void backward(Var out, const Tensor<T>& seed) {
    if (nodes_.empty() || !out.valid() || out.id >= nodes_.size()) {
      throw ValidationError("backward called without a recorded forward pass");
    }
    if (seed.shape() != value(out).shape()) {
      throw ValidationError("backward seed shape " + to_string(seed.shape()) + " != output shape " +
                            to_string(value(out).shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor<T>();
    Tensor<T>& g = accumulate_grad(out);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = seed[i];
    for (std::size_t id = out.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, Var{id});
      if (n.param != nullptr && n.param->trainable) {
        T* dst = n.param->grad.data();
        const T* src = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
      }
    }
  }

  /// Backward from a scalar (single-element) output with seed 1.
  void backward(Var out) {
    if (nodes_.empty() || !out.valid() || out.id >= nodes_.size()) {
      throw ValidationError("backward called without a recorded forward pass");
    }
    backward(out, Tensor<T>(value(out).shape(), T{1}));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Param<T>* param = nullptr;
    Tensor<T> grad;
    std::vector<Var> parents;
    BackwardFn backward;
    bool requires_grad = false;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }
  Node& node(Var v) {
    if (!v.valid() || v.id >= nodes_.size()) throw ValidationError("invalid tape variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (!v.valid() || v.id >= nodes_.size()) throw ValidationError("invalid tape variable");
    return nodes_[v.id];
  }

  std::vector<Node> nodes_;
};

}  // namespace deepmts::nn
