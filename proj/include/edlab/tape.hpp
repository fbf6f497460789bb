#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "edlab/error.hpp"
#include "edlab/tensor.hpp"

namespace edlab {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode autodiff tape. Ops append nodes in execution order, so the
// node vector is already topologically sorted; backward() walks it once in
// reverse and the tape cannot be replayed afterwards.
template <class T>
class Tape {
 public:
  // Propagates the node's output gradient into the gradients of its inputs.
  using BackwardFn = std::function<void(Tape&, const std::vector<T>& out_grad)>;

  Var constant(BasicTensor<T> value) {
    value.requires_grad = false;
    return push(std::move(value), nullptr, false, {});
  }

  // Owned leaf; differentiable iff value.requires_grad. Read its gradient
  // with grad() after backward.
  Var input(BasicTensor<T> value) {
    const bool rg = value.requires_grad;
    return push(std::move(value), nullptr, rg, {});
  }

  // Leaf referencing caller-owned storage (model parameters). backward()
  // accumulates into tensor.grad when tensor.requires_grad is set. The
  // tensor must outlive the tape.
  Var param(BasicTensor<T>& tensor) {
    Var v = push({}, &tensor, tensor.requires_grad, {});
    nodes_[v.id].grad_target = &tensor;
    return v;
  }

  // Read-only leaf referencing caller-owned storage; never differentiated.
  Var reference(const BasicTensor<T>& tensor) { return push({}, &tensor, false, {}); }

  Var record(BasicTensor<T> value, bool needs_grad, BackwardFn fn) {
    return push(std::move(value), nullptr, needs_grad, needs_grad ? std::move(fn) : BackwardFn{});
  }

  const BasicTensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.owned;
  }

  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  // Gradient buffer of a node, zero-initialised on first access.
  std::vector<T>& grad_buffer(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty()) n.grad.assign(value(v).numel(), T(0));
    return n.grad;
  }

  // Gradient of a node after backward(); all zeros if it did not participate.
  std::vector<T> grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) return std::vector<T>(value(v).numel(), T(0));
    return n.grad;
  }

  void backward(Var loss) {
    if (consumed_) throw Error(ErrorKind::TapeReuse, "backward called twice on the same tape");
    consumed_ = true;
    if (value(loss).numel() != 1) {
      throw Error(ErrorKind::Dimension, "backward needs a scalar loss, got shape " + shape_string(value(loss).shape));
    }
    if (!needs_grad(loss)) return finish_params();
    grad_buffer(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && !n.grad.empty()) n.backward(*this, n.grad);
    }
    finish_params();
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> owned;
    const BasicTensor<T>* external = nullptr;
    BasicTensor<T>* grad_target = nullptr;
    bool needs_grad = false;
    std::vector<T> grad;
    BackwardFn backward;
  };

  Var push(BasicTensor<T> value, const BasicTensor<T>* external, bool needs_grad, BackwardFn fn) {
    if (consumed_) throw Error(ErrorKind::TapeReuse, "cannot record on a tape after backward");
    Node n;
    n.owned = std::move(value);
    n.owned.grad.reset();
    n.external = external;
    n.needs_grad = needs_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void finish_params() {
    for (Node& n : nodes_) {
      if (!n.grad_target || !n.grad_target->requires_grad) continue;
      BasicTensor<T>& t = *n.grad_target;
      if (!t.grad || t.grad->size() != t.numel()) t.zero_grad();
      if (n.grad.empty()) continue;
      std::vector<T>& g = *t.grad;
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace edlab
