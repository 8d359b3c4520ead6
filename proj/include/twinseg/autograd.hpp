#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "twinseg/tensor.hpp"

namespace twinseg {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamic computation graph. `backward` reads this
/// node's `grad` and accumulates into the parents' grads.
struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
  void accumulate(const Tensor& g);
};

/// Handle to a graph node. Cheap to copy; copies alias the same node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Gradient after backward(); zeros when nothing flowed here.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }
  bool defined() const { return static_cast<bool>(node_); }

  /// Same value, cut from the graph.
  Var detach() const { return constant(node_->value); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds the output node of an op. The closure is dropped when no parent
/// needs a gradient or grad mode is off.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Reverse-mode sweep from a scalar root; seeds d(root)/d(root) = 1.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace twinseg
