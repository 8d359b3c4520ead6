#include "twinseg/autograd.hpp"

#include <unordered_set>

#include "twinseg/errors.hpp"

namespace twinseg {
namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor& Node::grad_buffer() {
  if (grad.empty() && value.numel() > 0) grad = Tensor::zeros_like(value);
  if (grad.shape() != value.shape()) grad = Tensor::zeros_like(value);
  return grad;
}

void Node::accumulate(const Tensor& g) {
  if (!requires_grad) return;
  if (g.shape() != value.shape()) {
    throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match value " +
                         shape_str(value.shape()));
  }
  Tensor& buf = grad_buffer();
  double* dst = buf.data();
  const double* src = g.data();
  for (int64_t i = 0; i < g.numel(); ++i) dst[i] += src[i];
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Tensor Var::grad() const {
  if (!node_->grad.empty()) return node_->grad;
  return Tensor::zeros_like(node_->value);
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(parents.size());
      for (auto& p : parents) n->parents.push_back(p.node());
      n->backward = std::move(backward);
    }
  }
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root.defined()) throw ContractError("backward on undefined variable");
  if (root.value().numel() != 1) {
    throw DimensionError("backward root must be a scalar, got " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

}  // namespace twinseg
