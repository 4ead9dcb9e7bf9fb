#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cspec/tensor.hpp"

namespace cspec {

// Eager reverse-mode autodiff over Tensor<T>. Each op builds a Node whose
// backward closure scatters this->grad into its parents' grads. Graphs are
// built only along paths where some ancestor requires gradients; evaluation
// on frozen inputs therefore carries no tape.
template <typename T>
class Node {
 public:
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  explicit Node(Tensor<T> v) : value(std::move(v)) {}

  void ensure_grad() {
    if (grad.shape != value.shape) {
      grad = Tensor<T>::zeros(value.shape);
    }
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_const(Tensor<T> v) {
  return std::make_shared<Node<T>>(std::move(v));
}

template <typename T>
Var<T> make_param(Tensor<T> v) {
  auto n = std::make_shared<Node<T>>(std::move(v));
  n->requires_grad = true;
  return n;
}

// New node; prunes the tape when no parent needs gradients.
template <typename T>
Var<T> make_node(Tensor<T> v, std::vector<Var<T>> parents,
                 std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>(std::move(v));
  bool need = false;
  for (const auto& p : parents) need = need || p->requires_grad;
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

template <typename T>
Var<T> detach(const Var<T>& v) {
  return make_const(v->value);
}

// Reverse-mode sweep from a scalar root (numel == 1).
template <typename T>
void backward(const Var<T>& root) {
  require(root->value.numel() == 1, "backward: root must be scalar");
  // iterative topological order
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.push_back({root.get(), 0});
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx == 0 && seen.count(n)) {
      stack.pop_back();
      continue;
    }
    if (idx < n->parents.size()) {
      Node<T>* p = n->parents[idx].get();
      ++idx;
      if (!seen.count(p) && p->requires_grad) stack.push_back({p, 0});
    } else {
      seen.insert(n);
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad.fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

// Accumulate g into parent's grad (allocating on first touch).
template <typename T>
void accum_grad(Node<T>& parent, const Tensor<T>& g) {
  parent.ensure_grad();
  for (size_t i = 0; i < g.numel(); ++i) parent.grad[i] += g[i];
}

}  // namespace cspec
