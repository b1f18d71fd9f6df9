#pragma once

#include <utility>
#include <vector>

#include "aelab/tensor.hpp"

namespace aelab::detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const BasicTensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

/// Attaches `out` to the active tape when any input needs a gradient. The
/// rule captures raw node pointers; the tape entry owns the nodes.
template <typename T, typename Rule>
void record(BasicTensor<T>& out, std::initializer_list<const BasicTensor<T>*> inputs,
            Rule&& rule) {
  Tape<T>* tape = Tape<T>::active();
  if (tape == nullptr || !any_requires_grad<T>(inputs)) return;
  std::vector<typename Tape<T>::NodePtr> nodes;
  for (const auto* t : inputs) {
    if (t != nullptr && t->defined()) nodes.push_back(t->node());
  }
  out.set_requires_grad(true);
  tape->push(out.node(), std::move(nodes), std::function<void()>(std::forward<Rule>(rule)));
}

/// True when the node takes part in differentiation and so needs its
/// gradient buffer written.
template <typename T>
bool wants_grad(const Node<T>* node) {
  return node != nullptr && node->requires_grad;
}

}  // namespace aelab::detail
