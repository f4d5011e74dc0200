#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt {

// Flattens a module's parameter tree (via its visit method) into stable-order
// (name, tensor*) pairs. The order is the traversal order and is relied on by
// the optimizer state and checkpoint layout.
template <typename T, typename Module>
std::vector<std::pair<std::string, Tensor<T>*>> named_params(Module& m,
                                                             const std::string& prefix = "p") {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  m.visit(prefix, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, &t); });
  return out;
}

template <typename T, typename Module>
int64_t param_count(Module& m) {
  int64_t n = 0;
  m.visit(std::string(), [&](const std::string&, Tensor<T>& t) { n += t.size(); });
  return n;
}

// One training step watches every parameter on a fresh tape; the links must
// be cleared before the next step since the tape dies with the iteration.
template <typename T>
void detach_params(std::vector<std::pair<std::string, Tensor<T>*>>& params) {
  for (auto& [name, t] : params) {
    t->tape = nullptr;
    t->node = -1;
  }
}

}  // namespace cmt
