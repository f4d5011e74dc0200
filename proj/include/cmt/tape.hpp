#pragma once

#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "cmt/tensor.hpp"

namespace cmt {

// Accumulates gradients keyed by tape node id during a backward pass.
template <typename T>
class GradSink {
 public:
  explicit GradSink(size_t n) : grads_(n) {}

  void add(int node, Tensor<T> g) {
    Tensor<T>& slot = grads_[static_cast<size_t>(node)];
    if (!slot.defined()) {
      slot = std::move(g);
      return;
    }
    if (!slot.same_shape(g))
      throw ShapeError("gradient shape mismatch while accumulating: " + shape_str(slot.shape()) +
                       " vs " + shape_str(g.shape()));
    // first accumulation clones so shared upstream storage is never mutated
    if (!owned_[static_cast<size_t>(node)]) {
      slot = slot.clone();
      owned_[static_cast<size_t>(node)] = true;
    }
    T* a = slot.data();
    const T* b = g.data();
    const int64_t n = slot.size();
    for (int64_t i = 0; i < n; ++i) a[i] += b[i];
  }

  Tensor<T>& slot(int node) { return grads_[static_cast<size_t>(node)]; }
  std::vector<Tensor<T>> take() { return std::move(grads_); }
  void reserve_owned() { owned_.assign(grads_.size(), false); }

 private:
  std::vector<Tensor<T>> grads_;
  std::vector<bool> owned_;
};

// Result of Tape::backward. Unreached parameters report zeros.
template <typename T>
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor<T>> by_node) : by_node_(std::move(by_node)) {}

  bool reached(const Tensor<T>& t) const {
    return t.node >= 0 && static_cast<size_t>(t.node) < by_node_.size() &&
           by_node_[static_cast<size_t>(t.node)].defined();
  }

  Tensor<T> of(const Tensor<T>& t) const {
    if (t.node < 0) throw ShapeError("tensor is not on the tape; cannot look up its gradient");
    if (reached(t)) return by_node_[static_cast<size_t>(t.node)];
    return Tensor<T>::zeros(t.shape());
  }

 private:
  std::vector<Tensor<T>> by_node_;
};

// Dynamically recorded operation graph. Nodes are appended in execution order,
// which is a topological order by construction; backward walks it in reverse
// and fires each node's pullback exactly once. A tape is confined to one
// logical thread; distinct tapes may run concurrently.
template <typename T>
class Tape {
 public:
  using BackFn = std::function<void(const Tensor<T>& upstream, GradSink<T>& sink)>;

  // Registers a leaf (parameter or input). Idempotent per tensor object.
  int watch(Tensor<T>& t) {
    if (t.tape == this && t.node >= 0) return t.node;
    if (t.tape != nullptr && t.tape != this)
      throw ShapeError("tensor already belongs to a different tape");
    t.tape = this;
    t.node = record({}, BackFn{});
    return t.node;
  }

  int record(std::vector<int> inputs, BackFn back) {
    nodes_.push_back(Node{std::move(inputs), std::move(back)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  size_t num_nodes() const { return nodes_.size(); }

  Gradients<T> backward(const Tensor<T>& loss) const {
    if (loss.tape != this || loss.node < 0)
      throw ShapeError("backward: loss tensor is not recorded on this tape");
    if (loss.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    GradSink<T> sink(nodes_.size());
    sink.reserve_owned();
    sink.add(loss.node, Tensor<T>::scalar(T(1)));
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      const Node& node = nodes_[static_cast<size_t>(i)];
      if (!node.back) continue;  // leaf
      const Tensor<T>& upstream = sink.slot(i);
      if (!upstream.defined()) continue;  // not reached from the loss
      node.back(upstream, sink);
    }
    return Gradients<T>(sink.take());
  }

 private:
  struct Node {
    std::vector<int> inputs;
    BackFn back;
  };
  std::vector<Node> nodes_;
};

namespace detail {

// Resolve the common tape of an op's inputs; null when all are constants.
template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> ts) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ts) {
    if (!t->tape) continue;
    if (tape && t->tape != tape) throw ShapeError("op inputs belong to different tapes");
    tape = t->tape;
  }
  return tape;
}

template <typename T>
int node_or_none(const Tensor<T>& t) {
  return t.tape ? t.node : -1;
}

}  // namespace detail

}  // namespace cmt
