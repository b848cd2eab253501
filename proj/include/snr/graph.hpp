#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "snr/tensor.hpp"

namespace snr {

template <typename S>
class Graph;

// Learnable (or persistent) state outside any graph. Graphs bind leaves to
// parameters and flush leaf gradients back here after backward().
template <typename S>
struct Parameter {
  std::string name;
  Shape shape;
  ArrayX<S> value;
  ArrayX<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string name_, Shape shape_, bool trainable_ = true)
      : name(std::move(name_)),
        shape(shape_),
        value(ArrayX<S>::Zero(shape_.count())),
        grad(ArrayX<S>::Zero(shape_.count())),
        trainable(trainable_) {}

  Index count() const { return shape.count(); }
  void zero_grad() { grad.setZero(); }
};

// Handle to one node of a Graph. Cheap to copy; ops are free functions that
// take and return Vars so forward passes read as plain expressions.
template <typename S>
class Var {
 public:
  Var() = default;
  Var(Graph<S>* g, Index id) : g_(g), id_(id) {}

  bool valid() const { return g_ != nullptr; }
  Graph<S>* graph() const { return g_; }
  Index id() const { return id_; }

  const Shape& shape() const;
  const ArrayX<S>& value() const;
  S scalar() const;

 private:
  Graph<S>* g_ = nullptr;
  Index id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// tape backwards from the loss is a valid topological order. One graph is
// single-threaded; independent graphs can run concurrently.
template <typename S>
class Graph {
 public:
  struct Node {
    Shape shape;
    ArrayX<S> value;
    ArrayX<S> grad;
    Parameter<S>* param = nullptr;
    std::function<void(Graph&)> backward;  // empty for leaves/constants
  };

  Var<S> leaf(Parameter<S>& p) {
    Node n;
    n.shape = p.shape;
    n.value = p.value;
    n.param = &p;
    return push(std::move(n));
  }

  Var<S> input(const Shape& shape, ArrayX<S> data) {
    if (shape.count() != data.size()) throw std::invalid_argument("graph input: shape/data size mismatch");
    Node n;
    n.shape = shape;
    n.value = std::move(data);
    return push(std::move(n));
  }

  Var<S> input(const Tensor4<S>& t) { return input(t.shape(), t.data); }

  // Creates an op result node; the op attaches its backward closure afterwards
  // (the closure usually needs the node's own id to read its gradient).
  Var<S> make(const Shape& shape, ArrayX<S> value) {
    if (shape.count() != value.size()) throw std::invalid_argument("graph make: shape/value size mismatch");
    Node n;
    n.shape = shape;
    n.value = std::move(value);
    return push(std::move(n));
  }

  void set_backward(const Var<S>& v, std::function<void(Graph&)> fn) {
    node(v.id()).backward = std::move(fn);
  }

  Node& node(Index id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(Index id) const { return nodes_[static_cast<std::size_t>(id)]; }
  ArrayX<S>& grad(Index id) { return nodes_[static_cast<std::size_t>(id)].grad; }
  const ArrayX<S>& value(Index id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  // Seeds d(loss)/d(loss) = 1, runs the tape in reverse and accumulates the
  // gradients of bound leaves into their Parameters.
  void backward(const Var<S>& loss) {
    if (!loss.valid() || loss.graph() != this) throw std::invalid_argument("backward: foreign var");
    if (node(loss.id()).shape.rank != 0) throw std::invalid_argument("backward: loss must be scalar");
    const Index last = loss.id();
    for (Index i = 0; i <= last; ++i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      n.grad = ArrayX<S>::Zero(n.shape.count());
    }
    node(last).grad[0] = S(1);
    for (Index i = last; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward) n.backward(*this);
    }
    for (Index i = 0; i <= last; ++i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.param != nullptr) n.param->grad += n.grad;
    }
  }

  void clear() { nodes_.clear(); }

 private:
  Var<S> push(Node&& n) {
    nodes_.push_back(std::move(n));
    return Var<S>(this, static_cast<Index>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
};

template <typename S>
const Shape& Var<S>::shape() const {
  return g_->node(id_).shape;
}

template <typename S>
const ArrayX<S>& Var<S>::value() const {
  return g_->node(id_).value;
}

template <typename S>
S Var<S>::scalar() const {
  if (shape().rank != 0) throw std::invalid_argument("Var::scalar on non-scalar");
  return value()[0];
}

}  // namespace snr
