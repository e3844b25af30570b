#pragma once

#include "elgan/tensor.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace elgan {

/// A trainable tensor with its accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool decay = true;  // receives L2 regularization (weights yes, biases no)
};

/// Ordered, index-addressed parameter storage of one network.
template <typename Scalar>
class ParameterSet {
 public:
  std::size_t add(std::string name, const Shape& shape, bool decay) {
    params_.push_back({std::move(name), Tensor<Scalar>(shape), Tensor<Scalar>(shape), decay});
    return params_.size() - 1;
  }

  Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }

  std::size_t size() const { return params_.size(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.grad.set_zero();
  }

  friend bool operator==(const ParameterSet& a, const ParameterSet& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (std::size_t i = 0; i < a.params_.size(); ++i)
      if (!(a.params_[i].value == b.params_[i].value)) return false;
    return true;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
};

/// Handle to a node in a Graph.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Nodes are appended in topological order by construction,
/// so backward is a single reverse sweep.
template <typename Scalar>
class Graph {
 public:
  /// Called with the graph and the node's own handle during the reverse sweep.
  using Backward = std::function<void(Graph&, Var)>;

  Var input(Tensor<Scalar> value, bool requires_grad = false) {
    return emit(std::move(value), requires_grad, nullptr);
  }

  Var emit(Tensor<Scalar> value, bool requires_grad, Backward backward) {
    nodes_.push_back({std::move(value), Tensor<Scalar>(), requires_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  const Tensor<Scalar>& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of `v`, allocated as zeros on first use.
  Tensor<Scalar>& grad(Var v) {
    auto& node = nodes_[v.id];
    if (node.grad.shape() != node.value.shape()) node.grad = Tensor<Scalar>(node.value.shape());
    return node.grad;
  }

  bool has_grad(Var v) const { return nodes_[v.id].grad.shape() == nodes_[v.id].value.shape(); }

  Scalar scalar(Var v) const { return value(v).data()[0]; }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward closure.
  void backward(Var loss) {
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!requires_grad(loss)) return;
    grad(loss).data()[0] = Scalar(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (!node.requires_grad || !node.backward || !has_grad(Var{i})) continue;
      node.backward(*this, Var{i});
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

}  // namespace elgan
