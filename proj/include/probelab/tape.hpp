#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "probelab/errors.hpp"
#include "probelab/tensor.hpp"

namespace probelab {

/// A trainable tensor together with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  /// Frozen parameters enter a tape as constants; no gradient reaches them.
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor::zeros_like(value);
    else grad.fill(0.0);
  }
};

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Define-by-run computation record. Nodes are appended in execution order,
/// so every node's inputs precede it; backward() walks the list in reverse.
/// A Tape is built per minibatch and discarded afterwards.
class Tape {
 public:
  /// Receives the node's own output value and its accumulated gradient.
  using Backward = std::function<void(Tape&, const Tensor& out_value,
                                      const Tensor& out_grad)>;

  explicit Tape(bool record_gradients = true) : recording_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, {}, nullptr, false});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a parameter. The parameter is read in place, not copied;
  /// it must outlive the tape and must not be modified while the tape lives.
  Var param(Parameter& p) {
    const bool grad = recording_ && !p.frozen;
    nodes_.push_back(Node{Tensor{}, {}, {}, {}, &p, grad});
    return {this, nodes_.size() - 1};
  }

  Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Tensor value, const std::vector<Var>& inputs, Backward fn) {
    Node node;
    node.value = std::move(value);
    bool grad = false;
    for (const Var& v : inputs) {
      if (v.tape != this) throw PreconditionError("operand belongs to a different tape");
      if (v.id >= nodes_.size()) throw PreconditionError("operand recorded after its use");
      node.inputs.push_back(v.id);
      grad = grad || nodes_[v.id].needs_grad;
    }
    node.needs_grad = recording_ && grad;
    if (node.needs_grad) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param ? n.param->value : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  bool needs_grad(Var v) const { return needs_grad(v.id); }

  /// Gradient accumulator of a node, allocated as zeros on first use.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor::zeros_like(value(id));
    return n.grad;
  }
  Tensor& grad(Var v) { return grad(v.id); }

  /// Null when nothing flowed into the node.
  const Tensor* grad_or_null(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.grad.empty() ? nullptr : &n.grad;
  }

  std::span<const std::size_t> inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss; parameter gradients are added
  /// into Parameter::grad.
  void backward(Var loss) {
    if (loss.tape != this) throw PreconditionError("loss belongs to a different tape");
    if (value(loss.id).size() != 1) {
      throw PreconditionError("backward requires a scalar loss, got shape " +
                              shape_str(value(loss.id).shape()));
    }
    if (backward_done_) throw PreconditionError("backward already ran on this tape");
    backward_done_ = true;
    if (!nodes_[loss.id].needs_grad) return;
    grad(loss.id).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, n.value, n.grad);
    }
    for (Node& n : nodes_) {
      if (!n.param || !n.needs_grad || n.grad.empty()) continue;
      if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    Backward backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };

  std::deque<Node> nodes_;  // stable addresses: values stay valid while recording
  bool recording_;
  bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return tape->value(id); }

}  // namespace probelab
