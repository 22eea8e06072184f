#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "attfuse/tensor.hpp"

namespace attfuse {

/// A trainable tensor. `grad` is written by Graph::backward().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
};

class Graph;

/// Handle to a node recorded in a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;
};

/// Records executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so that order is also a valid
/// topological order. One Graph per forward pass; not safe for concurrent
/// recording.
class Graph {
 public:
  /// Receives the output gradient; adds contributions to input grads via
  /// grad_slot(). Input values stay readable through value().
  using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value) { return push("constant", std::move(value), false, {}, nullptr); }

  /// Leaf that receives a gradient but is not a registered parameter.
  Var variable(Tensor value) { return push("variable", std::move(value), true, {}, nullptr); }

  /// Leaf bound to a parameter; repeated calls return the same node so that
  /// shared weights accumulate gradient across all uses.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    // Parameter values are referenced, not copied; they must not change while
    // the graph is alive.
    Var v = push("parameter", Tensor(), true, {}, nullptr);
    nodes_[v.id].external = &p.value;
    param_nodes_.emplace(&p, v.id);
    param_order_.push_back(&p);
    return v;
  }

  /// Appends an operation node. The node requires grad iff any input does.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      check_owner(v);
      ids.push_back(v.id);
      needs = needs || nodes_[v.id].requires_grad;
    }
    return push(op, std::move(value), needs, std::move(ids), needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(Var v) const {
    check_owner(v);
    return nodes_[v.id].get();
  }

  bool requires_grad(Var v) const {
    check_owner(v);
    return nodes_[v.id].requires_grad;
  }

  /// Gradient accumulator for an input, or nullptr when the input does not
  /// need one. Allocated as zeros on first use.
  Tensor* grad_slot(Var v) {
    check_owner(v);
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor(n.get().shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  /// Gradient of the last backward() loss with respect to v (zeros if v was
  /// not reached).
  Tensor grad(Var v) const {
    check_owner(v);
    const Node& n = nodes_[v.id];
    return n.has_grad ? n.grad : Tensor(n.get().shape());
  }

  /// Reverse sweep from a scalar loss. Afterwards every registered parameter
  /// holds dLoss/dParam in Parameter::grad; unreached parameters get zeros.
  void backward(Var loss) {
    check_owner(loss);
    if (!nodes_[loss.id].get().is_scalar()) {
      throw UsageError("backward() needs a scalar loss, got " + shape_str(nodes_[loss.id].get().shape()));
    }
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
    if (nodes_[loss.id].requires_grad) {
      Tensor* seed = grad_slot(loss);
      seed->fill(1.0);
      for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.backward) continue;
        n.backward(*this, n.grad);
      }
    }
    for (Parameter* p : param_order_) {
      const Node& n = nodes_[param_nodes_.at(p)];
      p->grad = n.has_grad ? n.grad : Tensor(p->value.shape());
    }
  }

  /// Parameters registered in this graph, in first-use order.
  const std::vector<Parameter*>& parameters() const { return param_order_; }

  std::size_t size() const { return nodes_.size(); }
  const std::string& op_name(Var v) const { return nodes_[v.id].op; }

 private:
  struct Node {
    std::string op;
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;

    const Tensor& get() const { return external ? *external : value; }
  };

  Var push(std::string_view op, Tensor value, bool requires_grad, std::vector<std::size_t> inputs,
           BackwardFn fn) {
    Node n;
    n.op = std::string(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void check_owner(Var v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw UsageError("variable does not belong to this graph");
  }

  // deque keeps references to earlier node values stable while recording.
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
  std::vector<Parameter*> param_order_;
};

}  // namespace attfuse
