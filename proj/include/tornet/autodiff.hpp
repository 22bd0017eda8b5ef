#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tornet/errors.hpp"
#include "tornet/tensor.hpp"

namespace tornet {

/// Named learnable tensor. `grad` always has the shape of `value`.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;

  Parameter(std::string n, Tensor<Scalar> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.set_zero(); }
};

/// Handle to a node recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
  std::size_t id = npos;
  bool valid() const { return id != npos; }
};

/// Reverse-mode recording of one forward pass.
///
/// Each recorded node owns its output value plus a backward closure that maps
/// the node's output gradient onto its inputs through `accumulate`. Gradients
/// reaching a parameter leaf are added straight into `Parameter::grad`.
/// Nodes are processed in reverse recording order, which is a valid
/// topological order because inputs are always recorded before consumers.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using BackwardFn = std::function<void(Tape&, const TensorT& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Disables closure recording; values are still kept.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  /// Frees intermediate values and gradients once their backward has run.
  void set_release_after_backward(bool release) { release_ = release; }

  Var constant(TensorT value) { return push("constant", std::move(value), false, {}, nullptr); }

  /// Leaf whose gradient is kept on the tape and readable through grad().
  Var variable(TensorT value) { return push("variable", std::move(value), grad_enabled_, {}, nullptr); }

  Var parameter(Parameter<Scalar>& p) {
    Var v = push(p.name, p.value, grad_enabled_, {}, nullptr);
    nodes_[v.id].param = &p;
    return v;
  }

  /// Records an op output. The closure is dropped when no input needs a gradient.
  Var record(std::string op, TensorT out, std::initializer_list<Var> inputs, BackwardFn fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (Var in : inputs) needs = needs || requires_grad(in);
    }
    if (!out.all_finite()) throw NumericError(op + " produced non-finite values");
    return push(std::move(op), std::move(out), needs, inputs, needs ? std::move(fn) : nullptr);
  }

  const TensorT& value(Var v) const {
    const Node& n = node(v);
    if (n.released) throw std::logic_error("value of " + n.op + " was released after backward");
    return n.value;
  }

  const Shape& shape(Var v) const { return value(v).shape(); }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  const std::string& op_name(Var v) const { return node(v).op; }

  /// Gradient of a `variable` leaf after backward(); zeros if none flowed.
  TensorT grad(Var v) const {
    const Node& n = node(v);
    if (n.param) return n.param->grad;
    if (n.has_grad) return n.grad;
    return TensorT(n.value.shape());
  }

  void accumulate(Var v, const TensorT& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    check_grad_shape(n, g);
    if (n.param) {
      n.param->grad.array() += g.array();
    } else if (n.has_grad) {
      n.grad.array() += g.array();
    } else {
      n.grad = g;
      n.has_grad = true;
    }
  }

  void accumulate(Var v, TensorT&& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    check_grad_shape(n, g);
    if (n.param) {
      n.param->grad.array() += g.array();
    } else if (n.has_grad) {
      n.grad.array() += g.array();
    } else {
      n.grad = std::move(g);
      n.has_grad = true;
    }
  }

  /// Backpropagates from a single-element root (seed 1).
  void backward(Var root) {
    if (value(root).size() != 1) {
      throw ConfigError("backward() without a seed needs a scalar root, got " + to_string(shape(root)));
    }
    backward(root, TensorT(shape(root), Scalar(1)));
  }

  void backward(Var root, TensorT seed) {
    if (!grad_enabled_) throw std::logic_error("backward on a tape recorded without gradients");
    accumulate(root, std::move(seed));
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || !n.has_grad) continue;
      TensorT g = std::move(n.grad);
      n.has_grad = false;
      n.backward(*this, g);
      if (release_ && i != root.id) {
        n.backward = nullptr;
        n.value = TensorT();
        n.released = true;
      } else {
        n.grad = std::move(g);
        n.has_grad = true;
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    std::string op;
    TensorT value;
    TensorT grad;
    bool has_grad = false;
    bool requires_grad = false;
    bool released = false;
    Parameter<Scalar>* param = nullptr;
    BackwardFn backward;
  };

  Var push(std::string op, TensorT value, bool requires_grad, std::initializer_list<Var> inputs,
           BackwardFn fn) {
    for (Var in : inputs) node(in);  // validates handles
    Node n;
    n.op = std::move(op);
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::logic_error("invalid tape handle");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::logic_error("invalid tape handle");
    return nodes_[v.id];
  }

  static void check_grad_shape(const Node& n, const TensorT& g) {
    const Shape& expect = n.param ? n.param->value.shape() : n.value.shape();
    if (!n.released && g.shape() != expect) {
      throw std::logic_error("gradient shape " + to_string(g.shape()) + " does not match " + n.op + " output " +
                             to_string(expect));
    }
  }

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool release_ = true;
};

}  // namespace tornet
