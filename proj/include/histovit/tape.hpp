#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/tensor.hpp"

namespace histovit {

/// A named model tensor. Trainable parameters receive gradients and optimiser
/// updates; buffers (batch-norm running statistics) are persisted but never
/// optimised.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
  bool decay = true;  // eligible for weight decay
  bool buffer = false;

  void zero_grad() {
    if (grad.shape() != value.shape()) {
      grad = Tensor<T>(value.shape());
    } else {
      grad.fill(T{0});
    }
  }
};

template <typename T>
class GradTape;

/// Handle to a value recorded on a GradTape.
template <typename T>
struct Var {
  GradTape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode tape (Wengert list). Operations append entries in execution
/// order, so entry order is a topological order of the graph and backward is
/// one reverse sweep.
///
/// Parameter leaves reference the parameter's storage instead of copying it;
/// the parameter must outlive the tape. Gradients reaching a parameter leaf
/// are added to Parameter::grad when backward() finishes, so calling
/// backward() twice without zeroing accumulates.
template <typename T>
class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, const Tensor<T>& grad_out, const Tensor<T>& out)>;

  explicit GradTape(bool recording = true) : recording_(recording) {}

  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }

  /// Leaf that collects its own gradient, readable with grad().
  Var<T> leaf(Tensor<T> value, bool requires_grad = true) { return push(std::move(value), requires_grad && recording_); }

  Var<T> param(Parameter<T>& p) {
    if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var<T>{this, it->second};
    Node n;
    n.external = &p.value;
    n.needs_grad = recording_ && p.trainable && !p.buffer;
    n.param = &p;
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    param_ids_.emplace(&p, id);
    return Var<T>{this, id};
  }

  /// Appends the result of an operation. `backward` is kept only when some
  /// input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn backward) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].needs_grad;
    }
    Var<T> out = push(std::move(value), needs);
    if (needs) nodes_[out.id].backward = std::move(backward);
    return out;
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var<T> v) const { return nodes_.at(v.id).needs_grad; }

  /// Gradient of the last backward() target with respect to `v`; zeros when
  /// `v` is not on the loss path.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.shape() == value(v.id).shape()) return n.grad;
    return Tensor<T>(value(v.id).shape());
  }

  /// Adds `g` into the gradient slot of `v`. Used by backward functions.
  void accumulate(Var<T> v, const Tensor<T>& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    const Shape& s = value(v.id).shape();
    if (g.shape() != s) {
      throw DimensionError("gradient shape " + shape_str(g.shape()) + " does not match value shape " + shape_str(s));
    }
    if (n.grad.shape() != s) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  void backward(Var<T> loss) {
    check_owner(loss);
    if (value(loss.id).size() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(value(loss.id).shape()));
    }
    if (!recording_) throw ContractError("backward() on a tape created with recording disabled");
    for (auto& n : nodes_) n.grad = Tensor<T>();
    Node& root = nodes_[loss.id];
    if (!root.needs_grad) return;
    root.grad = Tensor<T>(value(loss.id).shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.shape() != value(i).shape()) continue;
      // Backward functions write only to their inputs, which precede node i.
      Tensor<T> g = std::move(n.grad);
      n.backward(*this, g, value(i));
      n.grad = std::move(g);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      Node& n = nodes_[i];
      if (!n.param || n.grad.shape() != value(i).shape()) continue;
      Parameter<T>& p = *n.param;
      if (p.grad.shape() != p.value.shape()) p.grad = Tensor<T>(p.value.shape());
      auto dst = p.grad.data();
      auto src = n.grad.data();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool needs_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) throw ContractError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_ids_;
  bool recording_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(id);
}

}  // namespace histovit
