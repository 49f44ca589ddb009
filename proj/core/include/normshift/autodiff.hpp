#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "normshift/tensor.hpp"

namespace normshift {

// Trainable tensor with a gradient accumulator of identical shape.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  Param(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad = Tensor<T>(value.shape()); }
};

template <typename T>
class Tape;

// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::uint32_t index = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

// Reverse-mode record. Nodes are appended in creation order, which is a valid
// topological order; backward replays them from the loss down.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When false, param() yields constants and Param::grad is never touched.
  void set_track_params(bool on) { track_params_ = on; }
  bool track_params() const { return track_params_; }

  Var<T> constant(Tensor<T> v) { return push(std::move(v), nullptr, false); }

  // Leaf whose gradient is kept on the tape and can be read with grad().
  Var<T> input(Tensor<T> v) { return push(std::move(v), nullptr, true); }

  // Leaf aliasing a parameter; backward adds into p.grad.
  Var<T> param(Param<T>& p) {
    Node n;
    n.external = &p.value;
    n.requires_grad = track_params_;
    if (track_params_) n.sink = &p;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  // Leaf aliasing a parameter as a constant, regardless of track_params.
  Var<T> frozen(const Param<T>& p) {
    Node n;
    n.external = &p.value;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  // Records an op output. The rule is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward rule) {
    bool needs = false;
    for (const auto& v : inputs) {
      check_owned(v);
      needs = needs || nodes_[v.index].requires_grad;
    }
    return push(std::move(value), needs ? std::move(rule) : nullptr, needs);
  }

  const Tensor<T>& value(Var<T> v) const {
    check_owned(v);
    const auto& n = nodes_[v.index];
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(Var<T> v) const {
    check_owned(v);
    return nodes_[v.index].requires_grad;
  }

  // Gradient of the last backward() target w.r.t. v; zeros if unreached.
  Tensor<T> grad(Var<T> v) const {
    check_owned(v);
    const auto& n = nodes_[v.index];
    if (n.has_grad) return n.grad;
    return Tensor<T>(value(v).shape());
  }

  // Accumulation buffer used by backward rules.
  Tensor<T>& grad_ref(Var<T> v) {
    auto& n = nodes_[v.index];
    if (!n.has_grad) {
      n.grad = Tensor<T>(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(Var<T> v, const Tensor<T>& g) {
    if (!nodes_[v.index].requires_grad) return;
    auto& dst = grad_ref(v);
    if (dst.shape() != g.shape()) throw ShapeError("gradient shape mismatch " + shape_str(g.shape()));
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  // Seeds d(loss)/d(loss) = 1 and propagates. Tape-local gradients are reset
  // first, so calling twice yields the same tape gradients; Param::grad is
  // additive across calls.
  void backward(Var<T> loss) {
    if (loss.tape != this || loss.index >= nodes_.size()) {
      throw ShapeError("backward: loss is not recorded on this tape");
    }
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be a scalar");
    for (auto& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_ref(loss)[0] = T(1);
    for (std::size_t i = loss.index + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.rule) {
        // Rules only touch the buffers of earlier nodes, so this one can be
        // lent out and restored.
        Tensor<T> g = std::move(n.grad);
        n.rule(*this, g);
        n.grad = std::move(g);
      }
      if (n.sink) {
        auto& pg = n.sink->grad;
        if (pg.shape() != n.grad.shape()) pg = Tensor<T>(n.grad.shape());
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Backward rule;
    Param<T>* sink = nullptr;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
  };

  Var<T> push(Tensor<T> v, Backward rule, bool requires_grad) {
    Node n;
    n.owned = std::move(v);
    n.rule = std::move(rule);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void check_owned(Var<T> v) const {
    if (v.tape != this || v.index >= nodes_.size()) throw ShapeError("variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
  bool track_params_ = true;
};

}  // namespace normshift
