#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "npss/errors.hpp"
#include "npss/tensor.hpp"

namespace npss {

/// Trainable tensor with a gradient buffer of the same shape.
template <class T>
struct BasicParameter {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  BasicParameter() = default;
  BasicParameter(std::string n, BasicTensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(BasicTensor<T>::zeros_like(value)) {}

  void zero_grad() { grad.fill(T(0)); }
};

using Parameter = BasicParameter<float>;

/// Handle to a node on a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Append-only computation record for reverse-mode differentiation.
///
/// Every op pushes its output value together with a closure that, given the output
/// gradient, accumulates input gradients. A tape built with record=false keeps values
/// only and never requires gradients (inference mode).
template <class T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  using Backward = std::function<void(Tape&, const TensorT& out_grad)>;

  explicit Tape(bool record = true) : record_(record) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(TensorT value) { return emplace(std::move(value), false, nullptr, {}); }

  Var parameter(BasicParameter<T>& p) { return emplace(p.value, record_, &p, {}); }

  /// Records an op result. needs_grad is inherited from the inputs.
  Var push(TensorT value, std::initializer_list<Var> inputs, Backward backward) {
    return push(std::move(value), std::vector<Var>(inputs), std::move(backward));
  }

  Var push(TensorT value, const std::vector<Var>& inputs, Backward backward) {
    if (!value.all_finite()) throw NumericError("non-finite value produced on tape (node " +
                                                std::to_string(nodes_.size()) + ")");
    bool needs = false;
    if (record_)
      for (Var v : inputs) needs = needs || nodes_.at(static_cast<std::size_t>(v.id)).needs_grad;
    return emplace(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{});
  }

  const TensorT& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }

  /// Gradient of the last backward() root with respect to v; empty when v was not reached.
  const TensorT& grad(Var v) const { return node(v).grad; }

  /// Adds g into v's gradient buffer. No-op for nodes that do not need gradients.
  void accumulate(Var v, std::span<const T> g) {
    auto& n = node(v);
    if (!n.needs_grad) return;
    if (n.grad.empty()) n.grad = TensorT::zeros_like(n.value);
    if (g.size() != n.grad.size()) throw ShapeError("gradient size mismatch during backward");
    auto dst = n.grad.data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }

  /// Direct access to v's gradient buffer, allocated on first use. Only for nodes needing grads.
  TensorT& grad_buffer(Var v) {
    auto& n = node(v);
    if (n.grad.empty()) n.grad = TensorT::zeros_like(n.value);
    return n.grad;
  }

  /// Back-propagates from a scalar root and adds the results into every reached parameter's grad.
  void backward(Var root) {
    auto& r = node(root);
    if (r.value.size() != 1) throw ShapeError("backward root must be a scalar, got " + shape_str(r.value.shape()));
    if (!r.needs_grad) return;
    r.grad = TensorT(r.value.shape(), T(1));
    for (int i = root.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, n.grad);
      if (n.param) {
        auto dst = n.param->grad.data();
        auto src = n.grad.data();
        for (std::size_t k = 0; k < src.size(); ++k) dst[k] += src[k];
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    TensorT value;
    TensorT grad;
    Backward backward;
    BasicParameter<T>* param = nullptr;
    bool needs_grad = false;
  };

  Var emplace(TensorT value, bool needs, BasicParameter<T>* p, Backward fn) {
    nodes_.push_back(Node{std::move(value), {}, std::move(fn), p, needs});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }
  const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }

  bool record_;
  // deque: references to stored values stay valid while later ops are pushed
  std::deque<Node> nodes_;
};

}  // namespace npss
