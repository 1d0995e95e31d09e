#pragma once

#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pifield/core/tensor.hpp"

namespace pifield {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so walking ids downwards is a
/// reverse topological order. A backward function maps dL/d(output) to
/// dL/d(input_k) using tape operations; when the reverse pass is itself
/// recorded (`gradients_graph`), those operations become differentiable.
/// Only ops flagged twice-differentiable may appear on such a path.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<std::vector<Var<T>>(Tape&, const Var<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> v, bool requires_grad = false) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }
  Var<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

  /// Appends an op output. The backward function is retained only while
  /// recording and when at least one input requires a gradient.
  Var<T> record(Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn fn, bool twice_differentiable) {
    Node n;
    n.value = std::move(value);
    bool any = false;
    for (const auto& in : inputs) {
      if (in.tape != this) throw std::logic_error("Tape::record: input belongs to another tape");
      any = any || nodes_[in.id].requires_grad;
    }
    if (recording_ && any) {
      n.requires_grad = true;
      n.twice_differentiable = twice_differentiable;
      n.inputs.reserve(inputs.size());
      for (const auto& in : inputs) n.inputs.push_back(in.id);
      n.backward = std::move(fn);
    }
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// True when an op should save context for its backward function.
  bool needs_grad(std::initializer_list<Var<T>> inputs) const {
    if (!recording_) return false;
    for (const auto& in : inputs)
      if (nodes_[in.id].requires_grad) return true;
    return false;
  }

  const Tensor<T>& value(const Var<T>& v) const { return nodes_[v.id].value; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id].requires_grad; }
  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  /// Suspends recording for the guard's lifetime (evaluation-only passes).
  class NoGrad {
   public:
    explicit NoGrad(Tape& t) : tape_(t), prev_(t.recording_) { t.recording_ = false; }
    ~NoGrad() { tape_.recording_ = prev_; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

  /// First-order reverse pass. Returns dOut/dWrt (or seed-weighted) as plain
  /// tensors; temporaries created during the pass are discarded afterwards.
  /// Inputs that do not influence `out` receive zero tensors.
  std::vector<Tensor<T>> gradients(const Var<T>& out, std::span<const Var<T>> wrt, const Tensor<T>* seed = nullptr) {
    const std::size_t n0 = nodes_.size();
    std::vector<Tensor<T>> result;
    {
      NoGrad guard(*this);
      auto grads = reverse(out, seed, /*create_graph=*/false, n0, wrt);
      result.reserve(wrt.size());
      for (const auto& w : wrt) {
        if (w.id < grads.size() && grads[w.id].valid())
          result.push_back(nodes_[grads[w.id].id].value);
        else
          result.push_back(Tensor<T>(nodes_[w.id].value.shape()));
      }
    }
    truncate(n0);
    return result;
  }

  std::vector<Tensor<T>> gradients(const Var<T>& out, std::initializer_list<Var<T>> wrt) {
    return gradients(out, std::span<const Var<T>>(wrt.begin(), wrt.size()));
  }

  /// Reverse pass recorded onto this tape, so the returned gradients can be
  /// differentiated again. Throws if the path crosses an op without
  /// second-order support. Inputs not reached get invalid Vars.
  std::vector<Var<T>> gradients_graph(const Var<T>& out, std::span<const Var<T>> wrt, const Tensor<T>* seed = nullptr) {
    auto grads = reverse(out, seed, /*create_graph=*/true, nodes_.size(), wrt);
    std::vector<Var<T>> result;
    for (const auto& w : wrt) result.push_back(w.id < grads.size() ? grads[w.id] : Var<T>{});
    return result;
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool twice_differentiable = false;
  };

  std::vector<Var<T>> reverse(const Var<T>& out, const Tensor<T>* seed, bool create_graph, std::size_t n0,
                              std::span<const Var<T>> wrt) {
    if (out.tape != this) throw std::logic_error("Tape: output belongs to another tape");
    std::vector<Var<T>> grads(out.id + 1);
    std::vector<bool> keep(out.id + 1, false);
    for (const auto& w : wrt)
      if (w.id <= out.id) keep[w.id] = true;
    // Reference counts of gradient temporaries so aliases returned by linear
    // ops (e.g. add) are not released while another slot still holds them.
    std::vector<int> refs;
    auto retain = [&](const Var<T>& g) {
      if (g.id >= n0) {
        if (refs.size() <= g.id - n0) refs.resize(g.id - n0 + 1, 0);
        ++refs[g.id - n0];
      }
    };
    auto release = [&](const Var<T>& g) {
      if (create_graph || g.id < n0) return;
      if (--refs[g.id - n0] == 0) nodes_[g.id].value = Tensor<T>();
    };

    Tensor<T> s = seed ? *seed : Tensor<T>::full(nodes_[out.id].value.shape(), T(1));
    require_same_shape(s.shape(), nodes_[out.id].value.shape(), "backward seed");
    grads[out.id] = constant(std::move(s));
    retain(grads[out.id]);

    for (std::size_t i = out.id + 1; i-- > 0;) {
      if (!grads[i].valid()) continue;
      if (!nodes_[i].backward) continue;
      if (create_graph && !nodes_[i].twice_differentiable)
        throw std::logic_error("Tape: second-order pass reached an op without double-backward support (node " +
                               std::to_string(i) + ")");
      // deque: references stay valid while the pass appends nodes
      const BackwardFn& fn = nodes_[i].backward;
      const std::vector<std::size_t> inputs = nodes_[i].inputs;
      std::vector<Var<T>> gin = fn(*this, grads[i]);
      for (std::size_t k = 0; k < inputs.size() && k < gin.size(); ++k) {
        const std::size_t in = inputs[k];
        if (!gin[k].valid() || !nodes_[in].requires_grad) continue;
        require_same_shape(nodes_[gin[k].id].value.shape(), nodes_[in].value.shape(), "backward gradient");
        if (!grads[in].valid()) {
          grads[in] = gin[k];
          retain(gin[k]);
        } else {
          Var<T> sum = accumulate(grads[in], gin[k], create_graph);
          release(grads[in]);
          grads[in] = sum;
          retain(sum);
        }
      }
      // Interior gradients are dead once propagated; leaves keep theirs.
      if (!nodes_[i].inputs.empty() && !keep[i]) {
        release(grads[i]);
        if (!create_graph) grads[i] = Var<T>{};
      }
    }
    return grads;
  }

  Var<T> accumulate(const Var<T>& a, const Var<T>& b, bool create_graph) {
    Tensor<T> v = nodes_[a.id].value;
    v += nodes_[b.id].value;
    if (!create_graph) return constant(std::move(v));
    return record(std::move(v), {a, b},
                  [](Tape&, const Var<T>& g) { return std::vector<Var<T>>{g, g}; }, true);
  }

  void truncate(std::size_t n) {
    while (nodes_.size() > n) nodes_.pop_back();
  }

  std::deque<Node> nodes_;
  bool recording_ = true;
};

}  // namespace pifield
