#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pifield/core/log.hpp"
#include "pifield/core/tape.hpp"
#include "pifield/core/tensor.hpp"

namespace pifield {

/// Ordered, named parameter tensors. Order is the serialization order.
template <class T>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    for (const auto& n : names_)
      if (n == name) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& operator[](std::size_t i) { return values_[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return values_[i]; }
  std::vector<Tensor<T>>& values() { return values_; }
  const std::vector<Tensor<T>>& values() const { return values_; }

  std::size_t index(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    throw std::out_of_range("ParamSet: no parameter " + name);
  }

  bool contains(const std::string& name) const {
    return std::find(names_.begin(), names_.end(), name) != names_.end();
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  /// Puts every parameter on `tape` as a leaf.
  std::vector<Var<T>> bind(Tape<T>& tape, bool requires_grad) const {
    std::vector<Var<T>> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.push_back(tape.leaf(v, requires_grad));
    return out;
  }

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> r;
    for (std::size_t i = 0; i < size(); ++i) r.add(names_[i], Tensor<U>::cast(values_[i]));
    return r;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.names_ == b.names_ && a.values_ == b.values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
};

template <class T>
std::vector<Tensor<T>> zeros_like(const std::vector<Tensor<T>>& v) {
  std::vector<Tensor<T>> z;
  z.reserve(v.size());
  for (const auto& t : v) z.emplace_back(t.shape());
  return z;
}

template <class T>
void add_into(std::vector<Tensor<T>>& acc, const std::vector<Tensor<T>>& g) {
  if (acc.size() != g.size()) throw ShapeError("gradient list length mismatch");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

template <class T>
bool all_finite(const std::vector<Tensor<T>>& v) {
  for (const auto& t : v)
    if (!t.all_finite()) return false;
  return true;
}

template <class T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m, v;
  double beta1 = 0.0, beta2 = 0.9, eps = 1e-8, lr = 1e-3;
  std::uint64_t skipped = 0;

  AdamState() = default;
  AdamState(const ParamSet<T>& params, double lr_, double b1 = 0.0, double b2 = 0.9, double e = 1e-8)
      : m(zeros_like(params.values())), v(zeros_like(params.values())), beta1(b1), beta2(b2), eps(e), lr(lr_) {}
};

/// Bias-corrected Adam. Returns false (and leaves everything untouched apart
/// from the skip counter) when any gradient is non-finite.
template <class T>
bool adam_step(ParamSet<T>& params, const std::vector<Tensor<T>>& grads, AdamState<T>& st, const std::string& tag = "adam") {
  if (grads.size() != params.size() || st.m.size() != params.size())
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " + std::to_string(params.size()) +
                     " parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(grads[i].shape(), params[i].shape(), "adam_step");
    require_same_shape(st.m[i].shape(), params[i].shape(), "adam_step moments");
  }
  if (!all_finite(grads)) {
    ++st.skipped;
    log_event(tag + ": non-finite gradient, step " + std::to_string(st.step + 1) + " skipped");
    return false;
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.step));
  const T b1 = T(st.beta1), b2 = T(st.beta2);
  const T step_size = T(st.lr / c1);
  const T inv_c2 = T(1.0 / c2);
  const T eps = T(st.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i].ptr();
    T* m = st.m[i].ptr();
    T* v = st.v[i].ptr();
    const T* g = grads[i].ptr();
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      m[k] = b1 * m[k] + (T(1) - b1) * g[k];
      v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
      p[k] -= step_size * m[k] / (std::sqrt(v[k] * inv_c2) + eps);
    }
  }
  return true;
}

/// Exponential moving average of a parameter set.
template <class T>
struct EmaState {
  std::vector<Tensor<T>> shadow;
  double decay = 0.999;

  EmaState() = default;
  EmaState(const ParamSet<T>& live, double d) : shadow(live.values()), decay(d) {}
};

template <class T>
void ema_update(EmaState<T>& ema, const ParamSet<T>& live) {
  if (ema.shadow.size() != live.size())
    throw ShapeError("ema_update: " + std::to_string(ema.shadow.size()) + " shadows for " +
                     std::to_string(live.size()) + " parameters");
  const T d = T(ema.decay), w = T(1.0 - ema.decay);
  for (std::size_t i = 0; i < live.size(); ++i) {
    require_same_shape(ema.shadow[i].shape(), live[i].shape(), "ema_update");
    T* s = ema.shadow[i].ptr();
    const T* l = live[i].ptr();
    for (std::size_t k = 0; k < live[i].size(); ++k) s[k] = d * s[k] + w * l[k];
  }
}

/// Parameter set with the EMA values substituted.
template <class T>
ParamSet<T> with_values(const ParamSet<T>& like, const std::vector<Tensor<T>>& values) {
  if (values.size() != like.size()) throw ShapeError("with_values: length mismatch");
  ParamSet<T> r;
  for (std::size_t i = 0; i < like.size(); ++i) {
    require_same_shape(values[i].shape(), like[i].shape(), "with_values");
    r.add(like.name(i), values[i]);
  }
  return r;
}

}  // namespace pifield
