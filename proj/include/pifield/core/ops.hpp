#pragma once

// Differentiable operations on a Tape.
//
// Ops marked "second order" express their backward pass with other
// second-order ops, so the reverse pass can be recorded and differentiated
// again. This covers the discriminator op set (affine, conv, leaky ReLU,
// average pooling, coordinate channels, residual adds). Smooth
// nonlinearities used by the generator and the losses are first order.

#include <cmath>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "pifield/core/kernels.hpp"
#include "pifield/core/tape.hpp"

namespace pifield::ops {

namespace detail {

template <class T>
T softplus(T x) {
  return x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// float sin/cos that vectorize: reduce to [-pi, pi] with a split 2*pi,
// fold into [-pi/2, pi/2], odd Taylor series through r^13 (error < 1 ulp-ish).
inline float sin_folded(float r) {
  const float r2 = r * r;
  return r * (1.0f + r2 * (-1.66666672e-1f + r2 * (8.33333377e-3f + r2 * (-1.98412701e-4f +
              r2 * (2.75573188e-6f + r2 * (-2.50521079e-8f + r2 * 1.60590444e-10f))))));
}

inline float reduce_two_pi(float x) {
  const float k = std::nearbyint(x * 0.159154943f);
  float r = std::fma(-k, 6.28318548f, x);
  return std::fma(-k, -1.74845553e-7f, r);
}

template <class T>
T fast_sin(T x) {
  return std::sin(x);
}
template <class T>
T fast_cos(T x) {
  return std::cos(x);
}

template <>
inline float fast_sin(float x) {
  float r = reduce_two_pi(x);
  r = r > 1.57079637f ? 3.14159274f - r : r;
  r = r < -1.57079637f ? -3.14159274f - r : r;
  return sin_folded(r);
}

template <>
inline float fast_cos(float x) {
  const float r = reduce_two_pi(x);
  return sin_folded(1.57079637f - std::abs(r));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise linear ops (second order)

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> v = a.value();
  v += b.value();
  return a.tape->record(std::move(v), {a, b},
                        [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{g, g}; }, true);
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> v = a.value();
  v *= c;
  return a.tape->record(std::move(v), {a},
                        [c](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{scale(g, c)}; }, true);
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return add(a, scale(b, T(-1)));
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T c) {
  Tensor<T> v = a.value();
  for (auto& x : v.data()) x += c;
  return a.tape->record(std::move(v), {a}, [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{g}; }, true);
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> v = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bv[i];
  return a.tape->record(std::move(v), {a, b},
                        [a, b](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{a.requires_grad() ? mul(g, b) : Var<T>{},
                                                     b.requires_grad() ? mul(g, a) : Var<T>{}};
                        },
                        true);
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape s) {
  const Shape orig = a.shape();
  return a.tape->record(a.value().reshaped(std::move(s)), {a},
                        [orig](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{reshape(g, orig)}; }, true);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts (second order; each is the adjoint of the other)

template <class T>
Var<T> broadcast_to(const Var<T>& s, Shape shape);

/// Sum of all elements, as a 1-element tensor.
template <class T>
Var<T> sum_all(const Var<T>& a) {
  const Shape orig = a.shape();
  return a.tape->record(Tensor<T>::scalar(a.value().sum()), {a},
                        [orig](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{broadcast_to(g, orig)}; },
                        true);
}

template <class T>
Var<T> broadcast_to(const Var<T>& s, Shape shape) {
  require(s.value().size() == 1, "broadcast_to: expects a 1-element tensor, got " + shape_str(s.shape()));
  return s.tape->record(Tensor<T>(shape, s.value()[0]), {s},
                        [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{sum_all(g)}; }, true);
}

template <class T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / T(a.value().size()));
}

template <class T>
Var<T> broadcast_items(const Var<T>& s, Shape shape);

/// [B x ...] -> [B], summing everything but the leading axis.
template <class T>
Var<T> sum_per_item(const Var<T>& a) {
  const Shape orig = a.shape();
  const std::size_t b = orig.at(0), inner = a.value().size() / b;
  Tensor<T> v(Shape{b});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < inner; ++j) v[i] += a.value()[i * inner + j];
  return a.tape->record(std::move(v), {a},
                        [orig](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{broadcast_items(g, orig)}; },
                        true);
}

template <class T>
Var<T> broadcast_items(const Var<T>& s, Shape shape) {
  const std::size_t b = shape.at(0), inner = shape_size(shape) / b;
  require(s.value().size() == b, "broadcast_items: " + shape_str(s.shape()) + " vs " + shape_str(shape));
  Tensor<T> v(shape);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < inner; ++j) v[i * inner + j] = s.value()[i];
  return s.tape->record(std::move(v), {s},
                        [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{sum_per_item(g)}; }, true);
}

template <class T>
Var<T> broadcast_rows(const Var<T>& v, std::size_t rows);

/// [N x M] -> [M]
template <class T>
Var<T> sum_rows(const Var<T>& a) {
  require(a.value().rank() == 2, "sum_rows: expects a matrix, got " + shape_str(a.shape()));
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor<T> v(Shape{m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[j] += a.value()[i * m + j];
  return a.tape->record(std::move(v), {a},
                        [n](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{broadcast_rows(g, n)}; }, true);
}

/// [M] -> [rows x M]
template <class T>
Var<T> broadcast_rows(const Var<T>& v, std::size_t rows) {
  require(v.value().rank() == 1, "broadcast_rows: expects a vector, got " + shape_str(v.shape()));
  const std::size_t m = v.shape()[0];
  Tensor<T> out(Shape{rows, m});
  for (std::size_t i = 0; i < rows; ++i) std::copy(v.value().ptr(), v.value().ptr() + m, out.ptr() + i * m);
  return v.tape->record(std::move(out), {v},
                        [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{sum_rows(g)}; }, true);
}

// ---------------------------------------------------------------------------
// Matrix products (second order)

/// op(A) * op(B) with optional transposes; A and B are matrices.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b, bool ta = false, bool tb = false) {
  require(a.value().rank() == 2 && b.value().rank() == 2,
          "matmul: expects matrices, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t ar = a.shape()[0], ac = a.shape()[1], br = b.shape()[0], bc = b.shape()[1];
  const std::size_t p = ta ? ac : ar, m = ta ? ar : ac;
  const std::size_t mb = tb ? bc : br, n = tb ? br : bc;
  if (m != mb)
    throw ShapeError("matmul: inner dimensions differ: op(A)=" + std::to_string(p) + "x" + std::to_string(m) +
                     ", op(B)=" + std::to_string(mb) + "x" + std::to_string(n));
  Tensor<T> out(Shape{p, n});
  const T* ap = a.value().ptr();
  const T* bp = b.value().ptr();
  if (!ta && !tb) {
    kernels::gemm_nn(ap, bp, out.ptr(), p, m, n);
  } else if (!ta && tb) {
    kernels::gemm_nt(ap, bp, out.ptr(), p, m, n);
  } else if (ta && !tb) {
    kernels::gemm_tn(ap, bp, out.ptr(), ar, ac, n);
  } else {
    const auto at = kernels::transpose(ap, ar, ac);
    kernels::gemm_nt(at.data(), bp, out.ptr(), p, m, n);
  }
  return a.tape->record(std::move(out), {a, b},
                        [a, b, ta, tb](Tape<T>&, const Var<T>& g) {
                          Var<T> ga, gb;
                          if (a.requires_grad()) ga = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
                          if (b.requires_grad()) gb = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
                          return std::vector<Var<T>>{ga, gb};
                        },
                        true);
}

/// y[N x M] + b[M] broadcast over rows.
template <class T>
Var<T> add_bias_rows(const Var<T>& y, const Var<T>& b) {
  require(y.value().rank() == 2 && b.value().rank() == 1 && y.shape()[1] == b.shape()[0],
          "add_bias_rows: " + shape_str(y.shape()) + " + " + shape_str(b.shape()));
  Tensor<T> v = y.value();
  const std::size_t n = v.dim(0), m = v.dim(1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) v[i * m + j] += b.value()[j];
  return y.tape->record(std::move(v), {y, b},
                        [b](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{g, b.requires_grad() ? sum_rows(g) : Var<T>{}};
                        },
                        true);
}

/// out[b,n] = sum_m W[n,m] x[b,m] + bias[n]
template <class T>
Var<T> affine(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  require(x.value().rank() == 2 && w.value().rank() == 2 && b.value().rank() == 1,
          "affine: expects x[BxM], W[NxM], b[N]; got " + shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
              shape_str(b.shape()));
  if (x.shape()[1] != w.shape()[1] || w.shape()[0] != b.shape()[0])
    throw ShapeError("affine: x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) + " b" + shape_str(b.shape()) +
                     " do not conform");
  return add_bias_rows(matmul(x, w, false, true), b);
}

// ---------------------------------------------------------------------------
// Column / row slicing (second order)

template <class T>
Var<T> pad_cols(const Var<T>& a, std::size_t total, std::size_t begin);

/// Columns [begin, begin+count) of a matrix.
template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count) {
  require(a.value().rank() == 2 && begin + count <= a.shape()[1],
          "slice_cols: [" + std::to_string(begin) + "," + std::to_string(begin + count) + ") of " +
              shape_str(a.shape()));
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor<T> v(Shape{n, count});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < count; ++j) v[i * count + j] = a.value()[i * m + begin + j];
  return a.tape->record(std::move(v), {a},
                        [m, begin](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{pad_cols(g, m, begin)}; },
                        true);
}

/// Embed a matrix into `total` zero columns starting at `begin`.
template <class T>
Var<T> pad_cols(const Var<T>& a, std::size_t total, std::size_t begin) {
  const std::size_t n = a.shape()[0], c = a.shape()[1];
  require(begin + c <= total, "pad_cols: does not fit");
  Tensor<T> v(Shape{n, total});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) v[i * total + begin + j] = a.value()[i * c + j];
  return a.tape->record(std::move(v), {a},
                        [begin, c](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{slice_cols(g, begin, c)}; },
                        true);
}

template <class T>
Var<T> concat_cols(const Var<T>& a, const Var<T>& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[0] == b.shape()[0],
          "concat_cols: " + shape_str(a.shape()) + " | " + shape_str(b.shape()));
  const std::size_t n = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  Tensor<T> v(Shape{n, ca + cb});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(a.value().ptr() + i * ca, a.value().ptr() + (i + 1) * ca, v.ptr() + i * (ca + cb));
    std::copy(b.value().ptr() + i * cb, b.value().ptr() + (i + 1) * cb, v.ptr() + i * (ca + cb) + ca);
  }
  return a.tape->record(std::move(v), {a, b},
                        [a, b, ca, cb](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{a.requires_grad() ? slice_cols(g, 0, ca) : Var<T>{},
                                                     b.requires_grad() ? slice_cols(g, ca, cb) : Var<T>{}};
                        },
                        true);
}

/// Row `i` of a matrix as a vector.
template <class T>
Var<T> row(const Var<T>& a, std::size_t i) {
  require(a.value().rank() == 2 && i < a.shape()[0], "row: index " + std::to_string(i) + " of " + shape_str(a.shape()));
  const std::size_t n = a.shape()[0], m = a.shape()[1];
  Tensor<T> v(Shape{m});
  std::copy(a.value().ptr() + i * m, a.value().ptr() + (i + 1) * m, v.ptr());
  return a.tape->record(std::move(v), {a},
                        [n, m, i](Tape<T>& t, const Var<T>& g) {
                          Tensor<T> z(Shape{n, m});
                          std::copy_n(g.value().ptr(), m, z.ptr() + i * m);
                          return std::vector<Var<T>>{t.constant(std::move(z))};
                        },
                        false);
}

// ---------------------------------------------------------------------------
// Piecewise-linear activation (second order: its derivative is a constant mask)

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> v = x.value();
  Tensor<T> mask(v.shape());
  for (std::size_t i = 0; i < v.size(); ++i) {
    mask[i] = v[i] > T(0) ? T(1) : slope;
    v[i] *= mask[i];
  }
  const bool track = x.tape->needs_grad({x});
  auto m = track ? x.tape->constant(std::move(mask)) : Var<T>{};
  return x.tape->record(std::move(v), {x}, [m](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{mul(g, m)}; },
                        true);
}

// ---------------------------------------------------------------------------
// Smooth elementwise nonlinearities (first order)

namespace detail {
template <class T, class F, class D>
Var<T> unary(const Var<T>& x, F f, D df) {
  Tensor<T> v = x.value();
  for (auto& e : v.data()) e = f(e);
  return x.tape->record(std::move(v), {x},
                        [x, df](Tape<T>& t, const Var<T>& g) {
                          Tensor<T> r = g.value();
                          const auto& xv = x.value();
                          for (std::size_t i = 0; i < r.size(); ++i) r[i] *= df(xv[i]);
                          return std::vector<Var<T>>{t.constant(std::move(r))};
                        },
                        false);
}
}  // namespace detail

template <class T>
Var<T> sine(const Var<T>& x) {
  return detail::unary(x, [](T v) { return detail::fast_sin(v); }, [](T v) { return detail::fast_cos(v); });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> softplus(const Var<T>& x) {
  return detail::unary(x, [](T v) { return detail::softplus(v); }, [](T v) { return detail::sigmoid(v); });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return detail::sigmoid(v); },
      [](T v) {
        const T s = detail::sigmoid(v);
        return s * (T(1) - s);
      });
}

template <class T>
Var<T> square(const Var<T>& x) {
  return mul(x, x);
}

// ---------------------------------------------------------------------------
// FiLM-modulated layer: act(gamma * (x W^T + b) + beta), gamma/beta shared by all rows.

enum class Activation { sine, relu };

template <class T>
Var<T> film_layer(const Var<T>& x, const Var<T>& w, const Var<T>& b, const Var<T>& gamma, const Var<T>& beta,
                  Activation act) {
  require(x.value().rank() == 2 && w.value().rank() == 2 && x.shape()[1] == w.shape()[1],
          "film_layer: x" + shape_str(x.shape()) + " vs W" + shape_str(w.shape()));
  const std::size_t p = x.shape()[0], m = x.shape()[1], n = w.shape()[0];
  require(b.shape() == Shape{n} && gamma.shape() == Shape{n} && beta.shape() == Shape{n},
          "film_layer: b" + shape_str(b.shape()) + " gamma" + shape_str(gamma.shape()) + " beta" +
              shape_str(beta.shape()) + " must all be [" + std::to_string(n) + "]");
  Tensor<T> pre(Shape{p, n});
  kernels::gemm_nt(x.value().ptr(), w.value().ptr(), pre.ptr(), p, m, n);
  const T* bv = b.value().ptr();
  const T* gv = gamma.value().ptr();
  const T* sv = beta.value().ptr();
  Tensor<T> out(Shape{p, n});
  T* pv = pre.ptr();
  T* ov = out.ptr();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      pv[i * n + j] += bv[j];
      ov[i * n + j] = gv[j] * pv[i * n + j] + sv[j];
    }
  if (act == Activation::sine)
    for (std::size_t k = 0; k < p * n; ++k) ov[k] = detail::fast_sin(ov[k]);
  else
    for (std::size_t k = 0; k < p * n; ++k) ov[k] = ov[k] > T(0) ? ov[k] : T(0);
  Tape<T>& tape = *x.tape;
  if (!tape.needs_grad({x, w, b, gamma, beta})) return tape.record(std::move(out), {x, w, b, gamma, beta}, nullptr, false);

  auto saved = std::make_shared<Tensor<T>>(std::move(pre));
  return tape.record(
      std::move(out), {x, w, b, gamma, beta},
      [x, w, b, gamma, beta, saved, act, p, m, n](Tape<T>& t, const Var<T>& g) {
        const Tensor<T>& pre = *saved;
        const T* gv = gamma.value().ptr();
        const T* sv = beta.value().ptr();
        Tensor<T> gu(Shape{p, n});
        Tensor<T> ggamma(Shape{n}), gbeta(Shape{n});
        T* du = gu.ptr();
        const T* pv = pre.ptr();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < n; ++j) du[i * n + j] = gv[j] * pv[i * n + j] + sv[j];
        if (act == Activation::sine)
          for (std::size_t k = 0; k < p * n; ++k) du[k] = detail::fast_cos(du[k]);
        else
          for (std::size_t k = 0; k < p * n; ++k) du[k] = du[k] > T(0) ? T(1) : T(0);
        const T* gg = g.value().ptr();
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const T val = gg[i * n + j] * du[i * n + j];
            gbeta[j] += val;
            ggamma[j] += val * pv[i * n + j];
            du[i * n + j] = val * gv[j];  // now dL/dpre
          }
        std::vector<Var<T>> r(5);
        if (x.requires_grad()) {
          Tensor<T> gx(Shape{p, m});
          kernels::gemm_nn(gu.ptr(), w.value().ptr(), gx.ptr(), p, n, m);
          r[0] = t.constant(std::move(gx));
        }
        if (w.requires_grad()) {
          Tensor<T> gw(Shape{n, m});
          kernels::gemm_tn(gu.ptr(), x.value().ptr(), gw.ptr(), p, n, m);
          r[1] = t.constant(std::move(gw));
        }
        if (b.requires_grad()) {
          Tensor<T> gb(Shape{n});
          for (std::size_t i = 0; i < p; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += gu[i * n + j];
          r[2] = t.constant(std::move(gb));
        }
        if (gamma.requires_grad()) r[3] = t.constant(std::move(ggamma));
        if (beta.requires_grad()) r[4] = t.constant(std::move(gbeta));
        return r;
      },
      false);
}

// ---------------------------------------------------------------------------
// Image ops on [B x C x H x W] (second order)

struct ConvSpec {
  std::size_t stride = 1, pad = 0;
};

namespace detail {
inline kernels::ConvGeometry geometry(const Shape& x, const Shape& k, ConvSpec s) {
  return {x[1], x[2], x[3], k[2], k[3], s.stride, s.pad};
}
}  // namespace detail

template <class T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& k, const Shape& x_shape, ConvSpec spec);
template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, const Shape& k_shape, ConvSpec spec);

/// Cross-correlation of x[B,Ci,H,W] with k[Co,Ci,kh,kw], zero padding, no bias.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, ConvSpec spec = {}) {
  const Shape& xs = x.shape();
  const Shape& ks = k.shape();
  require(xs.size() == 4 && ks.size() == 4 && xs[1] == ks[1],
          "conv2d: input " + shape_str(xs) + " vs kernel " + shape_str(ks));
  require(xs[2] + 2 * spec.pad >= ks[2] && xs[3] + 2 * spec.pad >= ks[3],
          "conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(xs));
  const auto geo = detail::geometry(xs, ks, spec);
  const std::size_t bsz = xs[0], co = ks[0], rows = geo.col_rows(), cols = geo.col_cols();
  Tensor<T> out(Shape{bsz, co, geo.out_h(), geo.out_w()});
  std::vector<T> buf(rows * cols);
  for (std::size_t b = 0; b < bsz; ++b) {
    kernels::im2col(x.value().ptr() + b * xs[1] * xs[2] * xs[3], geo, buf.data());
    kernels::gemm_nn(k.value().ptr(), buf.data(), out.ptr() + b * co * cols, co, rows, cols);
  }
  return x.tape->record(std::move(out), {x, k},
                        [x, k, spec](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{
                              x.requires_grad() ? conv2d_input_grad(g, k, x.shape(), spec) : Var<T>{},
                              k.requires_grad() ? conv2d_weight_grad(x, g, k.shape(), spec) : Var<T>{}};
                        },
                        true);
}

/// Adjoint of conv2d with respect to its input.
template <class T>
Var<T> conv2d_input_grad(const Var<T>& g, const Var<T>& k, const Shape& x_shape, ConvSpec spec) {
  const Shape& ks = k.shape();
  const auto geo = detail::geometry(x_shape, ks, spec);
  const std::size_t bsz = x_shape[0], co = ks[0], rows = geo.col_rows(), cols = geo.col_cols();
  require(g.shape() == Shape({bsz, co, geo.out_h(), geo.out_w()}), "conv2d_input_grad: gradient " + shape_str(g.shape()));
  Tensor<T> dx(x_shape);
  std::vector<T> buf(rows * cols);
  for (std::size_t b = 0; b < bsz; ++b) {
    kernels::gemm_tn(k.value().ptr(), g.value().ptr() + b * co * cols, buf.data(), co, rows, cols);
    kernels::col2im(buf.data(), geo, dx.ptr() + b * x_shape[1] * x_shape[2] * x_shape[3]);
  }
  return g.tape->record(std::move(dx), {g, k},
                        [g, k, spec](Tape<T>&, const Var<T>& u) {
                          return std::vector<Var<T>>{g.requires_grad() ? conv2d(u, k, spec) : Var<T>{},
                                                     k.requires_grad() ? conv2d_weight_grad(u, g, k.shape(), spec)
                                                                       : Var<T>{}};
                        },
                        true);
}

/// Adjoint of conv2d with respect to its kernel.
template <class T>
Var<T> conv2d_weight_grad(const Var<T>& x, const Var<T>& g, const Shape& k_shape, ConvSpec spec) {
  const Shape& xs = x.shape();
  const auto geo = detail::geometry(xs, k_shape, spec);
  const std::size_t bsz = xs[0], co = k_shape[0], rows = geo.col_rows(), cols = geo.col_cols();
  Tensor<T> dk(k_shape);
  std::vector<T> buf(rows * cols);
  for (std::size_t b = 0; b < bsz; ++b) {
    kernels::im2col(x.value().ptr() + b * xs[1] * xs[2] * xs[3], geo, buf.data());
    kernels::gemm_nt(g.value().ptr() + b * co * cols, buf.data(), dk.ptr(), co, cols, rows, true);
  }
  return x.tape->record(std::move(dk), {x, g},
                        [x, g, spec](Tape<T>&, const Var<T>& u) {
                          return std::vector<Var<T>>{
                              x.requires_grad() ? conv2d_input_grad(g, u, x.shape(), spec) : Var<T>{},
                              g.requires_grad() ? conv2d(x, u, spec) : Var<T>{}};
                        },
                        true);
}

template <class T>
Var<T> broadcast_channels(const Var<T>& b, const Shape& shape);

/// [B,C,H,W] -> [C]
template <class T>
Var<T> sum_channels(const Var<T>& y) {
  const Shape s = y.shape();
  const std::size_t hw = s[2] * s[3];
  Tensor<T> v(Shape{s[1]});
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c) {
      const T* p = y.value().ptr() + (n * s[1] + c) * hw;
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += p[i];
      v[c] += acc;
    }
  return y.tape->record(std::move(v), {y},
                        [s](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{broadcast_channels(g, s)}; }, true);
}

template <class T>
Var<T> broadcast_channels(const Var<T>& b, const Shape& s) {
  require(b.shape() == Shape{s[1]}, "broadcast_channels: " + shape_str(b.shape()) + " onto " + shape_str(s));
  Tensor<T> v(s);
  const std::size_t hw = s[2] * s[3];
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c) std::fill_n(v.ptr() + (n * s[1] + c) * hw, hw, b.value()[c]);
  return b.tape->record(std::move(v), {b}, [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{sum_channels(g)}; },
                        true);
}

template <class T>
Var<T> add_channel_bias(const Var<T>& y, const Var<T>& b) {
  return add(y, broadcast_channels(b, y.shape()));
}

template <class T>
Var<T> unpool2(const Var<T>& g);

/// 2x2 mean downsample; spatial extents must be even.
template <class T>
Var<T> avg_pool2(const Var<T>& x) {
  const Shape s = x.shape();
  require(s.size() == 4 && s[2] % 2 == 0 && s[3] % 2 == 0, "avg_pool2: needs even spatial extents, got " + shape_str(s));
  const std::size_t h = s[2] / 2, w = s[3] / 2;
  Tensor<T> v(Shape{s[0], s[1], h, w});
  const auto& xv = x.value();
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j)
          v.at(n, c, i, j) = T(0.25) * (xv.at(n, c, 2 * i, 2 * j) + xv.at(n, c, 2 * i, 2 * j + 1) +
                                        xv.at(n, c, 2 * i + 1, 2 * j) + xv.at(n, c, 2 * i + 1, 2 * j + 1));
  return x.tape->record(std::move(v), {x}, [](Tape<T>&, const Var<T>& g) { return std::vector<Var<T>>{unpool2(g)}; },
                        true);
}

/// Adjoint of avg_pool2: each value spread over its 2x2 source block, times 1/4.
template <class T>
Var<T> unpool2(const Var<T>& g) {
  const Shape s = g.shape();
  Tensor<T> v(Shape{s[0], s[1], s[2] * 2, s[3] * 2});
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t i = 0; i < s[2]; ++i)
        for (std::size_t j = 0; j < s[3]; ++j) {
          const T q = T(0.25) * g.value().at(n, c, i, j);
          v.at(n, c, 2 * i, 2 * j) = q;
          v.at(n, c, 2 * i, 2 * j + 1) = q;
          v.at(n, c, 2 * i + 1, 2 * j) = q;
          v.at(n, c, 2 * i + 1, 2 * j + 1) = q;
        }
  return g.tape->record(std::move(v), {g}, [](Tape<T>&, const Var<T>& u) { return std::vector<Var<T>>{avg_pool2(u)}; },
                        true);
}

template <class T>
Var<T> pad_channels(const Var<T>& x, std::size_t total, std::size_t begin);

template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape s = x.shape();
  require(s.size() == 4 && begin + count <= s[1], "slice_channels: out of range for " + shape_str(s));
  const std::size_t hw = s[2] * s[3];
  Tensor<T> v(Shape{s[0], count, s[2], s[3]});
  for (std::size_t n = 0; n < s[0]; ++n)
    std::copy_n(x.value().ptr() + (n * s[1] + begin) * hw, count * hw, v.ptr() + n * count * hw);
  const std::size_t total = s[1];
  return x.tape->record(std::move(v), {x},
                        [total, begin](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{pad_channels(g, total, begin)};
                        },
                        true);
}

template <class T>
Var<T> pad_channels(const Var<T>& x, std::size_t total, std::size_t begin) {
  const Shape s = x.shape();
  require(begin + s[1] <= total, "pad_channels: does not fit");
  const std::size_t hw = s[2] * s[3];
  Tensor<T> v(Shape{s[0], total, s[2], s[3]});
  for (std::size_t n = 0; n < s[0]; ++n)
    std::copy_n(x.value().ptr() + n * s[1] * hw, s[1] * hw, v.ptr() + (n * total + begin) * hw);
  const std::size_t c = s[1];
  return x.tape->record(std::move(v), {x},
                        [begin, c](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{slice_channels(g, begin, c)};
                        },
                        true);
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  require(sa.size() == 4 && sb.size() == 4 && sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3],
          "concat_channels: " + shape_str(sa) + " | " + shape_str(sb));
  const std::size_t hw = sa[2] * sa[3], ca = sa[1], cb = sb[1];
  Tensor<T> v(Shape{sa[0], ca + cb, sa[2], sa[3]});
  for (std::size_t n = 0; n < sa[0]; ++n) {
    std::copy_n(a.value().ptr() + n * ca * hw, ca * hw, v.ptr() + n * (ca + cb) * hw);
    std::copy_n(b.value().ptr() + n * cb * hw, cb * hw, v.ptr() + (n * (ca + cb) + ca) * hw);
  }
  return a.tape->record(std::move(v), {a, b},
                        [a, b, ca, cb](Tape<T>&, const Var<T>& g) {
                          return std::vector<Var<T>>{a.requires_grad() ? slice_channels(g, 0, ca) : Var<T>{},
                                                     b.requires_grad() ? slice_channels(g, ca, cb) : Var<T>{}};
                        },
                        true);
}

/// Normalized pixel coordinates in [-1, 1], corner-anchored: channel 0 varies
/// with the column, channel 1 with the row. A single-pixel axis maps to 0.
template <class T>
Tensor<T> coordinate_grid(std::size_t batch, std::size_t h, std::size_t w) {
  Tensor<T> c(Shape{batch, 2, h, w});
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        c.at(n, 0, i, j) = w > 1 ? T(-1) + T(2) * T(j) / T(w - 1) : T(0);
        c.at(n, 1, i, j) = h > 1 ? T(-1) + T(2) * T(i) / T(h - 1) : T(0);
      }
  return c;
}

/// Appends the two coordinate channels.
template <class T>
Var<T> coord_channels(const Var<T>& x) {
  const Shape s = x.shape();
  require(s.size() == 4, "coord_channels: expects [B,C,H,W], got " + shape_str(s));
  return concat_channels(x, x.tape->constant(coordinate_grid<T>(s[0], s[2], s[3])));
}

}  // namespace pifield::ops
