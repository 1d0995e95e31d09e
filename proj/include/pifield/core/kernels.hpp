#pragma once

// Dense kernels with a fixed accumulation order. Every output element is
// reduced in the same sequence regardless of how many rows a call covers, so
// chunked and whole-batch evaluation agree bit for bit.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

namespace pifield::kernels {

namespace detail {
// Register tiles keep a few rows of one 64-byte vector of C in registers
// across the reduction loop. Lanes are independent, so every element still
// sees a plain multiply then add in index order.
template <class T>
inline constexpr std::size_t lanes = 64 / sizeof(T);
inline constexpr std::size_t tile_rows = 6;
inline constexpr std::size_t tile_rows_tn = 8;
inline constexpr std::size_t tn_chunk = 512;  // rows of A/B per pass, keeps the panel in cache

template <class T>
struct vec64_of {
  typedef T type __attribute__((vector_size(64)));
};
template <class T>
using vec64 = typename vec64_of<T>::type;

template <class T>
inline vec64<T> load(const T* p) {
  vec64<T> v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
template <class T>
inline void store(T* p, const typename vec64_of<T>::type& v) {
  std::memcpy(p, &v, sizeof v);
}

template <class T>
inline void tile_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, bool accumulate) {
  constexpr std::size_t IB = tile_rows;
  vec64<T> acc[IB];
  for (std::size_t ii = 0; ii < IB; ++ii) acc[ii] = accumulate ? load(c + ii * n) : vec64<T>{};
  for (std::size_t k = 0; k < m; ++k) {
    const vec64<T> bv = load(b + k * n);
    for (std::size_t ii = 0; ii < IB; ++ii) acc[ii] += a[ii * m + k] * bv;
  }
  for (std::size_t ii = 0; ii < IB; ++ii) store(c + ii * n, acc[ii]);
}

// Columns [j0, j1) for a block of `lanes` rows: vectorize across rows using a
// k-major copy of the A block.
template <class T>
inline void narrow_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t j0, std::size_t j1,
                      bool accumulate, std::vector<vec64<T>>& buf) {
  constexpr std::size_t L = lanes<T>;
  buf.resize(m);
  for (std::size_t k = 0; k < m; ++k)
    for (std::size_t l = 0; l < L; ++l) buf[k][l] = a[l * m + k];
  for (std::size_t j = j0; j < j1; ++j) {
    vec64<T> acc{};
    if (accumulate)
      for (std::size_t l = 0; l < L; ++l) acc[l] = c[l * n + j];
    for (std::size_t k = 0; k < m; ++k) acc += buf[k] * b[k * n + j];
    for (std::size_t l = 0; l < L; ++l) c[l * n + j] = acc[l];
  }
}
}  // namespace detail

// C[P x N] (+)= A[P x M] * B[M x N]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t p, std::size_t m, std::size_t n, bool accumulate = false) {
  constexpr std::size_t IB = detail::tile_rows, L = detail::lanes<T>;
  const std::size_t pt = p - p % IB, nt = n - n % L, pl = p - p % L;
  for (std::size_t i = 0; i < pt; i += IB)
    for (std::size_t j = 0; j < nt; j += L) detail::tile_nn(a + i * m, b + j, c + i * n + j, m, n, accumulate);
  if (nt < n) {
    std::vector<detail::vec64<T>> buf;
    for (std::size_t i = 0; i < pl; i += L) detail::narrow_nn(a + i * m, b, c + i * n, m, n, nt, n, accumulate, buf);
  }
  // leftovers: same per-element order, plain loops
  auto edge = [&](std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1) {
    for (std::size_t i = i0; i < i1; ++i) {
      T* crow = c + i * n;
      if (!accumulate)
        for (std::size_t j = j0; j < j1; ++j) crow[j] = T(0);
      const T* arow = a + i * m;
      for (std::size_t k = 0; k < m; ++k) {
        const T av = arow[k];
        const T* brow = b + k * n;
        for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
      }
    }
  };
  if (pt < p) edge(pt, p, 0, nt);
  if (pl < p) edge(pl, p, nt, n);
}

// C[M x N] (+)= A[P x M]^T * B[P x N]; reduction runs over P in index order.
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t p, std::size_t m, std::size_t n, bool accumulate = false) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T(0);
  constexpr std::size_t IB = detail::tile_rows_tn, L = detail::lanes<T>;
  const std::size_t mt = m - m % IB, nt = n - n % L, ml = m - m % L;
  for (std::size_t r0 = 0; r0 < p; r0 += detail::tn_chunk) {
    const std::size_t r1 = std::min(p, r0 + detail::tn_chunk);
    for (std::size_t k0 = 0; k0 < mt; k0 += IB)
      for (std::size_t j0 = 0; j0 < nt; j0 += L) {
        detail::vec64<T> acc[IB];
        for (std::size_t kk = 0; kk < IB; ++kk) acc[kk] = detail::load(c + (k0 + kk) * n + j0);
        for (std::size_t r = r0; r < r1; ++r) {
          const T* arow = a + r * m + k0;
          const auto bv = detail::load(b + r * n + j0);
          for (std::size_t kk = 0; kk < IB; ++kk) acc[kk] += arow[kk] * bv;
        }
        for (std::size_t kk = 0; kk < IB; ++kk) detail::store(c + (k0 + kk) * n + j0, acc[kk]);
      }
    // narrow columns: vectorize across k instead
    for (std::size_t j = nt; j < n; ++j)
      for (std::size_t k0 = 0; k0 < ml; k0 += L) {
        detail::vec64<T> acc;
        for (std::size_t l = 0; l < L; ++l) acc[l] = c[(k0 + l) * n + j];
        for (std::size_t r = r0; r < r1; ++r) acc += detail::load(a + r * m + k0) * b[r * n + j];
        for (std::size_t l = 0; l < L; ++l) c[(k0 + l) * n + j] = acc[l];
      }
    auto edge = [&](std::size_t k0, std::size_t k1, std::size_t j0, std::size_t j1) {
      for (std::size_t r = r0; r < r1; ++r) {
        const T* arow = a + r * m;
        const T* brow = b + r * n;
        for (std::size_t k = k0; k < k1; ++k) {
          const T av = arow[k];
          T* crow = c + k * n;
          for (std::size_t j = j0; j < j1; ++j) crow[j] += av * brow[j];
        }
      }
    };
    if (mt < m) edge(mt, m, 0, nt);
    if (ml < m) edge(ml, m, nt, n);
  }
}

template <class T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> t(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// C[P x N] (+)= A[P x M] * B[N x M]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t p, std::size_t m, std::size_t n, bool accumulate = false) {
  const auto bt = transpose(b, n, m);
  gemm_nn(a, bt.data(), c, p, m, n, accumulate);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, pad;
  std::size_t out_h() const { return (height + 2 * pad - kh) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kw) / stride + 1; }
  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h() * out_w(); }
};

// Image [C x H x W] -> columns [(C*kh*kw) x (Ho*Wo)], zero padding.
template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        T* dst = cols + row * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = long(oy * g.stride + ki) - long(g.pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = long(ox * g.stride + kj) - long(g.pad);
            dst[oy * wo + ox] = (iy >= 0 && iy < long(g.height) && ix >= 0 && ix < long(g.width))
                                    ? img[(c * g.height + std::size_t(iy)) * g.width + std::size_t(ix)]
                                    : T(0);
          }
        }
      }
}

// Adjoint of im2col: scatter-add columns back into an image (accumulates).
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj, ++row) {
        const T* src = cols + row * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = long(oy * g.stride + ki) - long(g.pad);
          if (iy < 0 || iy >= long(g.height)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = long(ox * g.stride + kj) - long(g.pad);
            if (ix < 0 || ix >= long(g.width)) continue;
            img[(c * g.height + std::size_t(iy)) * g.width + std::size_t(ix)] += src[oy * wo + ox];
          }
        }
      }
}

}  // namespace pifield::kernels
