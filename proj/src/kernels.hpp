#pragma once

// Plain loop kernels shared by the differentiable ops. Every reduction runs in
// a fixed order so results are reproducible bit for bit, and each output
// element of a product depends only on its own row and column.

#include <cstddef>

namespace fsml::kernels {

/// c[m,n] += a[m,k] * b[k,n]; reduction over k in ascending order.
template <class Real>
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b, Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[i * k + p];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// c[m,n] += a[k,m]^T * b[k,n]
template <class Real>
void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b,
                 Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real av = a[p * m + i];
      const Real* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// Dot product with eight interleaved partial sums.
template <class Real>
Real dot(const Real* x, const Real* y, std::size_t n) {
  Real acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t j = 0; j < 8; ++j) acc[j] += x[i + j] * y[i + j];
  }
  Real s = 0;
  for (; i < n; ++i) s += x[i] * y[i];
  for (std::size_t j = 0; j < 8; ++j) s += acc[j];
  return s;
}

/// c[m,n] += a[m,k] * b[n,k]^T
template <class Real>
void gemm_nt_acc(std::size_t m, std::size_t k, std::size_t n, const Real* a, const Real* b,
                 Real* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, b + j * k, k);
  }
}

}  // namespace fsml::kernels
