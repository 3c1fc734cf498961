#pragma once

// Row-parallel compute kernels. Every kernel has a serial reference in
// kernels::serial and an OpenMP version in kernels::parallel. Both compute
// each output element with the same reduction order, so results agree
// bit-for-bit; tests/test_kernels.cpp checks this.

#include <cstddef>
#include <cstdint>
#include <span>

#include "bvit/tensor.hpp"

namespace bvit::kernels {

// Work (in multiply-adds) below which the dispatching wrappers stay serial.
inline constexpr std::size_t kParallelThreshold = 1u << 15;

namespace detail {

// C[i,:] (+)= A[i,:] * B, A is m x k, B is k x n.
template <typename T>
inline void gemm_nn_row(const T* a, const T* b, T* c, std::size_t i, std::size_t k, std::size_t n,
                        bool accumulate) {
  T* ci = c + i * n;
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
  const T* ai = a + i * k;
  for (std::size_t p = 0; p < k; ++p) {
    const T av = ai[p];
    const T* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

// C[i,:] (+)= A[i,:] * B^T, A is m x k, B is n x k.
template <typename T>
inline void gemm_nt_row(const T* a, const T* b, T* c, std::size_t i, std::size_t k, std::size_t n,
                        bool accumulate) {
  const T* ai = a + i * k;
  T* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const T* bj = b + j * k;
    T acc{0};
    for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
    ci[j] = accumulate ? ci[j] + acc : acc;
  }
}

// C[i,:] (+)= (A^T)[i,:] * B, A is k x m, B is k x n.
template <typename T>
inline void gemm_tn_row(const T* a, const T* b, T* c, std::size_t i, std::size_t m, std::size_t k,
                        std::size_t n, bool accumulate) {
  T* ci = c + i * n;
  if (!accumulate)
    for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a[p * m + i];
    if (av == T{0}) continue;
    const T* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

// y[r] = sum_c t[r,c] * x[c] using only adds and subtracts.
template <typename T>
inline void ternary_row(const T* x, const std::int8_t* trits, T* y, std::size_t rows, std::size_t cols,
                        T scale) {
  for (std::size_t r = 0; r < rows; ++r) {
    const std::int8_t* tr = trits + r * cols;
    T acc{0};
    for (std::size_t c = 0; c < cols; ++c) {
      const T pos = tr[c] > 0 ? x[c] : T{0};
      const T neg = tr[c] < 0 ? x[c] : T{0};
      acc += pos - neg;
    }
    y[r] = scale * acc;
  }
}

}  // namespace detail

namespace serial {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_nn_row(a, b, c, i, k, n, accumulate);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_nt_row(a, b, c, i, k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  for (std::size_t i = 0; i < m; ++i) detail::gemm_tn_row(a, b, c, i, m, k, n, accumulate);
}

// Y (N x rows) = scale * X (N x cols) * T^T.
template <typename T>
void ternary_gemm(const T* x, const std::int8_t* trits, T* y, std::size_t n, std::size_t rows,
                  std::size_t cols, T scale) {
  for (std::size_t i = 0; i < n; ++i) detail::ternary_row(x + i * cols, trits, y + i * rows, rows, cols, scale);
}

}  // namespace serial

namespace parallel {

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    detail::gemm_nn_row(a, b, c, static_cast<std::size_t>(i), k, n, accumulate);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    detail::gemm_nt_row(a, b, c, static_cast<std::size_t>(i), k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < rows; ++i)
    detail::gemm_tn_row(a, b, c, static_cast<std::size_t>(i), m, k, n, accumulate);
}

template <typename T>
void ternary_gemm(const T* x, const std::int8_t* trits, T* y, std::size_t n, std::size_t rows,
                  std::size_t cols, T scale) {
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < count; ++i)
    detail::ternary_row(x + i * cols, trits, y + i * rows, rows, cols, scale);
}

}  // namespace parallel

// Dispatching wrappers used by the library.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  if (m * k * n >= kParallelThreshold)
    parallel::gemm_nn(a, b, c, m, k, n, accumulate);
  else
    serial::gemm_nn(a, b, c, m, k, n, accumulate);
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  if (m * k * n >= kParallelThreshold)
    parallel::gemm_nt(a, b, c, m, k, n, accumulate);
  else
    serial::gemm_nt(a, b, c, m, k, n, accumulate);
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
             bool accumulate = false) {
  if (m * k * n >= kParallelThreshold)
    parallel::gemm_tn(a, b, c, m, k, n, accumulate);
  else
    serial::gemm_tn(a, b, c, m, k, n, accumulate);
}

template <typename T>
void ternary_gemm(const T* x, const std::int8_t* trits, T* y, std::size_t n, std::size_t rows,
                  std::size_t cols, T scale) {
  if (n * rows * cols >= kParallelThreshold)
    parallel::ternary_gemm(x, trits, y, n, rows, cols, scale);
  else
    serial::ternary_gemm(x, trits, y, n, rows, cols, scale);
}

}  // namespace bvit::kernels
