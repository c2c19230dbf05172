#pragma once

#include <cblas.h>

#include <algorithm>
#include <type_traits>

namespace nfres::blas {

namespace detail {

// Plain row-major loop, used for double precision.
template <typename T>
void gemm_loop(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
               T beta, T* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
    if (beta == T{0}) {
      std::fill(crow, crow + n, T{0});
    } else if (beta != T{1}) {
      for (int j = 0; j < n; ++j) crow[j] *= beta;
    }
    for (int p = 0; p < k; ++p) {
      const T aip = alpha * (trans_a ? a[static_cast<std::ptrdiff_t>(p) * lda + i]
                                     : a[static_cast<std::ptrdiff_t>(i) * lda + p]);
      if (aip == T{0}) continue;
      if (!trans_b) {
        const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
        for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += aip * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
      }
    }
  }
}

}  // namespace detail

/// Row-major C = alpha * op(A) * op(B) + beta * C. Single precision goes to
/// OpenBLAS; double precision uses a plain loop (see the README).
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
          int ldb, T beta, T* c, int ldc) {
  if constexpr (std::is_same_v<T, float>) {
    const auto ta = trans_a ? CblasTrans : CblasNoTrans;
    const auto tb = trans_b ? CblasTrans : CblasNoTrans;
    cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    static_assert(std::is_same_v<T, double>, "gemm supports float and double");
    detail::gemm_loop(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace nfres::blas
