// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#ifdef CHANGEDET_USE_CBLAS
#include <cblas.h>
#endif

namespace changedet {

// C[m x n] = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is [m x k], op(B) is [k x n]. Leading dimensions are the row strides
// of the stored (untransposed) matrices.
#ifdef CHANGEDET_USE_CBLAS

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb,
                 double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
              ldb, beta, c, ldc);
}

#else

// Portable fallback: fixed accumulation order per output element, so results
// are deterministic just like the BLAS path.
template <typename T>
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha,
                 const T* a, int lda, const T* b, int ldb, T beta, T* c,
                 int ldc) {
  auto at = [&](int i, int p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
  auto bt = [&](int p, int j) { return trans_b ? b[j * ldb + p] : b[p * ldb + j]; };
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += at(i, p) * bt(p, j);
      // beta == 0 must not read C (may be uninitialized), matching BLAS
      c[i * ldc + j] = beta == T(0) ? alpha * acc : alpha * acc + beta * c[i * ldc + j];
    }
  }
}

#endif

}  // namespace changedet
