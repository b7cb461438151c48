// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "changedet/ops.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// Dense symmetric C x C matrix (row-major), double precision. Construction
// validates symmetry to 1e-9 relative Frobenius tolerance.
struct SymMatrix {
  int64_t dim = 0;
  std::vector<double> entries;

  SymMatrix() = default;
  SymMatrix(int64_t c, std::vector<double> e);

  double at(int64_t i, int64_t j) const { return entries[i * dim + j]; }
  double& at(int64_t i, int64_t j) { return entries[i * dim + j]; }

  static SymMatrix identity(int64_t c);
  static SymMatrix diag(const std::vector<double>& d);
};

struct EigDecomposition {
  std::vector<double> q;        // C x C, columns are eigenvectors
  std::vector<double> eigvals;  // descending
  int64_t dim = 0;

  double q_at(int64_t i, int64_t j) const { return q[i * dim + j]; }
};

// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
// 1e-12 * ||A||_F or 100 sweeps. Eigenvalues sorted descending, columns of Q
// permuted to match.
EigDecomposition sym_eig(const SymMatrix& a);

// Q * diag(eigvals)^{-1/2} * Q^T. Throws if any eigenvalue is <= 0.
SymMatrix inv_sqrt_eig(const SymMatrix& a);

// Pre-scaling for the Newton-Schulz iteration. kMeanEig (s = tr/C) makes the
// identity an exact fixed point and converges fast on covariance-like
// spectra; kTrace (s = tr) keeps the scaled spectrum inside (0,1] so the
// iteration can never blow up on spiked small-sample covariances - the
// training layers use it.
enum class NewtonScale { kMeanEig, kTrace };

// Y_0 = I; Y_t = 1/2 * Y_{t-1} * (3 I - Y_{t-1}^2 A_N); returns Y_T / sqrt(s).
SymMatrix inv_sqrt_newton(const SymMatrix& a, int iterations,
                          NewtonScale scale = NewtonScale::kMeanEig);

// Unrolled Y_0 = I; Y_t = 1/2 * Y_{t-1} * (3 I - Y_{t-1}^2 A) on an already
// pre-scaled matrix, expressed in recorded tensor ops so gradients flow.
// Y_T is a polynomial in A, which the dual-space whitening path relies on.
template <typename T>
Tensor<T> newton_polynomial_graph(const Tensor<T>& a_scaled, int iterations) {
  Tensor<T> y = identity_matrix<T>(a_scaled.dim(0));
  for (int t = 0; t < iterations; ++t) {
    auto y2a = matmul(matmul(y, y), a_scaled);
    auto r = add_scaled_identity(scalar_mul(y2a, T(-1)), T(3));
    y = scalar_mul(matmul(y, r), T(0.5));
  }
  return y;
}

// Differentiable inverse square root via the unrolled iteration. `a` is a
// square [C x C] tensor.
template <typename T>
Tensor<T> inv_sqrt_newton_graph(const Tensor<T>& a, int iterations,
                                NewtonScale scale = NewtonScale::kTrace) {
  const int64_t c = a.dim(0);
  Tensor<T> s = trace(a);
  if (s.values()[0] <= T(0))
    throw std::invalid_argument("inv_sqrt_newton: trace must be positive, got " +
                                std::to_string((double)s.values()[0]));
  if (scale == NewtonScale::kMeanEig)
    s = scalar_mul(s, T(1) / static_cast<T>(c));
  Tensor<T> y = newton_polynomial_graph(div(a, s), iterations);
  return div(y, sqrt(s));
}

namespace detail {
// ||Y * A_N * Y - I||_F, used by the convergence property tests
double newton_residual(const std::vector<double>& y,
                       const std::vector<double>& a_n, int64_t c);
}  // namespace detail

}  // namespace changedet
