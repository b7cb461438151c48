// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#include "changedet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "changedet/gemm.hpp"

namespace changedet {

namespace {

double frobenius(const std::vector<double>& m) {
  double acc = 0.0;
  for (double v : m) acc += v * v;
  return std::sqrt(acc);
}

}  // namespace

SymMatrix::SymMatrix(int64_t c, std::vector<double> e) : dim(c), entries(std::move(e)) {
  if (static_cast<int64_t>(entries.size()) != c * c)
    throw std::invalid_argument("SymMatrix: entry count != dim^2");
  double asym = 0.0;
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = i + 1; j < c; ++j) {
      double d = at(i, j) - at(j, i);
      asym += 2.0 * d * d;
    }
  double norm = frobenius(entries);
  if (std::sqrt(asym) > 1e-9 * std::max(norm, 1e-300))
    throw std::invalid_argument("SymMatrix: input is not symmetric");
}

SymMatrix SymMatrix::identity(int64_t c) {
  std::vector<double> e(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) e[i * c + i] = 1.0;
  return SymMatrix(c, std::move(e));
}

SymMatrix SymMatrix::diag(const std::vector<double>& d) {
  int64_t c = static_cast<int64_t>(d.size());
  std::vector<double> e(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) e[i * c + i] = d[i];
  return SymMatrix(c, std::move(e));
}

EigDecomposition sym_eig(const SymMatrix& input) {
  const int64_t c = input.dim;
  std::vector<double> a = input.entries;  // worked on in place
  std::vector<double> v(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) v[i * c + i] = 1.0;

  const double norm = std::max(frobenius(a), 1e-300);
  auto off_norm = [&]() {
    double acc = 0.0;
    for (int64_t p = 0; p < c; ++p)
      for (int64_t q = p + 1; q < c; ++q) acc += a[p * c + q] * a[p * c + q];
    return std::sqrt(2.0 * acc);
  };

  for (int sweep = 0; sweep < 100 && off_norm() >= 1e-12 * norm; ++sweep) {
    for (int64_t p = 0; p < c; ++p) {
      for (int64_t q = p + 1; q < c; ++q) {
        double apq = a[p * c + q];
        if (apq == 0.0) continue;
        double app = a[p * c + p], aqq = a[q * c + q];
        double theta = (aqq - app) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        double cs = 1.0 / std::sqrt(t * t + 1.0);
        double sn = t * cs;
        for (int64_t i = 0; i < c; ++i) {
          double aip = a[i * c + p], aiq = a[i * c + q];
          a[i * c + p] = cs * aip - sn * aiq;
          a[i * c + q] = sn * aip + cs * aiq;
        }
        for (int64_t i = 0; i < c; ++i) {
          double api = a[p * c + i], aqi = a[q * c + i];
          a[p * c + i] = cs * api - sn * aqi;
          a[q * c + i] = sn * api + cs * aqi;
        }
        for (int64_t i = 0; i < c; ++i) {
          double vip = v[i * c + p], viq = v[i * c + q];
          v[i * c + p] = cs * vip - sn * viq;
          v[i * c + q] = sn * vip + cs * viq;
        }
      }
    }
  }

  std::vector<int64_t> order(c);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int64_t i, int64_t j) { return a[i * c + i] > a[j * c + j]; });

  EigDecomposition out;
  out.dim = c;
  out.eigvals.resize(c);
  out.q.resize(c * c);
  for (int64_t j = 0; j < c; ++j) {
    out.eigvals[j] = a[order[j] * c + order[j]];
    for (int64_t i = 0; i < c; ++i) out.q[i * c + j] = v[i * c + order[j]];
  }
  return out;
}

SymMatrix inv_sqrt_eig(const SymMatrix& a) {
  EigDecomposition eig = sym_eig(a);
  const int64_t c = a.dim;
  for (double lambda : eig.eigvals)
    if (lambda <= 0.0)
      throw std::invalid_argument("inv_sqrt_eig: non-positive eigenvalue " +
                                  std::to_string(lambda));
  // B = Q * diag(1/sqrt(lambda)) * Q^T
  std::vector<double> scaled(c * c);
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = 0; j < c; ++j)
      scaled[i * c + j] = eig.q[i * c + j] / std::sqrt(eig.eigvals[j]);
  std::vector<double> b(c * c);
  gemm(false, true, (int)c, (int)c, (int)c, 1.0, scaled.data(), (int)c,
       eig.q.data(), (int)c, 0.0, b.data(), (int)c);
  // fold roundoff asymmetry back before constructing
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = i + 1; j < c; ++j) {
      double m = 0.5 * (b[i * c + j] + b[j * c + i]);
      b[i * c + j] = b[j * c + i] = m;
    }
  return SymMatrix(c, std::move(b));
}

SymMatrix inv_sqrt_newton(const SymMatrix& a, int iterations, NewtonScale scale) {
  const int64_t c = a.dim;
  double tr = 0.0;
  for (int64_t i = 0; i < c; ++i) tr += a.at(i, i);
  if (tr <= 0.0)
    throw std::invalid_argument("inv_sqrt_newton: trace must be positive, got " +
                                std::to_string(tr));
  const double s = scale == NewtonScale::kMeanEig ? tr / static_cast<double>(c) : tr;

  std::vector<double> a_n(a.entries);
  for (auto& v : a_n) v /= s;
  std::vector<double> y(c * c, 0.0);
  for (int64_t i = 0; i < c; ++i) y[i * c + i] = 1.0;

  std::vector<double> y2(c * c), y2a(c * c), next(c * c);
  for (int t = 0; t < iterations; ++t) {
    gemm(false, false, (int)c, (int)c, (int)c, 1.0, y.data(), (int)c, y.data(),
         (int)c, 0.0, y2.data(), (int)c);
    gemm(false, false, (int)c, (int)c, (int)c, 1.0, y2.data(), (int)c,
         a_n.data(), (int)c, 0.0, y2a.data(), (int)c);
    for (int64_t i = 0; i < c * c; ++i) y2a[i] = -y2a[i];
    for (int64_t i = 0; i < c; ++i) y2a[i * c + i] += 3.0;
    gemm(false, false, (int)c, (int)c, (int)c, 0.5, y.data(), (int)c,
         y2a.data(), (int)c, 0.0, next.data(), (int)c);
    y.swap(next);
  }

  const double inv_sqrt_s = 1.0 / std::sqrt(s);
  for (auto& v : y) v *= inv_sqrt_s;
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = i + 1; j < c; ++j) {
      double m = 0.5 * (y[i * c + j] + y[j * c + i]);
      y[i * c + j] = y[j * c + i] = m;
    }
  return SymMatrix(c, std::move(y));
}

namespace detail {

double newton_residual(const std::vector<double>& y,
                       const std::vector<double>& a_n, int64_t c) {
  std::vector<double> ya(c * c), yay(c * c);
  gemm(false, false, (int)c, (int)c, (int)c, 1.0, y.data(), (int)c, a_n.data(),
       (int)c, 0.0, ya.data(), (int)c);
  gemm(false, false, (int)c, (int)c, (int)c, 1.0, ya.data(), (int)c, y.data(),
       (int)c, 0.0, yay.data(), (int)c);
  for (int64_t i = 0; i < c; ++i) yay[i * c + i] -= 1.0;
  return frobenius(yay);
}

}  // namespace detail

}  // namespace changedet
