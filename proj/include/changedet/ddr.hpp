// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

#include "changedet/linalg.hpp"
#include "changedet/ops.hpp"
#include "changedet/stats.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

enum class DdrVariant { kNone, kGln, kGlw };

struct NormConfig {
  int64_t lambda = 6;       // region divisions per spatial side
  double eps = 1e-5;
  DdrVariant variant = DdrVariant::kNone;
  int newton_iterations = 5;
};

// Small feature maps cannot honor a large lambda: regions must keep at least
// two pixels per side (whitening needs >= 2 pixels per region, and 1-pixel
// instance stats would zero the features outright).
inline int64_t effective_lambda(int64_t lambda, int64_t h, int64_t w) {
  int64_t cap = std::min(h, w) / 2;
  return std::max<int64_t>(1, std::min(lambda, cap));
}

// Evaluation-time statistics for the batch-coupled layers. Diagonal mode
// stores per-channel variance (eps included), full mode a C x C covariance
// (eps * I included). Fresh instances normalize against mean 0 / identity.
template <typename T>
struct RunningMoments {
  enum class Mode { kDiagonal, kFull };
  Mode mode = Mode::kDiagonal;
  int64_t channels = 0;
  double momentum = 0.9;
  int64_t count = 0;
  std::vector<T> mean;    // [C]
  std::vector<T> second;  // [C] variance or [C x C] covariance

  static RunningMoments diagonal(int64_t c, double momentum = 0.9) {
    RunningMoments r;
    r.mode = Mode::kDiagonal;
    r.channels = c;
    r.momentum = momentum;
    r.mean.assign(c, T(0));
    r.second.assign(c, T(1));
    return r;
  }
  static RunningMoments full(int64_t c, double momentum = 0.9) {
    RunningMoments r;
    r.mode = Mode::kFull;
    r.channels = c;
    r.momentum = momentum;
    r.mean.assign(c, T(0));
    r.second.assign(c * c, T(0));
    for (int64_t i = 0; i < c; ++i) r.second[i * c + i] = T(1);
    return r;
  }

  void update(const std::vector<T>& batch_mean, const std::vector<T>& batch_second) {
    const T m = static_cast<T>(momentum);
    for (size_t i = 0; i < mean.size(); ++i)
      mean[i] = m * mean[i] + (T(1) - m) * batch_mean[i];
    for (size_t i = 0; i < second.size(); ++i)
      second[i] = m * second[i] + (T(1) - m) * batch_second[i];
    ++count;
  }
};

namespace detail {

// shared backward of (x - mu) / sqrt(var + eps) over a statistics group:
// dx = invstd * (g - mean(g) - y * mean(g * y))
template <typename T>
void norm_group_backward(const T* y, const T* g, T invstd, int64_t m, T* dx) {
  double gbar = 0, gy = 0;
  for (int64_t i = 0; i < m; ++i) {
    gbar += g[i];
    gy += g[i] * y[i];
  }
  gbar /= m;
  gy /= m;
  for (int64_t i = 0; i < m; ++i)
    dx[i] += invstd * (g[i] - static_cast<T>(gbar) - y[i] * static_cast<T>(gy));
}

}  // namespace detail

// Local instance normalization: per sample, per grid region, per channel
// subtract the region mean and divide by sqrt(region variance + eps). No
// learned affine follows.
template <typename T>
Tensor<T> lin_forward(const Tensor<T>& f, const NormConfig& cfg) {
  const Shape& s = f.shape();
  if (s.size() != 4)
    throw std::invalid_argument("lin_forward: expected NCHW, got " + shape_str(s));
  const int64_t n_n = s[0], c_n = s[1], h = s[2], w = s[3];
  RegionGrid grid = make_grid(h, w, effective_lambda(cfg.lambda, h, w));
  const int64_t regions = grid.regions();

  std::vector<T> out(f.values().size());
  auto invstd = std::make_shared<std::vector<T>>(n_n * regions * c_n);
  const auto& xv = f.values();
  for (int64_t n = 0; n < n_n; ++n) {
    for (int64_t r = 0; r < regions; ++r) {
      const Box& b = grid.boxes[r];
      const double inv_m = 1.0 / static_cast<double>(b.pixels());
      for (int64_t c = 0; c < c_n; ++c) {
        const T* src = &xv[(n * c_n + c) * h * w];
        double acc = 0;
        for (int64_t i = 0; i < b.rows; ++i)
          for (int64_t j = 0; j < b.cols; ++j)
            acc += src[(b.row0 + i) * w + b.col0 + j];
        const double mu = acc * inv_m;
        double acc2 = 0;
        for (int64_t i = 0; i < b.rows; ++i)
          for (int64_t j = 0; j < b.cols; ++j) {
            double d = src[(b.row0 + i) * w + b.col0 + j] - mu;
            acc2 += d * d;
          }
        const T istd = static_cast<T>(1.0 / std::sqrt(acc2 * inv_m + cfg.eps));
        (*invstd)[(n * regions + r) * c_n + c] = istd;
        T* dst = &out[(n * c_n + c) * h * w];
        for (int64_t i = 0; i < b.rows; ++i)
          for (int64_t j = 0; j < b.cols; ++j) {
            int64_t at = (b.row0 + i) * w + b.col0 + j;
            dst[at] = static_cast<T>((src[at] - mu)) * istd;
          }
      }
    }
  }

  auto bw = [grid, n_n, c_n, h, w, regions, invstd](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    std::vector<T> ybuf, gbuf, dbuf;
    for (int64_t n = 0; n < n_n; ++n) {
      for (int64_t r = 0; r < regions; ++r) {
        const Box& b = grid.boxes[r];
        const int64_t m = b.pixels();
        ybuf.resize(m);
        gbuf.resize(m);
        for (int64_t c = 0; c < c_n; ++c) {
          const int64_t plane = (n * c_n + c) * h * w;
          int64_t q = 0;
          for (int64_t i = 0; i < b.rows; ++i)
            for (int64_t j = 0; j < b.cols; ++j) {
              int64_t at = plane + (b.row0 + i) * w + b.col0 + j;
              ybuf[q] = nd.data[at];
              gbuf[q] = nd.grad[at];
              ++q;
            }
          dbuf.assign(m, T(0));
          detail::norm_group_backward(ybuf.data(), gbuf.data(),
                                      (*invstd)[(n * regions + r) * c_n + c], m,
                                      dbuf.data());
          q = 0;
          for (int64_t i = 0; i < b.rows; ++i)
            for (int64_t j = 0; j < b.cols; ++j) {
              int64_t at = plane + (b.row0 + i) * w + b.col0 + j;
              p->grad[at] += dbuf[q++];
            }
        }
      }
    }
  };
  return make_op<T>(s, std::move(out), {f}, std::move(bw));
}

// Batch normalization without learned affine. Training mode normalizes by the
// current batch moments and folds them into the running estimate; eval mode
// normalizes by the running estimate.
template <typename T>
Tensor<T> bn_forward(const Tensor<T>& f, RunningMoments<T>& running,
                     bool training, double eps) {
  const Shape& s = f.shape();
  if (s.size() != 4)
    throw std::invalid_argument("bn_forward: expected NCHW, got " + shape_str(s));
  const int64_t n_n = s[0], c_n = s[1], plane = s[2] * s[3];
  if (running.mode != RunningMoments<T>::Mode::kDiagonal ||
      running.channels != c_n)
    throw std::invalid_argument("bn_forward: running moments do not match input");

  const auto& xv = f.values();
  std::vector<T> out(xv.size());

  if (!training) {
    std::vector<T> istd(c_n);
    for (int64_t c = 0; c < c_n; ++c)
      istd[c] = static_cast<T>(1.0 / std::sqrt((double)running.second[c]));
    std::vector<T> mu = running.mean;
    for (int64_t n = 0; n < n_n; ++n)
      for (int64_t c = 0; c < c_n; ++c) {
        const T* src = &xv[(n * c_n + c) * plane];
        T* dst = &out[(n * c_n + c) * plane];
        for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu[c]) * istd[c];
      }
    auto bw = [n_n, c_n, plane, istd](TensorNode<T>& nd) {
      auto& p = nd.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (int64_t n = 0; n < n_n; ++n)
        for (int64_t c = 0; c < c_n; ++c) {
          int64_t off = (n * c_n + c) * plane;
          for (int64_t i = 0; i < plane; ++i)
            p->grad[off + i] += nd.grad[off + i] * istd[c];
        }
    };
    return make_op<T>(s, std::move(out), {f}, std::move(bw));
  }

  if (n_n < 2)
    throw std::invalid_argument(
        "bn_forward: training requires a batch of at least 2 (got N=1, "
        "degenerate batch variance)");

  const double inv_m = 1.0 / static_cast<double>(n_n * plane);
  std::vector<T> mu(c_n), var(c_n);
  auto invstd = std::make_shared<std::vector<T>>(c_n);
  for (int64_t c = 0; c < c_n; ++c) {
    double acc = 0;
    for (int64_t n = 0; n < n_n; ++n) {
      const T* src = &xv[(n * c_n + c) * plane];
      for (int64_t i = 0; i < plane; ++i) acc += src[i];
    }
    const double m = acc * inv_m;
    double acc2 = 0;
    for (int64_t n = 0; n < n_n; ++n) {
      const T* src = &xv[(n * c_n + c) * plane];
      for (int64_t i = 0; i < plane; ++i) {
        double d = src[i] - m;
        acc2 += d * d;
      }
    }
    mu[c] = static_cast<T>(m);
    var[c] = static_cast<T>(acc2 * inv_m + eps);
    (*invstd)[c] = static_cast<T>(1.0 / std::sqrt((double)var[c]));
    for (int64_t n = 0; n < n_n; ++n) {
      const T* src = &xv[(n * c_n + c) * plane];
      T* dst = &out[(n * c_n + c) * plane];
      for (int64_t i = 0; i < plane; ++i) dst[i] = (src[i] - mu[c]) * (*invstd)[c];
    }
  }
  running.update(mu, var);

  auto bw = [n_n, c_n, plane, invstd](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const int64_t m = n_n * plane;
    std::vector<T> ybuf(m), gbuf(m), dbuf(m);
    for (int64_t c = 0; c < c_n; ++c) {
      for (int64_t n = 0; n < n_n; ++n) {
        int64_t off = (n * c_n + c) * plane;
        std::copy(&nd.data[off], &nd.data[off] + plane, &ybuf[n * plane]);
        std::copy(&nd.grad[off], &nd.grad[off] + plane, &gbuf[n * plane]);
      }
      dbuf.assign(m, T(0));
      detail::norm_group_backward(ybuf.data(), gbuf.data(), (*invstd)[c], m,
                                  dbuf.data());
      for (int64_t n = 0; n < n_n; ++n) {
        int64_t off = (n * c_n + c) * plane;
        for (int64_t i = 0; i < plane; ++i) p->grad[off + i] += dbuf[n * plane + i];
      }
    }
  };
  return make_op<T>(s, std::move(out), {f}, std::move(bw));
}

// global-to-local normalization: LIN(BN(f))
template <typename T>
Tensor<T> gln(const Tensor<T>& f, RunningMoments<T>& running,
              const NormConfig& cfg, bool training) {
  return lin_forward(bn_forward(f, running, training, cfg.eps), cfg);
}

// Whitening transform on a plain value matrix: Phi = B (X - mu 1^T). The
// differentiable layers build the same map from recorded ops; this form is
// the oracle/eval surface.
inline std::vector<double> whiten(const std::vector<double>& f, int64_t c,
                                  int64_t m, const std::vector<double>& mu,
                                  const SymMatrix& inv_sqrt) {
  std::vector<double> centered(c * m);
  for (int64_t i = 0; i < c; ++i)
    for (int64_t j = 0; j < m; ++j) centered[i * m + j] = f[i * m + j] - mu[i];
  std::vector<double> out(c * m);
  gemm(false, false, (int)c, (int)m, (int)c, 1.0, inv_sqrt.entries.data(),
       (int)c, centered.data(), (int)m, 0.0, out.data(), (int)m);
  return out;
}

namespace detail {

// Whitened region via the unrolled Newton iteration. When the region has
// fewer pixels than channels the M x M dual Gram is iterated instead of the
// C x C covariance: A Xc = Xc B with A = Xc Xc^T/M + eps I and
// B = Xc^T Xc/M + eps I, and Y_T is a polynomial in its argument, so
// p(A/s) Xc = Xc p(B/s) exactly. The primal trace s = tr(A) keeps the scaled
// spectrum in (0,1] either way.
template <typename T>
Tensor<T> whiten_region_graph(const Tensor<T>& xc, double eps, int iterations) {
  const int64_t c = xc.dim(0), m = xc.dim(1);
  auto mu = rowmean(xc);
  auto xcen = sub_colvec(xc, mu);
  if (m >= c) {
    auto cov = add_scaled_identity(
        scalar_mul(matmul(xcen, transpose(xcen)), T(1) / static_cast<T>(m)),
        static_cast<T>(eps));
    auto s = trace(cov);
    auto y = newton_polynomial_graph(div(cov, s), iterations);
    return matmul(div(y, sqrt(s)), xcen);
  }
  auto gram = add_scaled_identity(
      scalar_mul(matmul(transpose(xcen), xcen), T(1) / static_cast<T>(m)),
      static_cast<T>(eps));
  // tr(A) = tr(B) + (C - M) * eps
  auto s = scalar_add(trace(gram), static_cast<T>(eps) * static_cast<T>(c - m));
  auto y = newton_polynomial_graph(div(gram, s), iterations);
  return matmul(xcen, div(y, sqrt(s)));
}

}  // namespace detail

// Local instance whitening: per sample, per region, whiten the C x M region
// matrix with the Newton inverse square root (unrolled, differentiable).
template <typename T>
Tensor<T> liw_forward(const Tensor<T>& f, const NormConfig& cfg) {
  const Shape& s = f.shape();
  if (s.size() != 4)
    throw std::invalid_argument("liw_forward: expected NCHW, got " + shape_str(s));
  const int64_t n_n = s[0], c_n = s[1], h = s[2], w = s[3];
  RegionGrid grid = make_grid(h, w, effective_lambda(cfg.lambda, h, w));
  for (const Box& b : grid.boxes)
    if (b.pixels() < 2)
      throw std::invalid_argument("liw_forward: region with fewer than 2 pixels");

  std::vector<Tensor<T>> parts;
  std::vector<std::pair<int64_t, Box>> slots;
  parts.reserve(n_n * grid.regions());
  slots.reserve(n_n * grid.regions());
  for (int64_t n = 0; n < n_n; ++n) {
    for (const Box& b : grid.boxes) {
      auto xc = region_gather(f, n, b);
      parts.push_back(detail::whiten_region_graph(xc, cfg.eps, cfg.newton_iterations));
      slots.emplace_back(n, b);
    }
  }
  return assemble_regions(parts, slots, n_n, c_n, h, w);
}

namespace detail {

// f [N,C,H,W] -> [C, N*H*W] (differentiable permutation)
template <typename T>
Tensor<T> batch_to_matrix(const Tensor<T>& f) {
  const Shape& s = f.shape();
  const int64_t n_n = s[0], c_n = s[1], plane = s[2] * s[3];
  const int64_t m = n_n * plane;
  std::vector<T> out(c_n * m);
  const auto& xv = f.values();
  for (int64_t n = 0; n < n_n; ++n)
    for (int64_t c = 0; c < c_n; ++c)
      std::copy(&xv[(n * c_n + c) * plane], &xv[(n * c_n + c) * plane] + plane,
                &out[c * m + n * plane]);
  auto bw = [n_n, c_n, plane, m](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t n = 0; n < n_n; ++n)
      for (int64_t c = 0; c < c_n; ++c)
        for (int64_t i = 0; i < plane; ++i)
          p->grad[(n * c_n + c) * plane + i] += nd.grad[c * m + n * plane + i];
  };
  return make_op<T>({c_n, m}, std::move(out), {f}, std::move(bw));
}

template <typename T>
Tensor<T> matrix_to_batch(const Tensor<T>& mat, int64_t n_n, int64_t c_n,
                          int64_t h, int64_t w) {
  const int64_t plane = h * w, m = n_n * plane;
  std::vector<T> out(n_n * c_n * plane);
  const auto& xv = mat.values();
  for (int64_t n = 0; n < n_n; ++n)
    for (int64_t c = 0; c < c_n; ++c)
      std::copy(&xv[c * m + n * plane], &xv[c * m + n * plane] + plane,
                &out[(n * c_n + c) * plane]);
  auto bw = [n_n, c_n, plane, m](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t n = 0; n < n_n; ++n)
      for (int64_t c = 0; c < c_n; ++c)
        for (int64_t i = 0; i < plane; ++i)
          p->grad[c * m + n * plane + i] += nd.grad[(n * c_n + c) * plane + i];
  };
  return make_op<T>({n_n, c_n, h, w}, std::move(out), {mat}, std::move(bw));
}

}  // namespace detail

// Batch whitening: one covariance over the whole mini-batch, whitened with
// the Newton inverse square root. Training updates the running (mean, cov);
// evaluation whitens against the running estimate.
template <typename T>
Tensor<T> bw_forward(const Tensor<T>& f, RunningMoments<T>& running,
                     bool training, const NormConfig& cfg) {
  const Shape& s = f.shape();
  if (s.size() != 4)
    throw std::invalid_argument("bw_forward: expected NCHW, got " + shape_str(s));
  const int64_t n_n = s[0], c_n = s[1], h = s[2], w = s[3];
  if (running.mode != RunningMoments<T>::Mode::kFull || running.channels != c_n)
    throw std::invalid_argument("bw_forward: running moments do not match input");

  if (!training) {
    std::vector<double> cov_d(c_n * c_n);
    for (int64_t i = 0; i < c_n * c_n; ++i)
      cov_d[i] = static_cast<double>(running.second[i]);
    SymMatrix cov(c_n, std::move(cov_d));
    SymMatrix wmat = inv_sqrt_newton(cov, cfg.newton_iterations, NewtonScale::kTrace);
    auto mat = detail::batch_to_matrix(f);
    std::vector<T> mu_t(running.mean.begin(), running.mean.end());
    auto mu = Tensor<T>::from_data({c_n, 1}, std::move(mu_t));
    std::vector<T> w_t(wmat.entries.begin(), wmat.entries.end());
    auto wt = Tensor<T>::from_data({c_n, c_n}, std::move(w_t));
    auto white = matmul(wt, sub_colvec(mat, mu));
    return detail::matrix_to_batch(white, n_n, c_n, h, w);
  }

  auto mat = detail::batch_to_matrix(f);
  const int64_t m = mat.dim(1);
  auto mu = rowmean(mat);
  auto xcen = sub_colvec(mat, mu);
  auto cov = add_scaled_identity(
      scalar_mul(matmul(xcen, transpose(xcen)), T(1) / static_cast<T>(m)),
      static_cast<T>(cfg.eps));
  auto st = trace(cov);
  auto y = newton_polynomial_graph(div(cov, st), cfg.newton_iterations);
  auto white = matmul(div(y, sqrt(st)), xcen);

  std::vector<T> mu_v(mu.values());
  running.update(mu_v, cov.values());
  return detail::matrix_to_batch(white, n_n, c_n, h, w);
}

// global-to-local whitening: LIW(BW(f))
template <typename T>
Tensor<T> glw(const Tensor<T>& f, RunningMoments<T>& running,
              const NormConfig& cfg, bool training) {
  return liw_forward(bw_forward(f, running, training, cfg), cfg);
}

// Bundles a DDR insertion point: the variant plus its running statistics.
template <typename T>
struct DdrLayer {
  NormConfig cfg;
  RunningMoments<T> running;

  static DdrLayer make(int64_t channels, const NormConfig& cfg) {
    DdrLayer layer;
    layer.cfg = cfg;
    layer.running = cfg.variant == DdrVariant::kGlw
                        ? RunningMoments<T>::full(channels)
                        : RunningMoments<T>::diagonal(channels);
    return layer;
  }

  Tensor<T> forward(const Tensor<T>& f, bool training) {
    switch (cfg.variant) {
      case DdrVariant::kNone:
        return f;
      case DdrVariant::kGln:
        return gln(f, running, cfg, training);
      case DdrVariant::kGlw:
        return changedet::glw(f, running, cfg, training);
    }
    return f;
  }
};

}  // namespace changedet
