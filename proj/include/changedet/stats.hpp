// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include "changedet/linalg.hpp"
#include "changedet/ops.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// lambda x lambda tiling of an H x W plane. Rows split into lambda contiguous
// bands of floor(H/lambda), the last band absorbing the remainder; same for
// columns. Boxes are stored in row-major region order.
struct RegionGrid {
  int64_t lambda = 1;
  int64_t height = 0, width = 0;
  std::vector<Box> boxes;

  int64_t regions() const { return static_cast<int64_t>(boxes.size()); }
};

inline RegionGrid make_grid(int64_t h, int64_t w, int64_t lambda) {
  if (lambda < 1 || lambda > h || lambda > w)
    throw std::invalid_argument("make_grid: lambda " + std::to_string(lambda) +
                                " out of range for " + std::to_string(h) + "x" +
                                std::to_string(w));
  RegionGrid g;
  g.lambda = lambda;
  g.height = h;
  g.width = w;
  const int64_t bh = h / lambda, bw = w / lambda;
  for (int64_t i = 0; i < lambda; ++i) {
    int64_t r0 = i * bh;
    int64_t rows = (i == lambda - 1) ? h - r0 : bh;
    for (int64_t j = 0; j < lambda; ++j) {
      int64_t c0 = j * bw;
      int64_t cols = (j == lambda - 1) ? w - c0 : bw;
      g.boxes.push_back(Box{r0, c0, rows, cols});
    }
  }
  return g;
}

// Per-region per-channel mean and population variance; `var` already includes
// the eps regularizer.
template <typename T>
struct ChannelStats {
  int64_t regions = 0, channels = 0;
  double eps = 0.0;
  std::vector<T> mu;   // [region * channels + channel]
  std::vector<T> var;

  T mu_at(int64_t r, int64_t c) const { return mu[r * channels + c]; }
  T var_at(int64_t r, int64_t c) const { return var[r * channels + c]; }
};

// Stats over one sample's grid regions (f is C x H x W).
template <typename T>
ChannelStats<T> region_channel_stats(const Tensor<T>& f, const RegionGrid& grid,
                                     double eps) {
  const Shape& s = f.shape();
  if (s.size() != 3)
    throw std::invalid_argument("region_channel_stats: expected CHW, got " +
                                shape_str(s));
  if (grid.height != s[1] || grid.width != s[2])
    throw std::invalid_argument("region_channel_stats: grid " +
                                std::to_string(grid.height) + "x" +
                                std::to_string(grid.width) +
                                " does not match feature " + shape_str(s));
  const int64_t c_n = s[0], h = s[1], w = s[2];
  ChannelStats<T> out;
  out.regions = grid.regions();
  out.channels = c_n;
  out.eps = eps;
  out.mu.resize(out.regions * c_n);
  out.var.resize(out.regions * c_n);
  const auto& v = f.values();
  for (int64_t r = 0; r < out.regions; ++r) {
    const Box& b = grid.boxes[r];
    const T inv = T(1) / static_cast<T>(b.pixels());
    for (int64_t c = 0; c < c_n; ++c) {
      const T* plane = &v[c * h * w];
      T acc = 0;
      for (int64_t i = 0; i < b.rows; ++i)
        for (int64_t j = 0; j < b.cols; ++j)
          acc += plane[(b.row0 + i) * w + b.col0 + j];
      T mu = acc * inv;
      T acc2 = 0;
      for (int64_t i = 0; i < b.rows; ++i)
        for (int64_t j = 0; j < b.cols; ++j) {
          T d = plane[(b.row0 + i) * w + b.col0 + j] - mu;
          acc2 += d * d;
        }
      out.mu[r * c_n + c] = mu;
      out.var[r * c_n + c] = acc2 * inv + static_cast<T>(eps);
    }
  }
  return out;
}

// Per-channel stats pooled over the whole batch plane (f is N x C x H x W);
// one region covering everything.
template <typename T>
ChannelStats<T> batch_channel_stats(const Tensor<T>& f, double eps) {
  const Shape& s = f.shape();
  if (s.size() != 4)
    throw std::invalid_argument("batch_channel_stats: expected NCHW, got " +
                                shape_str(s));
  const int64_t n = s[0], c_n = s[1], plane = s[2] * s[3];
  ChannelStats<T> out;
  out.regions = 1;
  out.channels = c_n;
  out.eps = eps;
  out.mu.resize(c_n);
  out.var.resize(c_n);
  const auto& v = f.values();
  const T inv = T(1) / static_cast<T>(n * plane);
  for (int64_t c = 0; c < c_n; ++c) {
    T acc = 0;
    for (int64_t b = 0; b < n; ++b) {
      const T* p = &v[(b * c_n + c) * plane];
      for (int64_t i = 0; i < plane; ++i) acc += p[i];
    }
    T mu = acc * inv;
    T acc2 = 0;
    for (int64_t b = 0; b < n; ++b) {
      const T* p = &v[(b * c_n + c) * plane];
      for (int64_t i = 0; i < plane; ++i) {
        T d = p[i] - mu;
        acc2 += d * d;
      }
    }
    out.mu[c] = mu;
    out.var[c] = acc2 * inv + static_cast<T>(eps);
  }
  return out;
}

// Per-channel mean plus full C x C covariance with eps * I added.
struct ChannelCov {
  std::vector<double> mu;
  SymMatrix cov;
  double eps = 0.0;
};

// One ChannelCov per grid region of a single sample (f is C x H x W).
template <typename T>
std::vector<ChannelCov> region_channel_cov(const Tensor<T>& f,
                                           const RegionGrid& grid, double eps) {
  const Shape& s = f.shape();
  if (s.size() != 3)
    throw std::invalid_argument("region_channel_cov: expected CHW, got " +
                                shape_str(s));
  if (grid.height != s[1] || grid.width != s[2])
    throw std::invalid_argument("region_channel_cov: grid does not match feature");
  const int64_t c_n = s[0], h = s[1], w = s[2];
  const auto& v = f.values();
  std::vector<ChannelCov> out;
  out.reserve(grid.regions());
  std::vector<double> x;  // C x M centered
  for (const Box& b : grid.boxes) {
    const int64_t m = b.pixels();
    const double inv = 1.0 / static_cast<double>(m);
    ChannelCov cc;
    cc.eps = eps;
    cc.mu.resize(c_n);
    x.assign(c_n * m, 0.0);
    for (int64_t c = 0; c < c_n; ++c) {
      const T* plane = &v[c * h * w];
      double acc = 0;
      int64_t o = c * m;
      for (int64_t i = 0; i < b.rows; ++i)
        for (int64_t j = 0; j < b.cols; ++j) {
          double val = static_cast<double>(plane[(b.row0 + i) * w + b.col0 + j]);
          x[o++] = val;
          acc += val;
        }
      cc.mu[c] = acc * inv;
      for (int64_t q = 0; q < m; ++q) x[c * m + q] -= cc.mu[c];
    }
    std::vector<double> cov(c_n * c_n);
    gemm(false, true, (int)c_n, (int)c_n, (int)m, inv, x.data(), (int)m,
         x.data(), (int)m, 0.0, cov.data(), (int)c_n);
    for (int64_t i = 0; i < c_n; ++i) cov[i * c_n + i] += eps;
    for (int64_t i = 0; i < c_n; ++i)
      for (int64_t j = i + 1; j < c_n; ++j) {
        double mid = 0.5 * (cov[i * c_n + j] + cov[j * c_n + i]);
        cov[i * c_n + j] = cov[j * c_n + i] = mid;
      }
    cc.cov = SymMatrix(c_n, std::move(cov));
    out.push_back(std::move(cc));
  }
  return out;
}

// Covariance over all N*H*W column vectors of the batch (f is N x C x H x W).
template <typename T>
ChannelCov batch_cov(const Tensor<T>& f, double eps) {
  const Shape& s = f.shape();
  if (s.size() != 4)
    throw std::invalid_argument("batch_cov: expected NCHW, got " + shape_str(s));
  const int64_t n = s[0], c_n = s[1], plane = s[2] * s[3];
  const int64_t m = n * plane;
  if (m < 2) throw std::invalid_argument("batch_cov: needs at least 2 columns");
  const auto& v = f.values();
  const double inv = 1.0 / static_cast<double>(m);

  ChannelCov cc;
  cc.eps = eps;
  cc.mu.resize(c_n);
  std::vector<double> x(c_n * m);
  for (int64_t c = 0; c < c_n; ++c) {
    double acc = 0;
    int64_t o = c * m;
    for (int64_t b = 0; b < n; ++b) {
      const T* p = &v[(b * c_n + c) * plane];
      for (int64_t i = 0; i < plane; ++i) {
        double val = static_cast<double>(p[i]);
        x[o++] = val;
        acc += val;
      }
    }
    cc.mu[c] = acc * inv;
    for (int64_t q = 0; q < m; ++q) x[c * m + q] -= cc.mu[c];
  }
  std::vector<double> cov(c_n * c_n);
  gemm(false, true, (int)c_n, (int)c_n, (int)m, inv, x.data(), (int)m, x.data(),
       (int)m, 0.0, cov.data(), (int)c_n);
  for (int64_t i = 0; i < c_n; ++i) cov[i * c_n + i] += eps;
  for (int64_t i = 0; i < c_n; ++i)
    for (int64_t j = i + 1; j < c_n; ++j) {
      double mid = 0.5 * (cov[i * c_n + j] + cov[j * c_n + i]);
      cov[i * c_n + j] = cov[j * c_n + i] = mid;
    }
  cc.cov = SymMatrix(c_n, std::move(cov));
  return cc;
}

// One row per (region, channel) of the bitemporal style report (Fig.-1-style
// proxy table). Reported std excludes the eps regularizer.
struct StyleReportRow {
  int64_t region = 0, channel = 0;
  double mu_a = 0, std_a = 0, mu_b = 0, std_b = 0;
};

std::vector<StyleReportRow> style_report(const Tensor<double>& xa,
                                         const Tensor<double>& xb,
                                         int64_t lambda_prime);

// CSV: header `region,channel,mu_a,std_a,mu_b,std_b`, 9 significant digits
void write_style_report_csv(const std::vector<StyleReportRow>& rows,
                            std::ostream& os);

}  // namespace changedet
