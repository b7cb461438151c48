// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>

#include "changedet/rng.hpp"
#include "changedet/stats.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// Image-space statistics use a much smaller regularizer than the feature-space
// layers: pixel variances live in [0,1] ranges where 1e-5 would visibly bias
// the transplanted std.
inline constexpr double kCtstEps = 1e-8;

enum class StyleMode { kUstAToB, kUstBToA, kBst, kIbst };

inline const char* style_mode_name(StyleMode m) {
  switch (m) {
    case StyleMode::kUstAToB: return "ust_ab";
    case StyleMode::kUstBToA: return "ust_ba";
    case StyleMode::kBst: return "bst";
    case StyleMode::kIbst: return "ibst";
  }
  return "?";
}

inline StyleMode style_mode_from_name(const std::string& name) {
  if (name == "ust_ab") return StyleMode::kUstAToB;
  if (name == "ust_ba") return StyleMode::kUstBToA;
  if (name == "bst") return StyleMode::kBst;
  if (name == "ibst") return StyleMode::kIbst;
  throw std::invalid_argument("unknown style mode: " + name);
}

template <typename T>
struct StylizedPair {
  Tensor<T> xa, xb;
  StyleMode mode = StyleMode::kBst;
  int64_t donor_id = -1;  // index of the donor pair, IBST only
};

// x_bar = (x - mu_rst) / sqrt(var_rst) per region per channel; returns the
// normalized image together with the extracted stats (var carries eps).
template <typename T>
std::pair<Tensor<T>, ChannelStats<T>> normalize_local_image(
    const Tensor<T>& x, const RegionGrid& grid, double eps = kCtstEps) {
  const Shape& s = x.shape();
  if (s.size() != 3)
    throw std::invalid_argument("normalize_local_image: expected CHW image, got " +
                                shape_str(s));
  auto stats = region_channel_stats(x, grid, eps);
  const int64_t c_n = s[0], h = s[1], w = s[2];
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  for (int64_t r = 0; r < grid.regions(); ++r) {
    const Box& b = grid.boxes[r];
    for (int64_t c = 0; c < c_n; ++c) {
      const T mu = stats.mu_at(r, c);
      const T istd = static_cast<T>(1.0 / std::sqrt((double)stats.var_at(r, c)));
      const T* src = &xv[c * h * w];
      T* dst = &out[c * h * w];
      for (int64_t i = 0; i < b.rows; ++i)
        for (int64_t j = 0; j < b.cols; ++j) {
          int64_t at = (b.row0 + i) * w + b.col0 + j;
          dst[at] = (src[at] - mu) * istd;
        }
    }
  }
  return {Tensor<T>::from_data(s, std::move(out)), std::move(stats)};
}

// out = x_bar * sqrt(var_donor) + mu_donor per region per channel, i.e. the
// donor's channel-wise statistics are transplanted onto the normalized image.
// No clamping here; [0,1] clipping happens only at image export.
template <typename T>
Tensor<T> restyle(const Tensor<T>& xbar, const ChannelStats<T>& donor,
                  const RegionGrid& grid) {
  const Shape& s = xbar.shape();
  if (s.size() != 3)
    throw std::invalid_argument("restyle: expected CHW image, got " + shape_str(s));
  if (donor.regions != grid.regions() || donor.channels != s[0])
    throw std::invalid_argument(
        "restyle: donor stats cover " + std::to_string(donor.regions) + "x" +
        std::to_string(donor.channels) + " (region x channel), grid needs " +
        std::to_string(grid.regions()) + "x" + std::to_string(s[0]));
  const int64_t c_n = s[0], h = s[1], w = s[2];
  std::vector<T> out(xbar.values().size());
  const auto& xv = xbar.values();
  for (int64_t r = 0; r < grid.regions(); ++r) {
    const Box& b = grid.boxes[r];
    for (int64_t c = 0; c < c_n; ++c) {
      const T mu = donor.mu_at(r, c);
      const T sd = static_cast<T>(std::sqrt((double)donor.var_at(r, c)));
      const T* src = &xv[c * h * w];
      T* dst = &out[c * h * w];
      for (int64_t i = 0; i < b.rows; ++i)
        for (int64_t j = 0; j < b.cols; ++j) {
          int64_t at = (b.row0 + i) * w + b.col0 + j;
          dst[at] = src[at] * sd + mu;
        }
    }
  }
  return Tensor<T>::from_data(s, std::move(out));
}

// Unilateral: restyle one side with the other side's co-located region stats,
// pass the other side through unchanged.
template <typename T>
StylizedPair<T> ust(const Tensor<T>& xa, const Tensor<T>& xb, bool a_to_b,
                    const RegionGrid& grid, double eps = kCtstEps) {
  if (xa.shape() != xb.shape())
    throw std::invalid_argument("ust: image sizes differ");
  StylizedPair<T> out;
  out.mode = a_to_b ? StyleMode::kUstAToB : StyleMode::kUstBToA;
  if (a_to_b) {
    auto [bar_a, _] = normalize_local_image(xa, grid, eps);
    auto stats_b = region_channel_stats(xb, grid, eps);
    out.xa = restyle(bar_a, stats_b, grid);
    out.xb = xb.detach();
  } else {
    auto [bar_b, _] = normalize_local_image(xb, grid, eps);
    auto stats_a = region_channel_stats(xa, grid, eps);
    out.xa = xa.detach();
    out.xb = restyle(bar_b, stats_a, grid);
  }
  return out;
}

// Bilateral: both sides swapped simultaneously, stats extracted before either
// write.
template <typename T>
StylizedPair<T> bst(const Tensor<T>& xa, const Tensor<T>& xb,
                    const RegionGrid& grid, double eps = kCtstEps) {
  if (xa.shape() != xb.shape())
    throw std::invalid_argument("bst: image sizes differ");
  auto [bar_a, stats_a] = normalize_local_image(xa, grid, eps);
  auto [bar_b, stats_b] = normalize_local_image(xb, grid, eps);
  StylizedPair<T> out;
  out.mode = StyleMode::kBst;
  out.xa = restyle(bar_a, stats_b, grid);
  out.xb = restyle(bar_b, stats_a, grid);
  return out;
}

// Intra-batch: A takes C's region stats, B takes D's.
template <typename T>
StylizedPair<T> ibst(const Tensor<T>& xa, const Tensor<T>& xb,
                     const Tensor<T>& xc, const Tensor<T>& xd,
                     const RegionGrid& grid, double eps = kCtstEps,
                     int64_t donor_id = -1) {
  if (xa.shape() != xb.shape() || xa.shape() != xc.shape() ||
      xa.shape() != xd.shape())
    throw std::invalid_argument("ibst: all four images must share one size");
  auto [bar_a, sa] = normalize_local_image(xa, grid, eps);
  auto [bar_b, sb] = normalize_local_image(xb, grid, eps);
  auto stats_c = region_channel_stats(xc, grid, eps);
  auto stats_d = region_channel_stats(xd, grid, eps);
  StylizedPair<T> out;
  out.mode = StyleMode::kIbst;
  out.donor_id = donor_id;
  out.xa = restyle(bar_a, stats_c, grid);
  out.xb = restyle(bar_b, stats_d, grid);
  return out;
}

// The paper's three modes drawn uniformly; within UST the two directions are
// drawn with probability 1/2 each.
inline StyleMode sample_mode(Rng& rng) {
  switch (rng.below(3)) {
    case 0:
      return rng.below(2) == 0 ? StyleMode::kUstAToB : StyleMode::kUstBToA;
    case 1:
      return StyleMode::kBst;
    default:
      return StyleMode::kIbst;
  }
}

// Applies the sampled mode. The donor pair feeds IBST only.
template <typename T>
StylizedPair<T> apply_mode(StyleMode mode, const Tensor<T>& xa,
                           const Tensor<T>& xb, const Tensor<T>& donor_a,
                           const Tensor<T>& donor_b, int64_t donor_id,
                           const RegionGrid& grid, double eps = kCtstEps) {
  switch (mode) {
    case StyleMode::kUstAToB:
      return ust(xa, xb, true, grid, eps);
    case StyleMode::kUstBToA:
      return ust(xa, xb, false, grid, eps);
    case StyleMode::kBst:
      return bst(xa, xb, grid, eps);
    case StyleMode::kIbst:
      return ibst(xa, xb, donor_a, donor_b, grid, eps, donor_id);
  }
  throw std::logic_error("apply_mode: unreachable");
}

}  // namespace changedet
