// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <iomanip>
#include <ostream>

#include "changedet/stats.hpp"

namespace changedet {

std::vector<StyleReportRow> style_report(const Tensor<double>& xa,
                                         const Tensor<double>& xb,
                                         int64_t lambda_prime) {
  if (xa.shape() != xb.shape())
    throw std::invalid_argument("style_report: image sizes differ, " +
                                shape_str(xa.shape()) + " vs " +
                                shape_str(xb.shape()));
  const double eps = 1e-8;
  RegionGrid grid = make_grid(xa.dim(1), xa.dim(2), lambda_prime);
  auto sa = region_channel_stats(xa, grid, eps);
  auto sb = region_channel_stats(xb, grid, eps);

  std::vector<StyleReportRow> rows;
  rows.reserve(sa.regions * sa.channels);
  for (int64_t r = 0; r < sa.regions; ++r) {
    for (int64_t c = 0; c < sa.channels; ++c) {
      StyleReportRow row;
      row.region = r;
      row.channel = c;
      row.mu_a = sa.mu_at(r, c);
      row.std_a = std::sqrt(std::max(sa.var_at(r, c) - eps, 0.0));
      row.mu_b = sb.mu_at(r, c);
      row.std_b = std::sqrt(std::max(sb.var_at(r, c) - eps, 0.0));
      rows.push_back(row);
    }
  }
  return rows;
}

void write_style_report_csv(const std::vector<StyleReportRow>& rows,
                            std::ostream& os) {
  os << "region,channel,mu_a,std_a,mu_b,std_b\n";
  os << std::setprecision(9);
  for (const auto& r : rows)
    os << r.region << ',' << r.channel << ',' << r.mu_a << ',' << r.std_a << ','
       << r.mu_b << ',' << r.std_b << '\n';
}

}  // namespace changedet
