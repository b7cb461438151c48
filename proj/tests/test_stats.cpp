// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <sstream>

#include "changedet/rng.hpp"
#include "changedet/stats.hpp"

using namespace changedet;

namespace {

// naive two-pass per-box loop, the oracle the implementation is checked
// against
void naive_box_stats(const std::vector<double>& plane, int64_t w, const Box& b,
                     double eps, double* mu, double* var) {
  double acc = 0;
  for (int64_t i = 0; i < b.rows; ++i)
    for (int64_t j = 0; j < b.cols; ++j) acc += plane[(b.row0 + i) * w + b.col0 + j];
  *mu = acc / b.pixels();
  double acc2 = 0;
  for (int64_t i = 0; i < b.rows; ++i)
    for (int64_t j = 0; j < b.cols; ++j) {
      double d = plane[(b.row0 + i) * w + b.col0 + j] - *mu;
      acc2 += d * d;
    }
  *var = acc2 / b.pixels() + eps;
}

}  // namespace

TEST_SUITE("stats") {
  TEST_CASE("make_grid basic tilings") {
    auto g = make_grid(8, 8, 2);
    REQUIRE(g.regions() == 4);
    for (const Box& b : g.boxes) {
      CHECK(b.rows == 4);
      CHECK(b.cols == 4);
    }

    auto g1 = make_grid(8, 8, 1);
    REQUIRE(g1.regions() == 1);
    CHECK(g1.boxes[0].rows == 8);
    CHECK(g1.boxes[0].cols == 8);

    auto g7 = make_grid(7, 7, 2);
    int64_t total = 0;
    for (const Box& b : g7.boxes) {
      CHECK((b.rows == 3 || b.rows == 4));
      CHECK((b.cols == 3 || b.cols == 4));
      total += b.pixels();
    }
    CHECK(total == 49);
  }

  TEST_CASE("make_grid rejects lambda out of range") {
    CHECK_THROWS_AS(make_grid(8, 8, 0), std::invalid_argument);
    CHECK_THROWS_AS(make_grid(8, 8, 9), std::invalid_argument);
  }

  TEST_CASE("tiling property: every pixel in exactly one box") {
    for (int64_t h : {3, 7, 16, 33, 64}) {
      for (int64_t w : {3, 8, 21, 64}) {
        for (int64_t lambda = 1; lambda <= std::min<int64_t>({h, w, 16}); ++lambda) {
          auto g = make_grid(h, w, lambda);
          std::vector<int> hits(h * w, 0);
          for (const Box& b : g.boxes) {
            CHECK(b.rows >= 1);
            CHECK(b.cols >= 1);
            for (int64_t i = 0; i < b.rows; ++i)
              for (int64_t j = 0; j < b.cols; ++j)
                ++hits[(b.row0 + i) * w + b.col0 + j];
          }
          for (int v : hits) REQUIRE(v == 1);
        }
      }
    }
  }

  TEST_CASE("region_channel_stats constants and analytic values") {
    const double eps = 1e-5;
    auto f = Tensor<double>::full({2, 4, 4}, 3.0);
    auto st = region_channel_stats(f, make_grid(4, 4, 2), eps);
    for (int64_t r = 0; r < 4; ++r)
      for (int64_t c = 0; c < 2; ++c) {
        CHECK(st.mu_at(r, c) == doctest::Approx(3.0).epsilon(1e-15));
        CHECK(st.var_at(r, c) == doctest::Approx(eps).epsilon(1e-12));
      }

    auto g = Tensor<double>::from_data({1, 2, 2}, {1, 2, 3, 4});
    auto st1 = region_channel_stats(g, make_grid(2, 2, 1), eps);
    CHECK(st1.mu_at(0, 0) == doctest::Approx(2.5).epsilon(1e-15));
    CHECK(st1.var_at(0, 0) == doctest::Approx(1.25 + eps).epsilon(1e-15));
  }

  TEST_CASE("region_channel_stats matches naive loop") {
    Rng rng(201);
    auto f = Tensor<double>::randn({3, 11, 9}, rng);
    auto grid = make_grid(11, 9, 3);
    auto st = region_channel_stats(f, grid, 1e-5);
    for (int64_t r = 0; r < grid.regions(); ++r)
      for (int64_t c = 0; c < 3; ++c) {
        std::vector<double> plane(f.values().begin() + c * 99,
                                  f.values().begin() + (c + 1) * 99);
        double mu, var;
        naive_box_stats(plane, 9, grid.boxes[r], 1e-5, &mu, &var);
        CHECK(std::fabs(st.mu_at(r, c) - mu) < 1e-12);
        CHECK(std::fabs(st.var_at(r, c) - var) < 1e-12);
      }
  }

  TEST_CASE("batch_channel_stats analytic and naive") {
    const double eps = 1e-5;
    auto c1 = Tensor<double>::full({1, 2, 3, 3}, 0.5);
    auto st = batch_channel_stats(c1, eps);
    CHECK(st.mu_at(0, 0) == doctest::Approx(0.5));
    CHECK(st.var_at(0, 0) == doctest::Approx(eps));

    std::vector<double> two(2 * 1 * 2 * 2);
    for (int i = 0; i < 4; ++i) two[i] = 0.0;
    for (int i = 4; i < 8; ++i) two[i] = 2.0;
    auto st2 = batch_channel_stats(Tensor<double>::from_data({2, 1, 2, 2}, two), eps);
    CHECK(st2.mu_at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(st2.var_at(0, 0) == doctest::Approx(1.0 + eps).epsilon(1e-15));

    Rng rng(203);
    auto f = Tensor<double>::randn({2, 3, 4, 5}, rng);
    auto stf = batch_channel_stats(f, eps);
    for (int64_t c = 0; c < 3; ++c) {
      double acc = 0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t i = 0; i < 20; ++i) acc += f.values()[(n * 3 + c) * 20 + i];
      double mu = acc / 40.0;
      double acc2 = 0;
      for (int64_t n = 0; n < 2; ++n)
        for (int64_t i = 0; i < 20; ++i) {
          double d = f.values()[(n * 3 + c) * 20 + i] - mu;
          acc2 += d * d;
        }
      CHECK(std::fabs(stf.mu_at(0, c) - mu) < 1e-12);
      CHECK(std::fabs(stf.var_at(0, c) - (acc2 / 40.0 + eps)) < 1e-12);
    }
  }

  TEST_CASE("region_channel_cov constant region gives eps*I") {
    auto f = Tensor<double>::full({3, 4, 4}, 2.0);
    auto covs = region_channel_cov(f, make_grid(4, 4, 2), 1e-5);
    REQUIRE(covs.size() == 4);
    for (const auto& cc : covs)
      for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
          CHECK(cc.cov.at(i, j) == doctest::Approx(i == j ? 1e-5 : 0.0).epsilon(1e-12));
  }

  TEST_CASE("identical channels are perfectly correlated") {
    Rng rng(207);
    std::vector<double> one(16);
    for (auto& v : one) v = rng.normal();
    std::vector<double> both(one);
    both.insert(both.end(), one.begin(), one.end());
    auto f = Tensor<double>::from_data({2, 4, 4}, both);
    auto covs = region_channel_cov(f, make_grid(4, 4, 1), 1e-5);
    REQUIRE(covs.size() == 1);
    const auto& c = covs[0].cov;
    CHECK(c.at(0, 1) == doctest::Approx(c.at(0, 0) - 1e-5).epsilon(1e-12));
    CHECK(c.at(0, 1) == doctest::Approx(c.at(1, 1) - 1e-5).epsilon(1e-12));
  }

  TEST_CASE("region_channel_cov matches naive accumulation") {
    Rng rng(209);
    auto f = Tensor<double>::randn({4, 6, 6}, rng);
    auto grid = make_grid(6, 6, 2);
    auto covs = region_channel_cov(f, grid, 1e-5);
    for (int64_t r = 0; r < grid.regions(); ++r) {
      const Box& b = grid.boxes[r];
      int64_t m = b.pixels();
      // naive: gather, mean, outer products
      std::vector<double> cols(4 * m);
      for (int64_t c = 0; c < 4; ++c) {
        int64_t o = c * m;
        for (int64_t i = 0; i < b.rows; ++i)
          for (int64_t j = 0; j < b.cols; ++j)
            cols[o++] = f.values()[c * 36 + (b.row0 + i) * 6 + b.col0 + j];
      }
      for (int64_t i = 0; i < 4; ++i) {
        double mu = 0;
        for (int64_t q = 0; q < m; ++q) mu += cols[i * m + q];
        mu /= m;
        CHECK(std::fabs(covs[r].mu[i] - mu) < 1e-12);
        for (int64_t j = 0; j < 4; ++j) {
          double muj = 0;
          for (int64_t q = 0; q < m; ++q) muj += cols[j * m + q];
          muj /= m;
          double acc = 0;
          for (int64_t q = 0; q < m; ++q)
            acc += (cols[i * m + q] - mu) * (cols[j * m + q] - muj);
          acc /= m;
          if (i == j) acc += 1e-5;
          CHECK(std::fabs(covs[r].cov.at(i, j) - acc) < 1e-10);
        }
      }
    }
  }

  TEST_CASE("batch_cov constant batch and naive oracle") {
    auto cst = batch_cov(Tensor<double>::full({2, 3, 2, 2}, 0.7), 1e-5);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        CHECK(cst.cov.at(i, j) == doctest::Approx(i == j ? 1e-5 : 0.0).epsilon(1e-12));

    Rng rng(211);
    auto f = Tensor<double>::randn({2, 3, 3, 4}, rng);
    auto cc = batch_cov(f, 1e-5);
    const int64_t m = 2 * 12;
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j) {
        auto col = [&](int64_t ch, int64_t q) {
          int64_t n = q / 12, p = q % 12;
          return f.values()[(n * 3 + ch) * 12 + p];
        };
        double mi = 0, mj = 0;
        for (int64_t q = 0; q < m; ++q) {
          mi += col(i, q);
          mj += col(j, q);
        }
        mi /= m;
        mj /= m;
        double acc = 0;
        for (int64_t q = 0; q < m; ++q) acc += (col(i, q) - mi) * (col(j, q) - mj);
        acc /= m;
        if (i == j) acc += 1e-5;
        CHECK(std::fabs(cc.cov.at(i, j) - acc) < 1e-10);
      }
  }

  TEST_CASE("batch_cov of orthonormal columns has the closed form") {
    // columns of the C x C identity: cov = I/C - 11^T/C^2 + eps I
    const int64_t c = 4;
    std::vector<double> data(c * c, 0.0);
    // tensor [N=1, C=4, H=2, W=2] whose 4 spatial columns are e_0..e_3
    for (int64_t ch = 0; ch < c; ++ch) data[ch * 4 + ch] = 1.0;
    auto cc = batch_cov(Tensor<double>::from_data({1, 4, 2, 2}, data), 1e-5);
    for (int64_t i = 0; i < c; ++i)
      for (int64_t j = 0; j < c; ++j) {
        double expect = (i == j ? 1.0 / c : 0.0) - 1.0 / (c * c) + (i == j ? 1e-5 : 0.0);
        CHECK(cc.cov.at(i, j) == doctest::Approx(expect).epsilon(1e-12));
      }
  }

  TEST_CASE("cov diagonal agrees with ChannelStats variance") {
    Rng rng(213);
    auto f = Tensor<double>::randn({5, 8, 8}, rng);
    auto grid = make_grid(8, 8, 2);
    auto covs = region_channel_cov(f, grid, 1e-5);
    auto st = region_channel_stats(f, grid, 1e-5);
    for (int64_t r = 0; r < grid.regions(); ++r)
      for (int64_t c = 0; c < 5; ++c)
        CHECK(std::fabs(covs[r].cov.at(c, c) - st.var_at(r, c)) < 1e-10);
  }

  TEST_CASE("pooled consistency: lambda=1, N=1") {
    Rng rng(217);
    auto f = Tensor<double>::randn({3, 6, 6}, rng);
    auto rs = region_channel_stats(f, make_grid(6, 6, 1), 1e-5);
    std::vector<double> batch(f.values());
    auto bs = batch_channel_stats(Tensor<double>::from_data({1, 3, 6, 6}, batch), 1e-5);
    for (int64_t c = 0; c < 3; ++c) {
      CHECK(rs.mu_at(0, c) == doctest::Approx(bs.mu_at(0, c)).epsilon(1e-14));
      CHECK(rs.var_at(0, c) == doctest::Approx(bs.var_at(0, c)).epsilon(1e-14));
    }
  }

  TEST_CASE("variance stays above eps") {
    Rng rng(219);
    for (int trial = 0; trial < 5; ++trial) {
      auto f = Tensor<double>::uniform({2, 7, 7}, rng, 0.0, 1.0);
      auto st = region_channel_stats(f, make_grid(7, 7, 3), 1e-5);
      for (double v : st.var) CHECK(v - 1e-5 >= -1e-12);
    }
  }

  TEST_CASE("style_report basics") {
    Rng rng(223);
    auto xa = Tensor<double>::uniform({3, 16, 16}, rng, 0.1, 0.9);

    auto same = style_report(xa, xa, 2);
    for (const auto& r : same) {
      CHECK(r.mu_a == r.mu_b);
      CHECK(r.std_a == r.std_b);
    }

    std::vector<double> shifted(xa.values());
    for (auto& v : shifted) v += 0.1;
    auto xb = Tensor<double>::from_data({3, 16, 16}, shifted);
    auto rows = style_report(xa, xb, 2);
    for (const auto& r : rows) {
      CHECK(r.mu_b - r.mu_a == doctest::Approx(0.1).epsilon(1e-10));
      CHECK(r.std_a == doctest::Approx(r.std_b).epsilon(1e-10));
    }

    // report values match direct recomputation
    auto grid = make_grid(16, 16, 2);
    auto sa = region_channel_stats(xa, grid, 1e-8);
    for (const auto& r : rows) {
      CHECK(r.mu_a == doctest::Approx(sa.mu_at(r.region, r.channel)).epsilon(1e-14));
      CHECK(r.std_a ==
            doctest::Approx(std::sqrt(sa.var_at(r.region, r.channel) - 1e-8))
                .epsilon(1e-10));
    }
  }

  TEST_CASE("style_report rejects size mismatch") {
    auto xa = Tensor<double>::zeros({3, 16, 16});
    auto xb = Tensor<double>::zeros({3, 16, 8});
    CHECK_THROWS_AS(style_report(xa, xb, 2), std::invalid_argument);
  }

  TEST_CASE("style_report csv format") {
    auto xa = Tensor<double>::full({3, 4, 4}, 0.25);
    auto rows = style_report(xa, xa, 2);
    std::ostringstream os;
    write_style_report_csv(rows, os);
    auto text = os.str();
    CHECK(text.substr(0, text.find('\n')) == "region,channel,mu_a,std_a,mu_b,std_b");
    size_t lines = std::count(text.begin(), text.end(), '\n');
    CHECK(lines == 1 + rows.size());
  }
}
