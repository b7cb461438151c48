// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <vector>

#include "changedet/ops.hpp"
#include "changedet/rng.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// Compares analytic gradients against central finite differences.
// Error metric per element: |analytic - central| / max(1, |central|).
// `max_elements_per_input` limits the sweep for large parameter tensors
// (elements chosen by a seeded generator); 0 sweeps everything.
inline double grad_check(
    const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
    std::vector<Tensor<double>> inputs, double eps = 1e-4,
    int64_t max_elements_per_input = 0, uint64_t sample_seed = 7) {
  for (auto& in : inputs) in.set_requires_grad(true);

  Tensor<double> loss = f(inputs);
  if (loss.numel() != 1)
    throw std::invalid_argument("grad_check: function must be scalar-valued");
  for (auto& in : inputs) in.zero_grad();
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs)
    analytic.push_back(in.has_grad() ? in.grad() : std::vector<double>(in.numel(), 0.0));

  double max_err = 0.0;
  Rng pick(sample_seed);
  for (size_t t = 0; t < inputs.size(); ++t) {
    auto& in = inputs[t];
    const int64_t n = in.numel();
    std::vector<int64_t> idx;
    if (max_elements_per_input > 0 && n > max_elements_per_input) {
      for (int64_t q = 0; q < max_elements_per_input; ++q)
        idx.push_back(static_cast<int64_t>(pick.below(n)));
    } else {
      idx.resize(n);
      for (int64_t q = 0; q < n; ++q) idx[q] = q;
    }
    for (int64_t i : idx) {
      const double saved = in.values()[i];
      NoGradGuard ng;
      in.values_mut()[i] = saved + eps;
      double fp = f(inputs).values()[0];
      in.values_mut()[i] = saved - eps;
      double fm = f(inputs).values()[0];
      in.values_mut()[i] = saved;
      double central = (fp - fm) / (2.0 * eps);
      double err = std::fabs(analytic[t][i] - central) /
                   std::max(1.0, std::fabs(central));
      if (err > max_err) max_err = err;
    }
  }
  return max_err;
}

}  // namespace changedet
