// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference oracle shared by the unit and acceptance suites.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "emocast/ops.hpp"
#include "emocast/tensor.hpp"

namespace emocast::testing {

struct GradCheckResult {
  bool passed = true;
  std::size_t checked = 0;
  double worst_relative = 0.0;
  std::string first_failure;
};

struct GradCheckOptions {
  double step = 1e-5;
  double relative_tolerance = 1e-4;
  double absolute_tolerance = 1e-7;
  double small_gradient = 1e-6;
  // 0 checks every coordinate; otherwise every `stride`-th coordinate of each input.
  std::size_t stride = 0;
};

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Compares backward() against central differences of `loss_fn` w.r.t. each float64 input.
inline GradCheckResult grad_check(const LossFn& loss_fn, std::vector<Tensor> inputs, GradCheckOptions opt = {}) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  backward(loss_fn(inputs));
  std::vector<std::vector<double>> analytic;
  for (const auto& t : inputs) analytic.push_back(t.grad().to_vector());

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto values = inputs[k].mutable_data<double>();
    const std::size_t stride = opt.stride == 0 ? 1 : opt.stride;
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double orig = values[i];
      values[i] = orig + opt.step;
      const double up = loss_fn(inputs).item();
      values[i] = orig - opt.step;
      const double down = loss_fn(inputs).item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[k][i];
      ++result.checked;
      bool ok;
      if (std::abs(a) < opt.small_gradient) {
        ok = std::abs(a - numeric) <= opt.absolute_tolerance;
      } else {
        const double rel = std::abs(a - numeric) / std::max(std::abs(a), std::abs(numeric));
        result.worst_relative = std::max(result.worst_relative, rel);
        ok = rel <= opt.relative_tolerance;
      }
      if (!ok && result.passed) {
        result.passed = false;
        result.first_failure = fmt::format("input {} coord {}: analytic {} vs numeric {}", k, i, a, numeric);
      }
    }
  }
  for (auto& t : inputs) t.set_requires_grad(false);
  return result;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace emocast::testing
