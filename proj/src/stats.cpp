// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/stats.hpp"

#include <cmath>

#include <fmt/format.h>

namespace emocast {

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError(fmt::format("pearson: series lengths {} and {} differ", a.size(), b.size()));
  if (a.size() < 2) throw ValueError("pearson: need at least two samples");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  // Relative threshold so rounding noise on a constant series is still treated as constant.
  auto constant = [](double ss, double m, double count) { return ss <= 1e-24 * std::max(1.0, m * m) * count; };
  if (constant(saa, ma, n) || constant(sbb, mb, n)) throw UndefinedCorrelation("pearson: series has zero variance");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace emocast
