// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>

#include "emocast/tensor.hpp"

namespace emocast {

/// Raised when a correlation is requested over a constant series.
class UndefinedCorrelation : public ValueError {
 public:
  using ValueError::ValueError;
};

/// Pearson correlation of two equal-length series (n >= 2).
double pearson(std::span<const double> a, std::span<const double> b);

}  // namespace emocast
