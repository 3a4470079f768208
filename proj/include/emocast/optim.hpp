// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "emocast/tensor.hpp"

namespace emocast {

enum class OptimizerMode { sgd, adam };

struct OptimizerConfig {
  OptimizerMode mode = OptimizerMode::adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment buffers are created lazily on the first step, one per parameter.
struct OptimizerState {
  OptimizerConfig config;
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  explicit OptimizerState(OptimizerConfig cfg = {}) : config(cfg) {}
};

/// In-place update of `params` from `grads`. Deterministic given the state.
void optimizer_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state);

/// Scales `grads` in place so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
double clip_grad_norm(std::span<Tensor> grads, double max_norm);

}  // namespace emocast
