// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/optim.hpp"

#include <cmath>

#include <fmt/format.h>

namespace emocast {

void optimizer_step(std::span<Tensor> params, std::span<const Tensor> grads, OptimizerState& state) {
  if (params.size() != grads.size()) {
    throw ShapeError(fmt::format("optimizer_step: {} params but {} grads", params.size(), grads.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != grads[i].shape() || params[i].dtype() != grads[i].dtype()) {
      throw ShapeError(fmt::format("optimizer_step: param {} has shape {} but grad {}", i,
                                   shape_string(params[i].shape()), shape_string(grads[i].shape())));
    }
  }
  const auto& cfg = state.config;
  if (cfg.mode == OptimizerMode::adam) {
    if (state.first_moment.empty()) {
      for (const auto& p : params) {
        state.first_moment.push_back(Tensor::zeros(p.shape(), p.dtype()));
        state.second_moment.push_back(Tensor::zeros(p.shape(), p.dtype()));
      }
    }
    if (state.first_moment.size() != params.size()) {
      throw ShapeError(fmt::format("optimizer_step: state tracks {} params, got {}", state.first_moment.size(), params.size()));
    }
  }
  ++state.step;
  const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::dispatch(params[i].dtype(), [&]<typename T>() {
      auto p = params[i].mutable_data<T>();
      auto g = grads[i].data<T>();
      if (cfg.mode == OptimizerMode::sgd) {
        const T lr = static_cast<T>(cfg.learning_rate);
        for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
        return;
      }
      auto m = state.first_moment[i].mutable_data<T>();
      auto v = state.second_moment[i].mutable_data<T>();
      if (m.size() != p.size()) throw ShapeError("optimizer_step: moment buffer does not match parameter");
      const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
      const T step_size = static_cast<T>(cfg.learning_rate / bias1);
      const T inv_sqrt_bias2 = static_cast<T>(1.0 / std::sqrt(bias2));
      const T eps = static_cast<T>(cfg.epsilon);
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = b1 * m[j] + (T(1) - b1) * g[j];
        v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
        p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bias2 + eps);
      }
    });
  }
}

double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  double total = 0.0;
  for (const auto& g : grads) {
    for (double v : g.to_vector()) total += v * v;
  }
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& g : grads) {
      detail::dispatch(g.dtype(), [&]<typename T>() {
        for (auto& v : g.mutable_data<T>()) v = static_cast<T>(v * f);
      });
    }
  }
  return norm;
}

}  // namespace emocast
