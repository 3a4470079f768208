// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "emocast/rng.hpp"
#include "emocast/tensor.hpp"

namespace emocast {

/// Timesteps are 1-based: index t in [1, T]. alpha_bar(0) is 1 by convention.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  double beta_at(int t) const;
  double alpha_at(int t) const;
  double alpha_bar_at(int t) const;
  /// Throws unless 0 < beta < 1 everywhere and alpha_bar is the running product.
  void validate() const;
};

NoiseSchedule make_linear_schedule(int steps, double beta_first, double beta_last);
NoiseSchedule make_schedule(std::vector<double> betas);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);
Tensor training_loss(const Tensor& eps_pred, const Tensor& eps);

/// Ancestral step t -> t-1; no noise is injected at t = 1.
Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_pred, const NoiseSchedule& sched, Rng& rng);
/// Ancestral step over a respaced pair t -> t_prev (t_prev = t - 1 is the plain step).
Tensor ddpm_step_to(const Tensor& z_t, int t, int t_prev, const Tensor& eps_pred, const NoiseSchedule& sched, Rng& rng);
/// DDIM update t -> t_prev (t_prev may be 0). `rng` is only drawn from when eta > 0.
Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_pred, const NoiseSchedule& sched, double eta,
                 Rng* rng = nullptr);

/// Estimate of z0 implied by eps_pred at step t.
Tensor predict_z0(const Tensor& z_t, int t, const Tensor& eps_pred, const NoiseSchedule& sched);

class LatentCodec {
 public:
  enum class Mode { identity, linear };

  LatentCodec() = default;
  /// Per-pixel channel maps: encoder [C_latent, C_image], decoder [C_image, C_latent].
  static LatentCodec linear(Tensor encoder, Tensor decoder);

  Mode mode() const { return mode_; }
  Tensor encode(const Tensor& x) const;
  Tensor decode(const Tensor& z) const;

 private:
  Mode mode_ = Mode::identity;
  Tensor encoder_;
  Tensor decoder_;
};

enum class Sampler { ddpm, ddim };

struct SamplerConfig {
  Sampler sampler = Sampler::ddim;
  int steps = 10;
  double eta = 0.0;
};

/// Returns eps_pred for z_t at timestep t.
using Denoiser = std::function<Tensor(const Tensor& z_t, int t)>;

/// Evenly spaced descending timesteps from T, `steps` long, ending at or above 1.
std::vector<int> timestep_sequence(int total_steps, int steps);

/// Starts from seeded N(0, I) noise, runs the sampler and decodes the result.
Tensor sample_loop(const Denoiser& model, const Shape& shape, const NoiseSchedule& sched, const SamplerConfig& config,
                   std::uint64_t seed, const LatentCodec& codec = {}, DType dtype = DType::f32);

}  // namespace emocast
