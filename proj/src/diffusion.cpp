// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/diffusion.hpp"

#include <cmath>

#include <fmt/format.h>

#include "emocast/ops.hpp"

namespace emocast {

namespace {

void check_t(const NoiseSchedule& sched, int t, const char* what) {
  if (t < 1 || t > sched.steps) throw ValueError(fmt::format("{}: timestep {} outside [1, {}]", what, t, sched.steps));
}

void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(fmt::format("{}: {} vs {}", what, shape_string(a.shape()), shape_string(b.shape())));
  }
}

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) { return add(scale(x, a), scale(y, b)); }

}  // namespace

double NoiseSchedule::beta_at(int t) const {
  check_t(*this, t, "beta");
  return beta[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_at(int t) const {
  check_t(*this, t, "alpha");
  return alpha[static_cast<std::size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar_at(int t) const {
  if (t == 0) return 1.0;
  check_t(*this, t, "alpha_bar");
  return alpha_bar[static_cast<std::size_t>(t - 1)];
}

void NoiseSchedule::validate() const {
  if (steps < 1 || beta.size() != static_cast<std::size_t>(steps) || alpha.size() != beta.size() ||
      alpha_bar.size() != beta.size()) {
    throw ValueError("noise schedule tables do not match its length");
  }
  double running = 1.0;
  for (std::size_t i = 0; i < beta.size(); ++i) {
    if (!(beta[i] > 0.0 && beta[i] < 1.0)) throw ValueError(fmt::format("beta_{} = {} outside (0, 1)", i + 1, beta[i]));
    running *= alpha[i];
    if (alpha[i] != 1.0 - beta[i] || alpha_bar[i] != running) throw ValueError("noise schedule tables are inconsistent");
  }
}

NoiseSchedule make_schedule(std::vector<double> betas) {
  NoiseSchedule s;
  s.steps = static_cast<int>(betas.size());
  if (s.steps < 1) throw ValueError("noise schedule needs at least one step");
  s.beta = std::move(betas);
  double running = 1.0;
  for (double b : s.beta) {
    if (!(b > 0.0 && b < 1.0)) throw ValueError(fmt::format("beta {} outside (0, 1)", b));
    s.alpha.push_back(1.0 - b);
    running *= 1.0 - b;
    s.alpha_bar.push_back(running);
  }
  return s;
}

NoiseSchedule make_linear_schedule(int steps, double beta_first, double beta_last) {
  if (steps < 1) throw ValueError(fmt::format("schedule length {} must be positive", steps));
  if (!(beta_first > 0.0 && beta_first <= beta_last && beta_last < 1.0)) {
    throw ValueError(fmt::format("need 0 < beta_1 <= beta_T < 1, got {} and {}", beta_first, beta_last));
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    betas[static_cast<std::size_t>(i)] =
        steps == 1 ? beta_first : beta_first + (beta_last - beta_first) * static_cast<double>(i) / (steps - 1);
  }
  return make_schedule(std::move(betas));
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  check_t(sched, t, "q_sample");
  check_same(z0, eps, "q_sample noise shape");
  const double ab = sched.alpha_bar_at(t);
  return axpby(std::sqrt(ab), z0, std::sqrt(1.0 - ab), eps);
}

Tensor training_loss(const Tensor& eps_pred, const Tensor& eps) {
  check_same(eps_pred, eps, "training_loss");
  return mse_loss(eps_pred, eps);
}

Tensor predict_z0(const Tensor& z_t, int t, const Tensor& eps_pred, const NoiseSchedule& sched) {
  check_t(sched, t, "predict_z0");
  check_same(z_t, eps_pred, "predict_z0");
  const double ab = sched.alpha_bar_at(t);
  return scale(sub(z_t, scale(eps_pred, std::sqrt(1.0 - ab))), 1.0 / std::sqrt(ab));
}

Tensor ddpm_step_to(const Tensor& z_t, int t, int t_prev, const Tensor& eps_pred, const NoiseSchedule& sched, Rng& rng) {
  check_t(sched, t, "ddpm_step");
  if (t_prev < 0 || t_prev >= t) throw ValueError(fmt::format("ddpm_step: t_prev {} must lie in [0, {})", t_prev, t));
  check_same(z_t, eps_pred, "ddpm_step");
  const double ab_t = sched.alpha_bar_at(t), ab_prev = sched.alpha_bar_at(t_prev);
  const double a = ab_t / ab_prev;
  const double b = 1.0 - a;
  auto mean = scale(sub(z_t, scale(eps_pred, b / std::sqrt(1.0 - ab_t))), 1.0 / std::sqrt(a));
  if (t_prev == 0) return mean;
  const double var = (1.0 - ab_prev) / (1.0 - ab_t) * b;
  return add(mean, scale(rng.normal_tensor(z_t.shape(), z_t.dtype()), std::sqrt(var)));
}

Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_pred, const NoiseSchedule& sched, Rng& rng) {
  return ddpm_step_to(z_t, t, t - 1, eps_pred, sched, rng);
}

Tensor ddim_step(const Tensor& z_t, int t, int t_prev, const Tensor& eps_pred, const NoiseSchedule& sched, double eta,
                 Rng* rng) {
  check_t(sched, t, "ddim_step");
  if (t_prev < 0 || t_prev >= t) throw ValueError(fmt::format("ddim_step: t_prev {} must lie in [0, {})", t_prev, t));
  if (!(eta >= 0.0 && eta <= 1.0)) throw ValueError(fmt::format("ddim_step: eta {} outside [0, 1]", eta));
  const double ab_t = sched.alpha_bar_at(t), ab_prev = sched.alpha_bar_at(t_prev);
  auto z0 = predict_z0(z_t, t, eps_pred, sched);
  const double sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
  auto out = axpby(std::sqrt(ab_prev), z0, std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)), eps_pred);
  if (sigma > 0.0) {
    if (!rng) throw ValueError("ddim_step: eta > 0 needs a random stream");
    out = add(out, scale(rng->normal_tensor(z_t.shape(), z_t.dtype()), sigma));
  }
  return out;
}

LatentCodec LatentCodec::linear(Tensor encoder, Tensor decoder) {
  if (encoder.rank() != 2 || decoder.rank() != 2 || encoder.dim(0) != decoder.dim(1) || encoder.dim(1) != decoder.dim(0)) {
    throw ShapeError(fmt::format("linear codec: encoder {} and decoder {} are not transposed shapes",
                                 shape_string(encoder.shape()), shape_string(decoder.shape())));
  }
  LatentCodec c;
  c.mode_ = Mode::linear;
  c.encoder_ = reshape(encoder, {encoder.dim(0), encoder.dim(1), 1, 1});
  c.decoder_ = reshape(decoder, {decoder.dim(0), decoder.dim(1), 1, 1});
  return c;
}

Tensor LatentCodec::encode(const Tensor& x) const {
  if (mode_ == Mode::identity) return x;
  return conv2d(x, encoder_.to(x.dtype()));
}

Tensor LatentCodec::decode(const Tensor& z) const {
  if (mode_ == Mode::identity) return z;
  return conv2d(z, decoder_.to(z.dtype()));
}

std::vector<int> timestep_sequence(int total_steps, int steps) {
  if (steps < 1) throw ValueError(fmt::format("sampler steps {} must be positive", steps));
  if (steps > total_steps) throw ValueError(fmt::format("sampler steps {} exceed schedule length {}", steps, total_steps));
  std::vector<int> out;
  for (int i = 0; i < steps; ++i) {
    const long long num = static_cast<long long>(total_steps) * (steps - i);
    out.push_back(static_cast<int>((num + steps / 2) / steps));
  }
  return out;
}

Tensor sample_loop(const Denoiser& model, const Shape& shape, const NoiseSchedule& sched, const SamplerConfig& config,
                   std::uint64_t seed, const LatentCodec& codec, DType dtype) {
  const auto ts = timestep_sequence(sched.steps, config.steps);
  NoGradGuard no_grad;
  Rng root(seed);
  Rng init = root.split("init");
  Rng noise = root.split("noise");
  auto z = init.normal_tensor(shape, dtype);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    auto eps = model(z, t);
    if (eps.shape() != z.shape()) {
      throw ShapeError(fmt::format("denoiser returned {} for latent {}", shape_string(eps.shape()), shape_string(z.shape())));
    }
    z = config.sampler == Sampler::ddpm ? ddpm_step_to(z, t, t_prev, eps, sched, noise)
                                        : ddim_step(z, t, t_prev, eps, sched, config.eta, &noise);
  }
  return codec.decode(z);
}

}  // namespace emocast
