// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "emocast/diffusion.hpp"
#include "emocast/ops.hpp"
#include "grad_check.hpp"

using namespace emocast;
using emocast::testing::max_abs_diff;

namespace {

// The noise a perfect denoiser would report for z_t given the clean latent.
Denoiser perfect_denoiser(const Tensor& z0, const NoiseSchedule& sched) {
  return [z0, &sched](const Tensor& z_t, int t) {
    const double ab = sched.alpha_bar_at(t);
    return scale(sub(z_t, scale(z0, std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
  };
}

double mse(const Tensor& a, const Tensor& b) { return mse_loss(a, b).item(); }

}  // namespace

TEST_CASE("linear schedule") {
  auto s = make_schedule({0.5, 0.5});
  CHECK(s.alpha == std::vector<double>{0.5, 0.5});
  CHECK(s.alpha_bar == std::vector<double>{0.5, 0.25});

  auto one = make_linear_schedule(1, 0.1, 0.1);
  CHECK(one.alpha_bar[0] == doctest::Approx(0.9).epsilon(1e-15));

  auto big = make_linear_schedule(1000, 1e-4, 0.02);
  CHECK(big.beta.front() == 1e-4);
  CHECK(big.beta.back() == doctest::Approx(0.02).epsilon(1e-15));
  long double log_sum = 0;
  for (int i = 0; i < 1000; ++i) log_sum += std::log1p(-(1e-4L + (0.02L - 1e-4L) * i / 999.0L));
  const double oracle = static_cast<double>(std::exp(log_sum));
  CHECK(std::abs(big.alpha_bar.back() - oracle) / oracle <= 1e-10);
  big.validate();

  for (int t = 1; t <= big.steps; ++t) {
    CHECK(big.alpha_bar_at(t) == big.alpha_bar_at(t - 1) * big.alpha_at(t));
    if (t > 1) CHECK(big.alpha_bar_at(t) < big.alpha_bar_at(t - 1));
    CHECK((big.alpha_bar_at(t) > 0.0 && big.alpha_bar_at(t) < 1.0));
  }

  CHECK_THROWS_AS(make_linear_schedule(0, 0.1, 0.2), ValueError);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.2, 0.1), ValueError);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.1), ValueError);
  CHECK_THROWS_AS(make_linear_schedule(10, 0.1, 1.0), ValueError);
}

TEST_CASE("q_sample") {
  auto s = make_linear_schedule(50, 1e-3, 0.2);
  Rng rng(1);
  auto z0 = rng.normal_tensor({2, 3}, DType::f64);
  auto eps = rng.normal_tensor({2, 3}, DType::f64);
  const double ab = s.alpha_bar_at(20);
  CHECK(max_abs_diff(q_sample(z0, 20, Tensor::zeros({2, 3}), s).to_vector(), scale(z0, std::sqrt(ab)).to_vector()) == 0.0);
  CHECK(max_abs_diff(q_sample(Tensor::zeros({2, 3}), 20, eps, s).to_vector(), scale(eps, std::sqrt(1 - ab)).to_vector()) ==
        0.0);
  CHECK_THROWS_AS(q_sample(z0, 0, eps, s), ValueError);
  CHECK_THROWS_AS(q_sample(z0, 51, eps, s), ValueError);
  CHECK_THROWS_AS(q_sample(z0, 3, Tensor::zeros({3, 2}), s), ShapeError);
}

TEST_CASE("q_sample matches the closed-form Gaussian") {
  auto s = make_linear_schedule(50, 1e-3, 0.2);
  const int n = 100000, t = 17;
  const double z = 1.3;
  Rng rng(2024);
  auto eps = rng.normal_tensor({n}, DType::f64);
  auto zt = q_sample(Tensor::full({n}, z), t, eps, s).to_vector();
  double m = 0;
  for (double v : zt) m += v;
  m /= n;
  double var = 0;
  for (double v : zt) var += (v - m) * (v - m);
  var /= n - 1;
  const double ab = s.alpha_bar_at(t), true_var = 1 - ab;
  CHECK(std::abs(m - std::sqrt(ab) * z) <= 3 * std::sqrt(true_var / n));
  CHECK(std::abs(var - true_var) <= 3 * true_var * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("training_loss") {
  Rng rng(3);
  auto e = rng.normal_tensor({4, 5}, DType::f64);
  CHECK(training_loss(e, e).item() == 0.0);
  auto unit = Tensor::full({4, 5}, 1.0);
  CHECK(training_loss(scale(unit, -1.0), unit).item() == 4.0);
  auto p = rng.normal_tensor({4, 5}, DType::f64);
  auto pv = p.to_vector(), ev = e.to_vector();
  double acc = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) acc += (pv[i] - ev[i]) * (pv[i] - ev[i]);
  CHECK(std::abs(training_loss(p, e).item() - acc / 20) <= 1e-12);
  CHECK(training_loss(p, e).item() >= 0.0);
  CHECK_THROWS_AS(training_loss(p, Tensor::zeros({5, 4})), ShapeError);
}

TEST_CASE("ddpm_step") {
  auto s = make_linear_schedule(10, 1e-3, 0.2);
  Rng data(4);
  auto z = data.normal_tensor({3, 2}, DType::f64);
  auto eps = data.normal_tensor({3, 2}, DType::f64);

  Rng r1(10), r2(99);
  CHECK(ddpm_step(z, 1, eps, s, r1).to_vector() == ddpm_step(z, 1, eps, s, r2).to_vector());

  const int t = 6;
  Rng a(5), b(5);
  auto out = ddpm_step(Tensor::zeros({3, 2}), t, Tensor::zeros({3, 2}), s, a);
  const double var = (1 - s.alpha_bar_at(t - 1)) / (1 - s.alpha_bar_at(t)) * s.beta_at(t);
  auto noise = b.normal_tensor({3, 2}, DType::f64);
  CHECK(max_abs_diff(out.to_vector(), scale(noise, std::sqrt(var)).to_vector()) <= 1e-15);

  Rng c(6);
  CHECK_THROWS_AS(ddpm_step(z, 0, eps, s, c), ValueError);
  CHECK_THROWS_AS(ddpm_step(z, 11, eps, s, c), ValueError);
}

TEST_CASE("ddpm chain with a perfect denoiser recovers z0") {
  auto s = make_linear_schedule(10, 1e-3, 0.2);
  Rng rng(7);
  auto z0 = rng.normal_tensor({4, 4}, DType::f64);
  auto model = perfect_denoiser(z0, s);
  auto z = q_sample(z0, 10, rng.normal_tensor({4, 4}, DType::f64), s);
  Rng noise(8);
  for (int t = 10; t >= 1; --t) z = ddpm_step(z, t, model(z, t), s, noise);
  CHECK(mse(z, z0) <= 1e-2);
}

TEST_CASE("ddim_step") {
  auto s = make_linear_schedule(50, 1e-3, 0.2);
  Rng rng(9);
  auto z0 = rng.normal_tensor({3, 3}, DType::f64);
  auto eps = rng.normal_tensor({3, 3}, DType::f64);
  auto zt = q_sample(z0, 50, eps, s);

  CHECK(ddim_step(zt, 50, 20, eps, s, 0.0).to_vector() == ddim_step(zt, 50, 20, eps, s, 0.0).to_vector());

  auto one_shot = ddim_step(zt, 50, 0, eps, s, 0.0);
  const double ab = s.alpha_bar_at(50);
  auto inverted = scale(sub(zt, scale(eps, std::sqrt(1 - ab))), 1 / std::sqrt(ab));
  CHECK(one_shot.to_vector() == inverted.to_vector());
  CHECK(max_abs_diff(one_shot.to_vector(), z0.to_vector()) <= 1e-9);

  auto model = perfect_denoiser(z0, s);
  auto z = zt;
  const auto ts = timestep_sequence(50, 5);
  CHECK(ts == std::vector<int>{50, 40, 30, 20, 10});
  for (std::size_t i = 0; i < ts.size(); ++i) z = ddim_step(z, ts[i], i + 1 < ts.size() ? ts[i + 1] : 0, model(z, ts[i]), s, 0.0);
  CHECK(mse(z, z0) <= 1e-6);

  CHECK_THROWS_AS(ddim_step(zt, 20, 20, eps, s, 0.0), ValueError);
  CHECK_THROWS_AS(ddim_step(zt, 20, 30, eps, s, 0.0), ValueError);
  CHECK_THROWS_AS(ddim_step(zt, 20, 10, eps, s, 1.5), ValueError);
  CHECK_THROWS_AS(ddim_step(zt, 20, 10, eps, s, 0.5), ValueError);
  Rng noisy(1);
  CHECK(ddim_step(zt, 20, 10, eps, s, 0.5, &noisy).shape() == zt.shape());
}

TEST_CASE("timestep_sequence") {
  CHECK(timestep_sequence(10, 10) == std::vector<int>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1});
  CHECK(timestep_sequence(50, 1) == std::vector<int>{50});
  CHECK(timestep_sequence(7, 3) == std::vector<int>{7, 5, 2});
  CHECK_THROWS_AS(timestep_sequence(10, 0), ValueError);
  CHECK_THROWS_AS(timestep_sequence(10, 11), ValueError);
}

TEST_CASE("sample_loop") {
  auto s = make_linear_schedule(50, 1e-3, 0.2);
  Rng rng(11);
  auto z0 = rng.normal_tensor({2, 4, 4}, DType::f64);
  auto model = perfect_denoiser(z0, s);
  SamplerConfig ddim{Sampler::ddim, 5, 0.0};
  auto a = sample_loop(model, z0.shape(), s, ddim, 42, {}, DType::f64);
  auto b = sample_loop(model, z0.shape(), s, ddim, 42, {}, DType::f64);
  CHECK(a.to_vector() == b.to_vector());
  CHECK(mse(a, z0) <= 1e-6);

  SamplerConfig ddpm{Sampler::ddpm, 10, 0.0};
  CHECK(mse(sample_loop(model, z0.shape(), s, ddpm, 42, {}, DType::f64), z0) <= 1e-2);

  SamplerConfig none{Sampler::ddim, 0, 0.0};
  CHECK_THROWS_AS(sample_loop(model, z0.shape(), s, none, 1), ValueError);
  auto bad = [](const Tensor&, int) { return Tensor::zeros({1}); };
  CHECK_THROWS_AS(sample_loop(bad, z0.shape(), s, ddim, 1), ShapeError);
}

TEST_CASE("latent codec") {
  Rng rng(12);
  auto x = rng.normal_tensor({2, 3, 4, 4}, DType::f64);
  LatentCodec id;
  CHECK(id.decode(id.encode(x)).to_vector() == x.to_vector());

  // A signed permutation is its own transpose-inverse.
  auto enc = Tensor::from({3, 3}, {0, 1, 0, 0, 0, -1, 1, 0, 0});
  auto dec = permute(enc, {1, 0});
  auto lin = LatentCodec::linear(enc, dec);
  CHECK(max_abs_diff(lin.decode(lin.encode(x)).to_vector(), x.to_vector()) <= 1e-15);
  CHECK(lin.encode(x).shape() == x.shape());
  CHECK_THROWS_AS(LatentCodec::linear(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}
