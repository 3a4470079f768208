// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <numeric>

#include "emocast/ops.hpp"
#include "emocast/optim.hpp"
#include "emocast/rng.hpp"
#include "grad_check.hpp"

using namespace emocast;
using emocast::testing::grad_check;
using emocast::testing::max_abs_diff;

namespace {

Tensor random(Rng& rng, Shape shape, DType dtype = DType::f64) { return rng.uniform_tensor(std::move(shape), -1.0, 1.0, dtype); }

}  // namespace

TEST_CASE("matmul") {
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, m).to_vector() == m.to_vector());

  auto proj = Tensor::from({2, 2}, {1, 0, 0, 0});
  auto b = Tensor::from({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(proj, b).to_vector() == std::vector<double>{5, 6, 0, 0});

  Rng rng(7);
  auto a = random(rng, {3, 4});
  auto c = random(rng, {4, 2});
  auto got = matmul(a, c).to_vector();
  auto av = a.to_vector(), cv = c.to_vector();
  std::vector<double> expected(6, 0.0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j)
      for (int p = 0; p < 4; ++p) expected[i * 2 + j] += av[i * 4 + p] * cv[p * 2 + j];
  CHECK(max_abs_diff(got, expected) <= 1e-12);

  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  try {
    matmul(a, a);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[3x4]") != std::string::npos);
  }
}

TEST_CASE("batched matmul and matmul_nt agree with per-slice products") {
  Rng rng(3);
  auto a = random(rng, {2, 3, 4});
  auto b = random(rng, {2, 5, 4});
  auto out = matmul_nt(a, b);
  REQUIRE(out.shape() == Shape{2, 3, 5});
  for (int s = 0; s < 2; ++s) {
    auto as = reshape(slice(a, 0, s, 1), {3, 4});
    auto bs = reshape(slice(b, 0, s, 1), {5, 4});
    auto ref = matmul(as, permute(bs, {1, 0}));
    CHECK(max_abs_diff(reshape(slice(out, 0, s, 1), {3, 5}).to_vector(), ref.to_vector()) <= 1e-14);
  }
  CHECK_THROWS_AS(matmul(a, random(rng, {3, 4, 2})), ShapeError);
}

TEST_CASE("softmax") {
  auto s = softmax(Tensor::from({2}, {0, 0}), 0).to_vector();
  CHECK(s == std::vector<double>{0.5, 0.5});

  auto big = softmax(Tensor::from({3}, {1000, 1000, 1000}), 0).to_vector();
  for (double v : big) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

  auto got = softmax(Tensor::from({3}, {1, 2, 3}), 0).to_vector();
  long double total = 0;
  std::vector<long double> e;
  for (long double x : {1.0L, 2.0L, 3.0L}) {
    e.push_back(std::exp(x));
    total += e.back();
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(got[i] - static_cast<double>(e[i] / total)) <= 1e-12);

  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 0}), 1), ShapeError);
  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), ValueError);
}

TEST_CASE("softmax slices sum to one and ignore constant shifts") {
  Rng rng(11);
  for (DType dt : {DType::f32, DType::f64}) {
    const double tol = dt == DType::f32 ? 1e-6 : 1e-12;
    for (int trial = 0; trial < 20; ++trial) {
      auto x = rng.uniform_tensor({3, 5, 4}, -6.0, 6.0, dt);
      const int axis = trial % 3;
      auto y = softmax(x, axis);
      auto shifted = softmax(add(x, Tensor::full({1}, rng.uniform(-50, 50), dt)), axis);
      CHECK(max_abs_diff(y.to_vector(), shifted.to_vector()) <= (dt == DType::f32 ? 1e-5 : 1e-12));
      auto totals = sum_to_shape(y, axis == 0 ? Shape{1, 5, 4} : axis == 1 ? Shape{3, 1, 4} : Shape{3, 5, 1});
      for (double t : totals.to_vector()) CHECK(std::abs(t - 1.0) <= tol);
      for (double v : y.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
    }
  }
}

TEST_CASE("conv2d") {
  Rng rng(5);
  auto x = random(rng, {1, 4, 4});
  auto one = Tensor::from({1, 1, 1, 1}, {1});
  CHECK(conv2d(x, one).to_vector() == x.to_vector());
  auto zero = Tensor::zeros({1, 1, 3, 3});
  for (double v : conv2d(x, zero).to_vector()) CHECK(v == 0.0);

  auto in = random(rng, {2, 4, 4});
  auto k = random(rng, {3, 2, 3, 3});
  auto got = conv2d(in, k).to_vector();
  auto iv = in.to_vector(), kv = k.to_vector();
  std::vector<double> expected(3 * 16, 0.0);
  for (int co = 0; co < 3; ++co)
    for (int y = 0; y < 4; ++y)
      for (int xx = 0; xx < 4; ++xx) {
        double acc = 0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = y + ky - 1, sx = xx + kx - 1;
              if (sy < 0 || sy >= 4 || sx < 0 || sx >= 4) continue;
              acc += kv[((co * 2 + ci) * 3 + ky) * 3 + kx] * iv[(ci * 4 + sy) * 4 + sx];
            }
        expected[(co * 4 + y) * 4 + xx] = acc;
      }
  CHECK(max_abs_diff(got, expected) <= 1e-10);

  CHECK_THROWS_AS(conv2d(in, random(rng, {3, 1, 3, 3})), ShapeError);
  CHECK_THROWS_AS(conv2d(in, random(rng, {3, 2, 2, 2})), ShapeError);
}

TEST_CASE("mask_apply") {
  Rng rng(9);
  auto x = random(rng, {2, 2});
  CHECK(mask_apply(x, Tensor::ones({2, 2})).to_vector() == x.to_vector());

  auto leaf = x.clone();
  leaf.set_requires_grad(true);
  auto zeroed = mask_apply(leaf, Tensor::zeros({2, 2}));
  for (double v : zeroed.to_vector()) CHECK(v == 0.0);
  backward(sum(zeroed));
  for (double v : leaf.grad().to_vector()) CHECK(v == 0.0);

  auto checker = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto xv = x.to_vector();
  CHECK(mask_apply(x, checker).to_vector() == std::vector<double>{xv[0], 0.0, 0.0, xv[3]});

  CHECK_THROWS_AS(mask_apply(x, Tensor::full({2, 2}, 0.5)), ValueError);
  CHECK_THROWS_AS(mask_apply(x, Tensor::ones({3})), ShapeError);
}

TEST_CASE("mask_apply then sum equals sum over the mask support") {
  Rng rng(21);
  for (int trial = 0; trial < 25; ++trial) {
    auto x = random(rng, {3, 4, 5});
    auto m = Tensor::zeros({4, 5});
    auto mv = m.mutable_data<double>();
    for (auto& v : mv) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
    const double got = sum(mask_apply(x, m)).item();
    auto xv = x.to_vector();
    double expected = 0;
    for (std::size_t i = 0; i < xv.size(); ++i) expected += mv[i % 20] * xv[i];
    CHECK(std::abs(got - expected) <= 1e-12);
  }
}

TEST_CASE("mse_loss") {
  auto t = Tensor::from({3}, {1, -2, 0.5});
  CHECK(mse_loss(t, t).item() == 0.0);
  CHECK(mse_loss(add(t, Tensor::ones({3})), t).item() == doctest::Approx(1.0).epsilon(1e-15));
  Rng rng(4);
  auto p = random(rng, {4, 3});
  auto q = random(rng, {4, 3});
  auto pv = p.to_vector(), qv = q.to_vector();
  double acc = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) acc += (pv[i] - qv[i]) * (pv[i] - qv[i]);
  CHECK(std::abs(mse_loss(p, q).item() - acc / 12.0) <= 1e-12);
  CHECK_THROWS_AS(mse_loss(p, random(rng, {3, 4})), ShapeError);
}

TEST_CASE("backward basics") {
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad(true);
  backward(sum(x));
  for (double v : x.grad().to_vector()) CHECK(v == 1.0);

  auto y = Tensor::from({1}, {2});
  y.set_requires_grad(true);
  backward(mse_loss(y, Tensor::zeros({1})));
  CHECK(y.grad().to_vector() == std::vector<double>{4.0});

  auto unused = Tensor::ones({3});
  unused.set_requires_grad(true);
  auto z = Tensor::ones({2});
  z.set_requires_grad(true);
  backward(sum(scale(z, 3.0)));
  for (double v : unused.grad().to_vector()) CHECK(v == 0.0);
  CHECK(!unused.has_grad());

  auto w = Tensor::ones({2});
  w.set_requires_grad(true);
  CHECK_THROWS_AS(backward(scale(w, 2.0)), AutogradError);
}

TEST_CASE("tape is topologically ordered and consumed exactly once") {
  auto a = Tensor::from({2}, {1, 2});
  a.set_requires_grad(true);
  auto b = scale(a, 2.0);
  auto c = mul(b, a);
  auto loss = sum(add(c, b));
  auto tape = Tape::collect(loss);
  REQUIRE(tape.size() == 4);
  for (std::size_t i = 1; i < tape.size(); ++i) CHECK(tape.nodes()[i - 1]->sequence > tape.nodes()[i]->sequence);
  CHECK(tape.op_names().front() == "sum");
  CHECK(tape.op_names().back() == "scale");
  backward(loss);
  // d/da sum(2a*a + 2a) = 4a + 2
  CHECK(a.grad().to_vector() == std::vector<double>{6.0, 10.0});
  CHECK_THROWS_AS(backward(loss), AutogradError);
}

TEST_CASE("shared leaf accumulates gradient from every use") {
  auto w = Tensor::from({1}, {3});
  w.set_requires_grad(true);
  backward(sum(add(mul(w, w), mul(w, w))));
  CHECK(w.grad().to_vector() == std::vector<double>{12.0});
}

TEST_CASE("finite-difference gradient check for every differentiable op") {
  Rng rng(1234);
  auto x34 = random(rng, {3, 4});
  auto x42 = random(rng, {4, 2});
  auto b234 = random(rng, {2, 3, 4});
  auto b254 = random(rng, {2, 5, 4});
  auto img = random(rng, {2, 2, 4, 4});
  auto kern = random(rng, {3, 2, 3, 3});
  auto bias = random(rng, {3});
  auto row = random(rng, {4});
  auto mask = Tensor::from({4}, {1, 0, 1, 1});
  auto target = random(rng, {3, 4});
  std::vector<int> labels{0, 3, 1};

  struct Case {
    const char* name;
    emocast::testing::LossFn fn;
    std::vector<Tensor> inputs;
  };
  // Weighted sums make every output coordinate matter with a distinct weight.
  auto weighted = [](const Tensor& t) {
    auto w = Tensor::zeros(t.shape());
    auto d = w.mutable_data<double>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
    return sum(mul(t, w));
  };
  std::vector<Case> cases{
      {"matmul", [&](auto& in) { return weighted(matmul(in[0], in[1])); }, {x34, x42}},
      {"matmul_batched_weight", [&](auto& in) { return weighted(matmul(in[0], in[1])); }, {b234, x42}},
      {"matmul_nt_batched", [&](auto& in) { return weighted(matmul_nt(in[0], in[1])); }, {b234, b254}},
      {"add_broadcast", [&](auto& in) { return weighted(add(in[0], in[1])); }, {b234, row}},
      {"sub_broadcast", [&](auto& in) { return weighted(sub(in[0], in[1])); }, {x34, row}},
      {"mul_broadcast", [&](auto& in) { return weighted(mul(in[0], in[1])); }, {b234, row}},
      {"scale", [&](auto& in) { return weighted(scale(in[0], -1.7)); }, {x34}},
      {"silu", [&](auto& in) { return weighted(silu(in[0])); }, {x34}},
      {"mask_apply", [&](auto& in) { return weighted(mask_apply(in[0], mask)); }, {x34}},
      {"concat", [&](auto& in) { return weighted(concat({in[0], in[1]}, 1)); }, {b234, b254}},
      {"slice", [&](auto& in) { return weighted(slice(in[0], 1, 1, 2)); }, {b234}},
      {"reshape", [&](auto& in) { return weighted(reshape(in[0], {4, 3})); }, {x34}},
      {"permute", [&](auto& in) { return weighted(permute(in[0], {2, 0, 1})); }, {b234}},
      {"repeat_rows", [&](auto& in) { return weighted(repeat_rows(in[0], 3)); }, {b234}},
      {"softmax", [&](auto& in) { return weighted(softmax(in[0], 1)); }, {b234}},
      {"conv2d", [&](auto& in) { return weighted(conv2d(in[0], in[1], in[2])); }, {img, kern, bias}},
      {"avg_pool2d", [&](auto& in) { return weighted(avg_pool2d(in[0], 2)); }, {img}},
      {"upsample", [&](auto& in) { return weighted(upsample_nearest2d(in[0], 2)); }, {img}},
      {"sum_to_shape", [&](auto& in) { return weighted(sum_to_shape(in[0], {1, 3, 1})); }, {b234}},
      {"mean", [&](auto& in) { return mean(mul(in[0], in[0])); }, {x34}},
      {"mse_loss", [&](auto& in) { return mse_loss(in[0], in[1]); }, {x34, target}},
      {"cross_entropy", [&](auto& in) { return cross_entropy(in[0], labels); }, {x34}},
  };
  for (auto& c : cases) {
    CAPTURE(c.name);
    std::vector<Tensor> inputs;
    for (const auto& t : c.inputs) inputs.push_back(t.clone());
    auto r = grad_check(c.fn, inputs);
    CAPTURE(r.first_failure);
    CHECK(r.passed);
    CHECK(r.checked > 0);
  }
}

TEST_CASE("ops are bit-deterministic") {
  Rng r1(99), r2(99);
  auto a1 = random(r1, {2, 3, 8}, DType::f32), a2 = random(r2, {2, 3, 8}, DType::f32);
  auto k1 = random(r1, {4, 3, 3, 3}, DType::f32), k2 = random(r2, {4, 3, 3, 3}, DType::f32);
  auto run = [](const Tensor& a, const Tensor& k) {
    auto img = reshape(a, {2, 3, 2, 4});
    return softmax(silu(conv2d(img, k)), -1).to_vector();
  };
  CHECK(run(a1, k1) == run(a2, k2));
}

TEST_CASE("optimizer_step") {
  auto p = Tensor::from({1}, {0});
  OptimizerState sgd(OptimizerConfig{OptimizerMode::sgd, 0.1});
  std::vector<Tensor> params{p};
  std::vector<Tensor> grads{Tensor::from({1}, {1})};
  optimizer_step(params, grads, sgd);
  CHECK(p.to_vector()[0] == doctest::Approx(-0.1).epsilon(1e-15));

  auto q = Tensor::from({2}, {0.5, -0.25});
  std::vector<Tensor> qp{q};
  std::vector<Tensor> zg{Tensor::zeros({2})};
  optimizer_step(qp, zg, sgd);
  CHECK(q.to_vector() == std::vector<double>{0.5, -0.25});

  // Scalar Adam oracle, first step: m = (1-b1) g, v = (1-b2) g^2, bias-corrected.
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 0.37, p0 = 1.5;
  const double m = (1 - b1) * g, v = (1 - b2) * g * g;
  const double expected = p0 - lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  auto r = Tensor::from({1}, {p0});
  std::vector<Tensor> rp{r};
  std::vector<Tensor> rg{Tensor::from({1}, {g})};
  OptimizerState adam(OptimizerConfig{OptimizerMode::adam, lr, b1, b2, eps});
  optimizer_step(rp, rg, adam);
  CHECK(std::abs(r.to_vector()[0] - expected) <= 1e-12);
  CHECK(adam.step == 1);
  CHECK(adam.first_moment[0].shape() == r.shape());

  std::vector<Tensor> bad{Tensor::zeros({3})};
  CHECK_THROWS_AS(optimizer_step(rp, bad, adam), ShapeError);
}

TEST_CASE("rng streams are reproducible and splittable") {
  Rng a(42), b(42);
  for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
  auto c1 = a.split("noise"), c2 = b.split("noise"), c3 = a.split("init");
  CHECK(c1.next_u64() == c2.next_u64());
  CHECK(c1.next_u64() != c3.next_u64());

  Rng s(5);
  s.next_u32();
  auto st = s.state();
  auto restored = Rng::from_state(st);
  for (int i = 0; i < 9; ++i) CHECK(s.next_u32() == restored.next_u32());

  Rng n(8);
  double mean_v = 0, sq = 0;
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const double v = n.normal();
    mean_v += v;
    sq += v * v;
  }
  mean_v /= draws;
  CHECK(std::abs(mean_v) < 4.0 / std::sqrt(draws));
  CHECK(std::abs(sq / draws - 1.0) < 0.05);
}
