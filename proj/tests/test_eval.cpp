// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstdlib>

#include <json.hpp>

#include "emocast/eval.hpp"
#include "emocast/ops.hpp"
#include "emocast/stats.hpp"

using namespace emocast;

namespace {

// Direct two-pass Pearson formula in long double.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

SyntheticWorldConfig two_emotion_world() {
  SyntheticWorldConfig w;
  w.identities = 3;
  w.emotions = {Emotion::neutral, Emotion::happy};
  w.clips_per_cell = 2;
  w.frames_per_clip = 24;
  w.seed = 4;
  return w;
}

Tensor render_track(const SyntheticWorldConfig& config, const std::vector<double>& energy) {
  FaceRenderer renderer(config);
  std::vector<Tensor> frames;
  for (double e : energy) frames.push_back(renderer.render(0, Emotion::neutral, 0.0, e, 0.2));
  return reshape(concat(frames, 0), {static_cast<std::int64_t>(energy.size()), config.channels, config.height, config.width});
}

}  // namespace

TEST_CASE("probe separates the clean two-emotion world") {
  auto world = synth_generate(two_emotion_world());
  const auto masks = world.config.masks();
  ProbeConfig pc;
  auto probe = train_probe(world.manifest, world.store, masks.exp, pc, 1);
  CHECK(probe.heldout_accuracy >= 0.99);
  CHECK(probe.pixels.size() == 40);
  auto again = train_probe(world.manifest, world.store, masks.exp, pc, 1);
  CHECK(again.w1.to_vector() == probe.w1.to_vector());
  CHECK(again.heldout_accuracy == probe.heldout_accuracy);

  for (const auto& r : world.manifest.records()) {
    const auto& frames = world.store.get(r.frames_ref);
    CHECK(emotion_accuracy(frames, r.emotion_label, probe) >= 0.99);
    const Emotion wrong = r.emotion_label == Emotion::neutral ? Emotion::happy : Emotion::neutral;
    CHECK(emotion_accuracy(frames, wrong, probe) <= 0.05);
  }
  CHECK_THROWS_AS(emotion_accuracy(Tensor::zeros({0, 1, 16, 16}, DType::f32), Emotion::happy, probe), ValueError);
  CHECK_THROWS_AS(emotion_accuracy(Tensor::zeros({2, 1, 8, 8}, DType::f32), Emotion::happy, probe), ShapeError);
}

TEST_CASE("probe needs two populated classes") {
  auto cfg = two_emotion_world();
  cfg.emotions = {Emotion::neutral};
  auto world = synth_generate(cfg);
  CHECK_THROWS_AS(train_probe(world.manifest, world.store, world.config.masks().exp, {}, 0), DataError);
  cfg = two_emotion_world();
  cfg.identities = 1;
  cfg.clips_per_cell = 1;
  cfg.frames_per_clip = 10;
  auto small = synth_generate(cfg);
  CHECK_THROWS_AS(train_probe(small.manifest, small.store, small.config.masks().exp, {}, 0), DataError);
}

TEST_CASE("lip_sync_correlation") {
  const auto cfg = two_emotion_world();
  const auto lip = cfg.masks().lip;
  Rng rng(5);
  std::vector<double> energy;
  for (int i = 0; i < 40; ++i) energy.push_back(rng.uniform(0.0, 1.0));
  const auto frames = render_track(cfg, energy);
  CHECK(std::abs(lip_sync_correlation(energy, frames, lip) - 1.0) <= 1e-9);

  std::vector<double> reversed(energy.rbegin(), energy.rend());
  const auto lip_means = region_means(frames, lip);
  CHECK(lip_sync_correlation(reversed, frames, lip) == doctest::Approx(pearson_oracle(reversed, lip_means)).epsilon(1e-12));

  std::vector<double> flat(40, 0.5);
  CHECK_THROWS_AS(lip_sync_correlation(flat, frames, lip), UndefinedCorrelation);
  CHECK_THROWS_AS(lip_sync_correlation(std::vector<double>{0.5}, slice(frames, 0, 0, 1), lip), ValueError);
  CHECK_THROWS_AS(lip_sync_correlation(energy, slice(frames, 0, 0, 5), lip), ShapeError);
}

TEST_CASE("pearson is symmetric and affine invariant") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> x, y, x2;
    const double a = rng.uniform(0.1, 10.0), b = rng.uniform(-5.0, 5.0);
    for (int i = 0; i < 20; ++i) {
      x.push_back(rng.normal());
      y.push_back(0.3 * x.back() + rng.normal());
      x2.push_back(a * x.back() + b);
    }
    const double r = pearson(x, y);
    CHECK(r == doctest::Approx(pearson(y, x)).epsilon(1e-12));
    CHECK(r == doctest::Approx(pearson(x2, y)).epsilon(1e-9));
    CHECK(r == doctest::Approx(pearson_oracle(x, y)).epsilon(1e-12));
    CHECK(std::abs(r) <= 1.0);
  }
}

TEST_CASE("reconstruction_mse") {
  Rng rng(7);
  auto a = rng.normal_tensor({3, 1, 4, 4}, DType::f64);
  CHECK(reconstruction_mse(a, a) == 0.0);
  CHECK(reconstruction_mse(add(a, Tensor::ones(a.shape())), a) == doctest::Approx(1.0).epsilon(1e-15));
  auto b = rng.normal_tensor({3, 1, 4, 4}, DType::f64);
  const auto va = a.to_vector(), vb = b.to_vector();
  long double s = 0;
  for (std::size_t i = 0; i < va.size(); ++i) s += (static_cast<long double>(va[i]) - vb[i]) * (va[i] - vb[i]);
  CHECK(std::abs(reconstruction_mse(a, b) - static_cast<double>(s / va.size())) <= 1e-12);
  CHECK_THROWS_AS(reconstruction_mse(a, slice(b, 0, 0, 2)), ShapeError);
}

TEST_CASE("EvalReport accuracy and JSON layout") {
  EvalReport r;
  r.confusion[0][0] = 5;
  r.confusion[0][5] = 1;
  r.confusion[5][5] = 3;
  r.confusion[1][0] = 3;
  CHECK(r.emotion_accuracy() == doctest::Approx(8.0 / 12.0));
  r.lip_sync = 1.0 / 3.0;
  r.reconstruction_mse = 2.0 / 3.0;
  r.config_hash = "abc";
  r.seed = 9;
  const auto text = r.to_json();
  CHECK(text.find("\"schema_version\": 1") < text.find("\"ablation\""));
  CHECK(text.find("0.333333333") != std::string::npos);
  CHECK(text.find("0.666666667") != std::string::npos);
  const auto j = nlohmann::json::parse(text);
  CHECK(j["fid"] == "out of scope");
  CHECK(j["confusion"]["counts"][0][0] == 5);
  CHECK(j["confusion"]["labels"][5] == "happy");
  CHECK(j["emotion_accuracy"].get<double>() == doctest::Approx(0.666666667).epsilon(1e-12));
  EvalReport empty;
  CHECK_THROWS_AS(empty.emotion_accuracy(), ValueError);
}

TEST_CASE("experiment config JSON") {
  auto c = desk_experiment();
  c.seed = 17;
  c.world.emotions = {Emotion::neutral, Emotion::sad};
  c.model.decoupled = false;
  const auto text = experiment_to_json(c);
  auto back = experiment_from_json(text);
  CHECK(experiment_to_json(back) == text);
  CHECK(back.seed == 17);
  CHECK(back.world.emotions == c.world.emotions);
  CHECK_FALSE(back.model.decoupled);
  CHECK(experiment_from_json("{}").seed == desk_experiment().seed);
  CHECK_THROWS_WITH_AS(experiment_from_json(R"({"sede": 1})"), doctest::Contains("unknown key 'sede'"), ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"model": {"height": 12}})"), ValueError);
  CHECK_THROWS_AS(experiment_from_json(R"({"spatial": {"phase_steps": [1, 2]}})"), ValueError);
  CHECK_THROWS_AS(experiment_from_json("{"), ValueError);
  CHECK(arch_from_json(arch_to_json(c.model)).channels == c.model.channels);

  auto partial = experiment_from_json(R"({"model": {"text_tokens": 2}, "world": {"seed": 9}, "eval": {"heldout_tracks": 1}})");
  auto expected = desk_experiment();
  expected.model.text_tokens = 2;
  expected.world.seed = 9;
  expected.eval.heldout_tracks = 1;
  CHECK(experiment_to_json(partial) == experiment_to_json(expected));
}

TEST_CASE("EMOCAST_SEED overrides the configured seed") {
  ::unsetenv("EMOCAST_SEED");
  CHECK(effective_seed(4) == 4);
  ::setenv("EMOCAST_SEED", "123", 1);
  CHECK(effective_seed(4) == 123);
  ::setenv("EMOCAST_SEED", "12x", 1);
  CHECK_THROWS_AS(effective_seed(4), ValueError);
  ::unsetenv("EMOCAST_SEED");
}

TEST_CASE("ablation configs") {
  const auto base = desk_experiment();
  CHECK_FALSE(ablated_config("no_decoupled", base).model.decoupled);
  CHECK_FALSE(ablated_config("no_emotive_audio", base).model.emotive_audio);
  auto sampling = ablated_config("no_emotion_aware_sampling", base);
  for (Stage s : {Stage::spatial, Stage::temporal})
    for (const auto& p : sampling.train_config(s).curriculum.phases) CHECK(p.sampler == SamplerMode::intra_video);
  auto single = ablated_config("no_progressive", base).train_config(Stage::spatial);
  CHECK(single.curriculum.phases.size() == 1);
  CHECK(single.curriculum.total_steps() == base.spatial.total());
  CHECK(base.train_config(Stage::spatial).curriculum.phases.size() == 3);
  CHECK_THROWS_AS(ablated_config("no_attention", base), ValueError);
  for (const char* name : kAblations) CHECK(experiment_hash(ablated_config(name, base)) == experiment_hash(base));
  auto other = base;
  other.seed = 1;
  CHECK(experiment_hash(other) != experiment_hash(base));
}

TEST_CASE("run_ablation pairs two runs with shared seeds") {
  auto c = desk_experiment();
  c.world.identities = 1;
  c.world.emotions = {Emotion::neutral, Emotion::happy};
  c.world.wild_clips_per_cell = 1;
  c.world.frames_per_clip = 24;
  c.model.frames = 4;
  c.spatial = {3, 2, 1, 1, 1e-3, 1.0, 1.0, true};
  c.temporal = {1, 1, 1, 1, 1e-3, 1.0, 1.0, true};
  c.eval.heldout_frames = 4;
  c.eval.heldout_tracks = 1;
  c.eval.sampler.steps = 2;
  c.eval.probe.epochs = 20;
  auto r = run_ablation("no_progressive", c);
  CHECK(r.base.seed == r.ablated.seed);
  CHECK(r.base.config_hash == r.ablated.config_hash);
  CHECK(r.base.ablation == "none");
  CHECK(r.ablated.ablation == "no_progressive");
  CHECK(r.base.spatial_loss.size() == 6);
  CHECK(r.ablated.temporal_loss.size() == 3);
  std::int64_t total = 0;
  for (const auto& row : r.base.confusion)
    for (auto n : row) total += n;
  CHECK(total == 2 * 4);
  CHECK_THROWS_AS(run_ablation("bogus", c), ValueError);
}
