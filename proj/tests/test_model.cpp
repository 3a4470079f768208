// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <limits>

#include "emocast/config.hpp"
#include "emocast/model.hpp"
#include "emocast/ops.hpp"
#include "emocast/trainer.hpp"
#include "grad_check.hpp"

using namespace emocast;
using emocast::testing::grad_check;

namespace {

ArchConfig tiny_arch(DType dtype = DType::f64) {
  ArchConfig c;
  c.height = 8;
  c.width = 8;
  c.lip = {5, 2, 2, 4};
  c.exp = {1, 1, 2, 6};
  c.pose = {3, 5, 2, 2};
  c.channels = {3, 4};
  c.head_dim = 4;
  c.time_dim = 4;
  c.d_face = 4;
  c.d_text = 4;
  c.audio_features = 2;
  c.frames = 2;
  c.diffusion_steps = 10;
  c.dtype = dtype;
  return c;
}

// Closed-form parameter count, derived from the block layout independently of the model code.
std::int64_t count_oracle(const ArchConfig& c) {
  const std::int64_t d = c.head_dim, td = c.time_dim, ci = c.image_channels;
  const std::int64_t d_audio = c.audio_features + 2 * c.audio_radius + 1;
  auto conv = [](std::int64_t out, std::int64_t in, std::int64_t k) { return out * in * k * k; };
  auto res = [&](std::int64_t in, std::int64_t out, std::int64_t t) {
    return conv(out, in, 3) + out + (t > 0 ? t * out + out : 0) + conv(out, out, 3) + out + (in != out ? out * in : 0);
  };
  const auto& ch = c.channels;
  const std::int64_t c0 = ch[0];
  std::int64_t n = conv(c0, ci, 3) + c0 + c0 * c.height * c.width;
  for (std::size_t l = 0; l < ch.size(); ++l) n += res(l == 0 ? c0 : ch[l - 1], ch[l], 0);
  n += conv(c0, ci, 3) + c0 + c0 * c.height * c.width + 2 * (td * td + td);
  if (c.emotive_audio) n += c.d_text * d + 2 * d_audio * d;
  const std::int64_t ctx = c.emotive_audio ? d : d_audio;
  for (std::size_t l = 0; l < ch.size(); ++l) {
    const std::int64_t w = ch[l];
    n += res(l == 0 ? c0 : ch[l - 1], w, td);
    n += 3 * w * d + d * w;
    n += c.decoupled ? w * d + 2 * c.d_face * d + 2 * c.d_text * d + d * w : w * d + 2 * c.d_text * d + d * w;
    n += 3 * (w * d + 2 * ctx * d + d * w);
    n += w * 3 * w;
    n += 3 * w * d + d * w;
  }
  for (std::size_t l = 0; l + 1 < ch.size(); ++l) n += res(ch[l] + ch[l + 1], ch[l], td);
  n += conv(ci, c0, 3) + ci;
  return n;
}

Conditions random_conditions(const EmoCastModel& m, Rng& rng, std::int64_t frames) {
  const auto& c = m.config;
  auto ref = rng.uniform_tensor({c.image_channels, c.height, c.width}, 0, 1, c.dtype);
  auto audio = rng.uniform_tensor({12, c.audio_features}, 0, 1, c.dtype);
  std::vector<std::int64_t> idx;
  for (std::int64_t i = 0; i < frames; ++i) idx.push_back(3 + i);
  return make_conditions(m, ref, Emotion::happy, 0.8, audio, idx);
}

void randomize(EmoCastModel& m, Rng& rng) {
  for (auto& [_, p] : m.named_parameters()) {
    auto v = p.mutable_data<double>();
    for (auto& x : v) x = rng.uniform(-0.5, 0.5);
  }
}

}  // namespace

TEST_CASE("build_model is deterministic in the seed") {
  auto a = build_model(tiny_arch(), 3), b = build_model(tiny_arch(), 3), c = build_model(tiny_arch(), 4);
  auto pa = a.named_parameters(), pb = b.named_parameters(), pc = c.named_parameters();
  REQUIRE(pa.size() == pb.size());
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].first == pb[i].first);
    CHECK(pa[i].second.to_vector() == pb[i].second.to_vector());
    any_diff = any_diff || pa[i].second.to_vector() != pc[i].second.to_vector();
  }
  CHECK(any_diff);
  for (const auto& [name, t] : pa) {
    for (double v : t.to_vector()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("parameter count matches the closed-form oracle") {
  for (bool decoupled : {true, false})
    for (bool emotive : {true, false})
      for (auto channels : {std::vector<std::int64_t>{3}, std::vector<std::int64_t>{3, 4}, std::vector<std::int64_t>{2, 2, 5}}) {
        auto c = tiny_arch();
        c.decoupled = decoupled;
        c.emotive_audio = emotive;
        c.channels = channels;
        CHECK(build_model(c, 0).parameter_count() == count_oracle(c));
      }
  CHECK(build_model(ArchConfig{}, 0).parameter_count() == count_oracle(ArchConfig{}));
}

TEST_CASE("zero-initialized output projections") {
  auto m = build_model(tiny_arch(), 1);
  for (const auto& [name, t] : m.named_parameters()) {
    const bool zero_init = name.find(".combiner") != std::string::npos ||
                           (EmoCastModel::is_temporal(name) && name.find(".w_o") != std::string::npos);
    if (zero_init) {
      for (double v : t.to_vector()) CHECK(v == 0.0);
    }
  }
  Rng rng(2);
  auto cond = random_conditions(m, rng, 2);
  auto z = rng.normal_tensor({2, 1, 8, 8}, DType::f64);
  CHECK(predict_noise(m, z, 4, cond, Stage::temporal).to_vector() == predict_noise(m, z, 4, cond, Stage::spatial).to_vector());
  auto z1 = rng.normal_tensor({1, 1, 8, 8}, DType::f64);
  auto c1 = random_conditions(m, rng, 1);
  CHECK(predict_noise(m, z1, 9, c1, Stage::temporal).to_vector() == predict_noise(m, z1, 9, c1, Stage::spatial).to_vector());
}

TEST_CASE("predict_noise keeps the input shape") {
  Rng rng(3);
  for (auto channels : {std::vector<std::int64_t>{3}, std::vector<std::int64_t>{3, 4}, std::vector<std::int64_t>{2, 3, 4}})
    for (bool decoupled : {true, false})
      for (bool emotive : {true, false})
        for (std::int64_t frames : {1, 3}) {
          auto c = tiny_arch(DType::f32);
          c.channels = channels;
          c.text_tokens = frames;
          c.decoupled = decoupled;
          c.emotive_audio = emotive;
          auto m = build_model(c, 5);
          auto z = rng.normal_tensor({frames, 1, 8, 8}, DType::f32);
          auto out = predict_noise(m, z, 1, random_conditions(m, rng, frames), Stage::temporal);
          CHECK(out.shape() == z.shape());
          CHECK(out.dtype() == DType::f32);
        }
}

TEST_CASE("predict_noise reports the missing condition") {
  auto m = build_model(tiny_arch(), 1);
  Rng rng(4);
  auto z = rng.normal_tensor({2, 1, 8, 8}, DType::f64);
  auto full = random_conditions(m, rng, 2);
  auto c = full;
  c.e_f = Tensor();
  CHECK_THROWS_WITH_AS(predict_noise(m, z, 1, c, Stage::temporal), doctest::Contains("e_f"), ValueError);
  c = full;
  c.e_t = Tensor();
  CHECK_THROWS_WITH_AS(predict_noise(m, z, 1, c, Stage::temporal), doctest::Contains("e_t"), ValueError);
  c = full;
  c.e_a = Tensor();
  CHECK_THROWS_WITH_AS(predict_noise(m, z, 1, c, Stage::temporal), doctest::Contains("e_a"), ValueError);
  c = full;
  c.reference.pop_back();
  CHECK_THROWS_WITH_AS(predict_noise(m, z, 1, c, Stage::temporal), doctest::Contains("reference"), ValueError);
  CHECK_THROWS_AS(predict_noise(m, z, 0, full, Stage::temporal), ValueError);
  CHECK_THROWS_AS(predict_noise(m, z, 11, full, Stage::temporal), ValueError);
  CHECK_THROWS_AS(predict_noise(m, rng.normal_tensor({3, 1, 8, 8}, DType::f64), 1, full, Stage::temporal), ShapeError);
}

TEST_CASE("build_model rejects invalid configs") {
  auto c = tiny_arch();
  c.channels = {2, 2, 2, 2, 2};
  CHECK_THROWS_AS(build_model(c, 0), ValueError);
  c = tiny_arch();
  c.lip = {7, 0, 2, 2};
  CHECK_THROWS_AS(build_model(c, 0), ValueError);
  c = tiny_arch();
  c.decoupled = false;
  c.d_face = 6;
  CHECK_THROWS_AS(build_model(c, 0), ValueError);
  c = tiny_arch();
  c.time_dim = 3;
  CHECK_THROWS_AS(build_model(c, 0), ValueError);
  c = tiny_arch();
  c.text_tokens = 0;
  CHECK_THROWS_AS(build_model(c, 0), ValueError);
}

TEST_CASE("full-model gradient check") {
  for (std::int64_t variant : {0, 1, 2}) {
    auto c = tiny_arch();
    c.decoupled = variant != 1;
    c.text_tokens = variant == 2 ? 2 : 1;
    auto m = build_model(c, 7);
    Rng rng(8 + static_cast<std::uint64_t>(variant));
    randomize(m, rng);
    auto z = rng.normal_tensor({2, 1, 8, 8}, DType::f64);
    auto target = rng.normal_tensor({2, 1, 8, 8}, DType::f64);
    auto ref = rng.uniform_tensor({1, 8, 8}, 0, 1, DType::f64);
    auto audio = rng.uniform_tensor({6, 2}, 0, 1, DType::f64);
    std::vector<std::int64_t> idx{1, 2};
    std::vector<Tensor> inputs;
    for (auto& [_, p] : m.named_parameters()) inputs.push_back(p);
    inputs.push_back(z);
    auto loss = [&](const std::vector<Tensor>&) {
      auto cond = make_conditions(m, ref, Emotion::angry, 0.7, audio, idx);
      return mse_loss(predict_noise(m, z, 6, cond, Stage::temporal), target);
    };
    auto result = grad_check(loss, inputs);
    INFO(result.first_failure);
    CHECK(result.passed);
    CHECK(result.checked > 1000);
  }
}

TEST_CASE("generate is seeded and checks the audio length") {
  auto m = build_model(tiny_arch(DType::f32), 2);
  Rng rng(9);
  GenerateRequest req;
  req.reference_frame = rng.uniform_tensor({1, 8, 8}, 0, 1, DType::f32);
  req.audio_track = rng.uniform_tensor({5, 2}, 0, 1, DType::f32);
  req.emotion = Emotion::sad;
  req.intensity = 1.0;
  req.seed = 11;
  req.sampler.steps = 3;
  auto a = generate(m, req), b = generate(m, req);
  CHECK(a.shape() == Shape{2, 1, 8, 8});
  CHECK(a.to_vector() == b.to_vector());
  req.seed = 12;
  CHECK(generate(m, req).to_vector() != a.to_vector());
  req.start_frame = 4;
  CHECK_THROWS_AS(generate(m, req), ValueError);
  req.start_frame = 0;
  req.frames = 6;
  CHECK_THROWS_AS(generate(m, req), ValueError);
}

namespace {

SyntheticWorldConfig tiny_world() {
  SyntheticWorldConfig w;
  w.identities = 2;
  w.emotions = {Emotion::neutral, Emotion::happy};
  w.height = 8;
  w.width = 8;
  w.lip = {5, 2, 2, 4};
  w.exp = {1, 1, 2, 6};
  w.pose = {3, 5, 2, 2};
  w.frames_per_clip = 6;
  w.audio_features = 2;
  w.wild_clips_per_cell = 1;
  w.wild_shuffled_fraction = 0.5;
  return w;
}

TrainConfig tiny_train(Stage stage, std::uint64_t seed = 1) {
  TrainConfig t;
  t.stage = stage;
  t.curriculum = progressive_curriculum(4, 3, 3);
  t.batch_size = 2;
  t.window = 2;
  t.seed = seed;
  return t;
}

}  // namespace

TEST_CASE("training is deterministic and honours the curriculum") {
  auto world = synth_generate(tiny_world());
  auto run = [&](std::uint64_t seed) {
    auto m = build_model(tiny_arch(DType::f32), 1);
    Trainer trainer(m, world.manifest, world.store, tiny_train(Stage::spatial, seed));
    trainer.set_batch_hook([&](std::int64_t step, const std::vector<TrainingPair>& batch) {
      const auto& phase = trainer.config().curriculum.phases[curriculum_phase(step, trainer.config().curriculum)];
      for (const auto& p : batch) {
        CHECK(p.target_window.dim(0) == 1);
        CHECK(phase.allowed_tags.count(p.target_source) == 1);
        CHECK(phase.allowed_tags.count(p.reference_source) == 1);
        if (phase.neutral_only) CHECK(p.emotion == Emotion::neutral);
      }
    });
    trainer.run();
    CHECK(trainer.done());
    return trainer.state().loss_trace;
  };
  auto a = run(1), b = run(1), c = run(2);
  CHECK(a.size() == 10);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("stage contract: frozen parameters get no gradient") {
  auto world = synth_generate(tiny_world());
  auto m = build_model(tiny_arch(DType::f32), 1);
  {
    Trainer spatial(m, world.manifest, world.store, tiny_train(Stage::spatial));
    spatial.step();
    for (const auto& [name, norm] : spatial.last_grad_norms()) {
      if (EmoCastModel::is_temporal(name)) CHECK(norm == 0.0);
    }
    double total = 0;
    for (const auto& [_, norm] : spatial.last_grad_norms()) total += norm;
    CHECK(total > 0);
  }
  auto before = m.named_parameters();
  std::vector<std::vector<double>> values;
  for (auto& [_, t] : before) values.push_back(t.to_vector());
  {
    Trainer temporal(m, world.manifest, world.store, tiny_train(Stage::temporal));
    temporal.step();
    temporal.step();
    bool temporal_moved = false;
    for (std::size_t i = 0; i < before.size(); ++i) {
      const auto& [name, t] = before[i];
      if (EmoCastModel::is_temporal(name)) {
        temporal_moved = temporal_moved || t.to_vector() != values[i];
      } else {
        CHECK(temporal.last_grad_norms().at(name) == 0.0);
        CHECK(t.to_vector() == values[i]);
      }
    }
    CHECK(temporal_moved);
  }
  auto cfg = tiny_train(Stage::temporal);
  cfg.freeze_spatial = false;
  Trainer finetune(m, world.manifest, world.store, cfg);
  finetune.step();
  CHECK(finetune.last_grad_norms().at("conv_out") > 0.0);
  CHECK(finetune.trainable().size() == m.named_parameters().size());
}

TEST_CASE("non-finite loss aborts training") {
  auto world = synth_generate(tiny_world());
  auto m = build_model(tiny_arch(DType::f32), 1);
  m.bias_out.mutable_data<float>()[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer trainer(m, world.manifest, world.store, tiny_train(Stage::spatial));
  CHECK_THROWS_WITH_AS(trainer.step(), doctest::Contains("non-finite loss"), TrainingError);
  CHECK(trainer.state().step == 0);
}

TEST_CASE("checkpoint round trip and resume") {
  auto world = synth_generate(tiny_world());
  auto m = build_model(tiny_arch(DType::f32), 1);
  auto cfg = tiny_train(Stage::spatial);
  Trainer full(m, world.manifest, world.store, cfg);
  std::string saved;
  for (int i = 0; i < 10; ++i) {
    if (i == 5) saved = encode_checkpoint(make_checkpoint(m, Stage::spatial, full.state()));
    full.step();
  }
  auto restored = decode_checkpoint(saved);
  CHECK(encode_checkpoint(restored) == saved);
  CHECK(checkpoint_stage(restored) == Stage::spatial);
  auto m2 = model_from_checkpoint(restored);
  CHECK(encode_checkpoint(make_checkpoint(m2, Stage::spatial, restored.train)) == saved);
  Trainer resumed(m2, world.manifest, world.store, cfg);
  resumed.restore(restored.train);
  resumed.run(10);
  CHECK(resumed.state().loss_trace == full.state().loss_trace);
  auto p1 = m.named_parameters(), p2 = m2.named_parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i].second.to_vector() == p2[i].second.to_vector());

  auto other = cfg;
  other.seed = 99;
  Trainer wrong(m2, world.manifest, world.store, other);
  CHECK_THROWS_AS(wrong.restore(restored.train), ValueError);
}

TEST_CASE("checkpoint errors are distinct") {
  auto m = build_model(tiny_arch(DType::f32), 1);
  TrainState state;
  state.step = 3;
  state.loss_trace = {1.0, 0.5, 0.25};
  const auto bytes = encode_checkpoint(make_checkpoint(m, Stage::temporal, state));
  CHECK(bytes.substr(0, 4) == "EMCK");
  auto decoded = decode_checkpoint(bytes);
  CHECK(decoded.train.loss_trace == state.loss_trace);
  CHECK(decoded.train.step == 3);
  CHECK(checkpoint_stage(decoded) == Stage::temporal);

  auto corrupt = bytes;
  corrupt[bytes.size() - 40] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(corrupt), CheckpointChecksumError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), CheckpointTruncatedError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 30)), CheckpointTruncatedError);
  auto version = bytes;
  version[4] = 7;
  CHECK_THROWS_AS(decode_checkpoint(version), CheckpointVersionError);
  CHECK_THROWS_AS(decode_checkpoint("XXXX" + bytes.substr(4)), CheckpointError);

  auto dir = std::filesystem::temp_directory_path() / "emocast_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir / "a.emck", decoded);
  auto again = load_checkpoint(dir / "a.emck");
  save_checkpoint(dir / "b.emck", again);
  CHECK(encode_checkpoint(again) == bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.emck"), CheckpointError);
}

TEST_CASE("spatial stage forces single frames; temporal window must match the model") {
  auto world = synth_generate(tiny_world());
  auto m = build_model(tiny_arch(DType::f32), 1);
  auto cfg = tiny_train(Stage::temporal);
  cfg.window = 3;
  CHECK_THROWS_AS(Trainer(m, world.manifest, world.store, cfg), ValueError);
  cfg.window = 2;
  Trainer t(m, world.manifest, world.store, cfg);
  t.set_batch_hook([](std::int64_t, const std::vector<TrainingPair>& batch) {
    for (const auto& p : batch) CHECK(p.target_window.dim(0) == 2);
  });
  t.step();
}

TEST_CASE("cosine learning-rate decay") {
  auto cfg = tiny_train(Stage::spatial);
  cfg.optimizer.learning_rate = 2e-3;
  for (std::int64_t s = 0; s < 10; ++s) CHECK(cfg.learning_rate_at(s) == 2e-3);
  cfg.final_lr_fraction = 0.1;
  CHECK(cfg.learning_rate_at(0) == doctest::Approx(2e-3).epsilon(1e-15));
  CHECK(cfg.learning_rate_at(9) == doctest::Approx(2e-4).epsilon(1e-12));
  // Midpoint of the cosine sits halfway between the two ends.
  auto mid = cfg;
  mid.curriculum = progressive_curriculum(4, 3, 4);
  CHECK(mid.learning_rate_at(5) == doctest::Approx(1.1e-3).epsilon(1e-12));
  for (std::int64_t s = 1; s < 10; ++s) CHECK(cfg.learning_rate_at(s) < cfg.learning_rate_at(s - 1));
  cfg.final_lr_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
  cfg.final_lr_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValueError);

  // The decayed rate is what the optimizer sees, and resume stays bit-exact.
  auto world = synth_generate(tiny_world());
  cfg.final_lr_fraction = 0.1;
  auto m = build_model(tiny_arch(DType::f32), 1);
  Trainer full(m, world.manifest, world.store, cfg);
  std::string saved;
  while (!full.done()) {
    if (full.state().step == 4) saved = encode_checkpoint(make_checkpoint(m, Stage::spatial, full.state()));
    full.step();
    CHECK(full.state().optimizer.config.learning_rate == cfg.learning_rate_at(full.state().step - 1));
  }
  auto restored = decode_checkpoint(saved);
  auto m2 = model_from_checkpoint(restored);
  Trainer resumed(m2, world.manifest, world.store, cfg);
  resumed.restore(restored.train);
  CHECK(resumed.state().optimizer.config.learning_rate == cfg.learning_rate_at(3));
  resumed.run();
  CHECK(resumed.state().loss_trace == full.state().loss_trace);

  // Restoring a finished run keeps the last step's rate.
  const auto final_state = encode_checkpoint(make_checkpoint(m, Stage::spatial, full.state()));
  Trainer idle(m2, world.manifest, world.store, cfg);
  idle.restore(decode_checkpoint(final_state).train);
  CHECK(encode_checkpoint(make_checkpoint(m, Stage::spatial, idle.state())) == final_state);
}
