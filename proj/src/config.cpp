// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

namespace emocast {

namespace {

using json = nlohmann::ordered_json;

void check_keys(const json& j, std::initializer_list<const char*> known, const char* context) {
  if (!j.is_object()) throw ValueError(fmt::format("{}: expected a JSON object", context));
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ValueError(fmt::format("{}: unknown key '{}'", context, key));
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const char* context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(fmt::format("{}.{}: {}", context, key, e.what()));
  }
}

json rect_json(const RegionRect& r) { return json::array({r.top, r.left, r.height, r.width}); }

void read_rect(const json& j, const char* key, RegionRect& out, const char* context) {
  auto it = j.find(key);
  if (it == j.end()) return;
  std::vector<std::int64_t> v;
  read(j, key, v, context);
  if (v.size() != 4) throw ValueError(fmt::format("{}.{}: expected [top, left, height, width]", context, key));
  out = {v[0], v[1], v[2], v[3]};
}

json arch_json(const ArchConfig& c) {
  json j;
  j["image_channels"] = c.image_channels;
  j["height"] = c.height;
  j["width"] = c.width;
  j["lip"] = rect_json(c.lip);
  j["exp"] = rect_json(c.exp);
  j["pose"] = rect_json(c.pose);
  j["channels"] = c.channels;
  j["head_dim"] = c.head_dim;
  j["time_dim"] = c.time_dim;
  j["d_face"] = c.d_face;
  j["d_text"] = c.d_text;
  j["text_tokens"] = c.text_tokens;
  j["audio_features"] = c.audio_features;
  j["audio_radius"] = c.audio_radius;
  j["frames"] = c.frames;
  j["diffusion_steps"] = c.diffusion_steps;
  j["beta_first"] = c.beta_first;
  j["beta_last"] = c.beta_last;
  j["decoupled"] = c.decoupled;
  j["emotive_audio"] = c.emotive_audio;
  j["dtype"] = dtype_name(c.dtype);
  return j;
}

ArchConfig arch_parse(const json& j, ArchConfig c = {}) {
  const char* ctx = "model";
  check_keys(j,
             {"image_channels", "height", "width", "lip", "exp", "pose", "channels", "head_dim", "time_dim", "d_face",
              "d_text", "text_tokens", "audio_features", "audio_radius", "frames", "diffusion_steps", "beta_first", "beta_last",
              "decoupled", "emotive_audio", "dtype"},
             ctx);
  read(j, "image_channels", c.image_channels, ctx);
  read(j, "height", c.height, ctx);
  read(j, "width", c.width, ctx);
  read_rect(j, "lip", c.lip, ctx);
  read_rect(j, "exp", c.exp, ctx);
  read_rect(j, "pose", c.pose, ctx);
  read(j, "channels", c.channels, ctx);
  read(j, "head_dim", c.head_dim, ctx);
  read(j, "time_dim", c.time_dim, ctx);
  read(j, "d_face", c.d_face, ctx);
  read(j, "d_text", c.d_text, ctx);
  read(j, "text_tokens", c.text_tokens, ctx);
  read(j, "audio_features", c.audio_features, ctx);
  read(j, "audio_radius", c.audio_radius, ctx);
  read(j, "frames", c.frames, ctx);
  read(j, "diffusion_steps", c.diffusion_steps, ctx);
  read(j, "beta_first", c.beta_first, ctx);
  read(j, "beta_last", c.beta_last, ctx);
  read(j, "decoupled", c.decoupled, ctx);
  read(j, "emotive_audio", c.emotive_audio, ctx);
  std::string dtype = dtype_name(c.dtype);
  read(j, "dtype", dtype, ctx);
  if (dtype == dtype_name(DType::f32)) {
    c.dtype = DType::f32;
  } else if (dtype == dtype_name(DType::f64)) {
    c.dtype = DType::f64;
  } else {
    throw ValueError(fmt::format("model.dtype: unknown dtype '{}'", dtype));
  }
  return c;
}

json world_json(const SyntheticWorldConfig& c) {
  json j;
  j["identities"] = c.identities;
  std::vector<std::string> emotions;
  for (auto e : c.emotions) emotions.emplace_back(to_string(e));
  j["emotions"] = emotions;
  j["clips_per_cell"] = c.clips_per_cell;
  j["wild_clips_per_cell"] = c.wild_clips_per_cell;
  j["wild_shuffled_fraction"] = c.wild_shuffled_fraction;
  j["height"] = c.height;
  j["width"] = c.width;
  j["channels"] = c.channels;
  j["lip"] = rect_json(c.lip);
  j["exp"] = rect_json(c.exp);
  j["pose"] = rect_json(c.pose);
  j["frames_per_clip"] = c.frames_per_clip;
  j["audio_features"] = c.audio_features;
  j["intensity_min"] = c.intensity_min;
  j["intensity_max"] = c.intensity_max;
  j["seed"] = c.seed;
  return j;
}

SyntheticWorldConfig world_parse(const json& j, SyntheticWorldConfig c) {
  const char* ctx = "world";
  check_keys(j,
             {"identities", "emotions", "clips_per_cell", "wild_clips_per_cell", "wild_shuffled_fraction", "height", "width",
              "channels", "lip", "exp", "pose", "frames_per_clip", "audio_features", "intensity_min", "intensity_max",
              "seed"},
             ctx);
  read(j, "identities", c.identities, ctx);
  if (j.contains("emotions")) {
    std::vector<std::string> names;
    read(j, "emotions", names, ctx);
    c.emotions.clear();
    for (const auto& n : names) c.emotions.push_back(parse_emotion(n));
  }
  read(j, "clips_per_cell", c.clips_per_cell, ctx);
  read(j, "wild_clips_per_cell", c.wild_clips_per_cell, ctx);
  read(j, "wild_shuffled_fraction", c.wild_shuffled_fraction, ctx);
  read(j, "height", c.height, ctx);
  read(j, "width", c.width, ctx);
  read(j, "channels", c.channels, ctx);
  read_rect(j, "lip", c.lip, ctx);
  read_rect(j, "exp", c.exp, ctx);
  read_rect(j, "pose", c.pose, ctx);
  read(j, "frames_per_clip", c.frames_per_clip, ctx);
  read(j, "audio_features", c.audio_features, ctx);
  read(j, "intensity_min", c.intensity_min, ctx);
  read(j, "intensity_max", c.intensity_max, ctx);
  read(j, "seed", c.seed, ctx);
  return c;
}

json plan_json(const StagePlan& p) {
  json j;
  j["phase_steps"] = {p.phase1, p.phase2, p.phase3};
  j["batch_size"] = p.batch_size;
  j["learning_rate"] = p.learning_rate;
  j["final_lr_fraction"] = p.final_lr_fraction;
  j["grad_clip"] = p.grad_clip;
  j["freeze_spatial"] = p.freeze_spatial;
  return j;
}

StagePlan plan_parse(const json& j, StagePlan p, const char* ctx) {
  check_keys(j, {"phase_steps", "batch_size", "learning_rate", "final_lr_fraction", "grad_clip", "freeze_spatial"}, ctx);
  if (j.contains("phase_steps")) {
    std::vector<std::int64_t> steps;
    read(j, "phase_steps", steps, ctx);
    if (steps.size() != 3) throw ValueError(fmt::format("{}.phase_steps: expected three phase lengths", ctx));
    p.phase1 = steps[0];
    p.phase2 = steps[1];
    p.phase3 = steps[2];
  }
  read(j, "batch_size", p.batch_size, ctx);
  read(j, "learning_rate", p.learning_rate, ctx);
  read(j, "final_lr_fraction", p.final_lr_fraction, ctx);
  read(j, "grad_clip", p.grad_clip, ctx);
  read(j, "freeze_spatial", p.freeze_spatial, ctx);
  return p;
}

json eval_json(const EvalConfig& e) {
  json j;
  j["sampler"] = e.sampler.sampler == Sampler::ddim ? "ddim" : "ddpm";
  j["sampler_steps"] = e.sampler.steps;
  j["eta"] = e.sampler.eta;
  j["heldout_frames"] = e.heldout_frames;
  j["heldout_tracks"] = e.heldout_tracks;
  j["intensity"] = e.intensity;
  j["probe_hidden"] = e.probe.hidden;
  j["probe_epochs"] = e.probe.epochs;
  j["probe_learning_rate"] = e.probe.learning_rate;
  j["probe_holdout_fraction"] = e.probe.holdout_fraction;
  return j;
}

EvalConfig eval_parse(const json& j, EvalConfig e) {
  const char* ctx = "eval";
  check_keys(j,
             {"sampler", "sampler_steps", "eta", "heldout_frames", "heldout_tracks", "intensity", "probe_hidden",
              "probe_epochs", "probe_learning_rate", "probe_holdout_fraction"},
             ctx);
  if (j.contains("sampler")) {
    std::string sampler;
    read(j, "sampler", sampler, ctx);
    if (sampler == "ddim") {
      e.sampler.sampler = Sampler::ddim;
    } else if (sampler == "ddpm") {
      e.sampler.sampler = Sampler::ddpm;
    } else {
      throw ValueError(fmt::format("eval.sampler: unknown sampler '{}'", sampler));
    }
  }
  read(j, "sampler_steps", e.sampler.steps, ctx);
  read(j, "eta", e.sampler.eta, ctx);
  read(j, "heldout_frames", e.heldout_frames, ctx);
  read(j, "heldout_tracks", e.heldout_tracks, ctx);
  read(j, "intensity", e.intensity, ctx);
  read(j, "probe_hidden", e.probe.hidden, ctx);
  read(j, "probe_epochs", e.probe.epochs, ctx);
  read(j, "probe_learning_rate", e.probe.learning_rate, ctx);
  read(j, "probe_holdout_fraction", e.probe.holdout_fraction, ctx);
  return e;
}

json parse_text(const std::string& text, const char* context) {
  try {
    return json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValueError(fmt::format("{}: {}", context, e.what()));
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    world.validate();
  } catch (const DataError& e) {
    throw ValueError(e.what());
  }
  model.validate();
  if (world.height != model.height || world.width != model.width || world.channels != model.image_channels) {
    throw ValueError(fmt::format("world grid {}x{}x{} differs from model grid {}x{}x{}", world.channels, world.height,
                                 world.width, model.image_channels, model.height, model.width));
  }
  if (world.audio_features != model.audio_features) {
    throw ValueError(fmt::format("world has {} audio features, model expects {}", world.audio_features, model.audio_features));
  }
  auto same = [](const RegionRect& a, const RegionRect& b) {
    return a.top == b.top && a.left == b.left && a.height == b.height && a.width == b.width;
  };
  if (!same(world.lip, model.lip) || !same(world.exp, model.exp) || !same(world.pose, model.pose)) {
    throw ValueError("world and model region rectangles differ");
  }
  if (model.frames > world.frames_per_clip) {
    throw ValueError(fmt::format("model window {} exceeds clip length {}", model.frames, world.frames_per_clip));
  }
  if (eval.heldout_frames < model.frames || eval.heldout_tracks < 1) throw ValueError("held-out audio shorter than one window");
  for (const auto* plan : {&spatial, &temporal}) {
    if (plan->phase1 < 0 || plan->phase2 < 0 || plan->phase3 < 0 || plan->total() < 1) {
      throw ValueError("stage phase lengths must be non-negative with a positive total");
    }
  }
}

TrainConfig ExperimentConfig::train_config(Stage stage) const {
  const auto& plan = stage == Stage::spatial ? spatial : temporal;
  TrainConfig t;
  t.stage = stage;
  t.curriculum = progressive ? progressive_curriculum(plan.phase1, plan.phase2, plan.phase3)
                             : single_phase_curriculum(plan.total());
  if (!emotion_aware_sampling) {
    for (auto& p : t.curriculum.phases) p.sampler = SamplerMode::intra_video;
  }
  t.batch_size = plan.batch_size;
  t.window = model.frames;
  t.optimizer.learning_rate = plan.learning_rate;
  t.final_lr_fraction = plan.final_lr_fraction;
  t.grad_clip = plan.grad_clip;
  t.seed = seed;
  t.freeze_spatial = plan.freeze_spatial;
  return t;
}

std::string arch_to_json(const ArchConfig& config) { return arch_json(config).dump(); }

ArchConfig arch_from_json(const std::string& text) { return arch_parse(parse_text(text, "model config")); }

std::string experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["world"] = world_json(c.world);
  j["model"] = arch_json(c.model);
  j["spatial"] = plan_json(c.spatial);
  j["temporal"] = plan_json(c.temporal);
  j["emotion_aware_sampling"] = c.emotion_aware_sampling;
  j["progressive"] = c.progressive;
  j["eval"] = eval_json(c.eval);
  return j.dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
  const auto j = parse_text(text, "experiment config");
  const char* ctx = "config";
  check_keys(j, {"seed", "world", "model", "spatial", "temporal", "emotion_aware_sampling", "progressive", "eval"}, ctx);
  ExperimentConfig c = desk_experiment();
  read(j, "seed", c.seed, ctx);
  if (j.contains("world")) c.world = world_parse(j["world"], c.world);
  if (j.contains("model")) c.model = arch_parse(j["model"], c.model);
  if (j.contains("spatial")) c.spatial = plan_parse(j["spatial"], c.spatial, "spatial");
  if (j.contains("temporal")) c.temporal = plan_parse(j["temporal"], c.temporal, "temporal");
  read(j, "emotion_aware_sampling", c.emotion_aware_sampling, ctx);
  read(j, "progressive", c.progressive, ctx);
  if (j.contains("eval")) c.eval = eval_parse(j["eval"], c.eval);
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(fmt::format("cannot open config {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return experiment_from_json(ss.str());
}

std::uint64_t effective_seed(std::uint64_t configured) {
  const char* env = std::getenv("EMOCAST_SEED");
  if (env == nullptr || *env == '\0') return configured;
  try {
    std::size_t used = 0;
    const auto value = std::stoull(env, &used);
    if (used != std::string(env).size()) throw std::invalid_argument("trailing characters");
    return value;
  } catch (const std::exception&) {
    throw ValueError(fmt::format("EMOCAST_SEED='{}' is not an unsigned integer", env));
  }
}

ExperimentConfig desk_experiment() {
  ExperimentConfig c;
  c.world.identities = 2;
  c.world.emotions = {Emotion::neutral, Emotion::happy, Emotion::angry};
  c.world.clips_per_cell = 2;
  c.world.wild_clips_per_cell = 2;
  c.world.wild_shuffled_fraction = 1.0;
  c.world.frames_per_clip = 32;
  c.world.intensity_min = 1.0;
  c.world.intensity_max = 1.0;
  c.spatial = {1500, 1300, 200, 2, 2e-3, 0.05, 1.0, true};
  c.temporal = {100, 100, 100, 1, 1e-3, 0.05, 1.0, true};
  return c;
}

}  // namespace emocast
