// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

// emocast: synthetic data, staged training, generation, evaluation and ablations.

#include <CLI11.hpp>
#include <fmt/core.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "emocast/config.hpp"
#include "emocast/eval.hpp"
#include "emocast/ops.hpp"
#include "emocast/trainer.hpp"

namespace fs = std::filesystem;
using namespace emocast;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;

constexpr const char* kExperimentFile = "experiment.json";
constexpr const char* kManifestFile = "manifest.jsonl";

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
    out << text;
    if (!out) throw DataError(fmt::format("write failed for {}", path.string()));
  }
  fs::rename(tmp, path);
}

ExperimentConfig read_config(const std::string& path) {
  auto c = path == "desk" ? desk_experiment() : load_experiment(path);
  c.seed = effective_seed(c.seed);
  return c;
}

/// Manifest plus a store rooted next to it, and the experiment written there by synth-data.
struct Dataset {
  Manifest manifest;
  ClipStore store;
  fs::path root;
};

Dataset open_dataset(const fs::path& manifest_path) {
  Dataset d;
  d.manifest = Manifest::load(manifest_path);
  d.root = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");
  d.store = ClipStore(d.root);
  return d;
}

void check_grid(const ArchConfig& arch, const SyntheticWorldConfig& world) {
  if (arch.height != world.height || arch.width != world.width || arch.image_channels != world.channels) {
    throw ValueError(fmt::format("model grid {}x{}x{} does not match data grid {}x{}x{}", arch.image_channels, arch.height,
                                 arch.width, world.channels, world.height, world.width));
  }
}

void save_stage(const fs::path& path, const EmoCastModel& model, Stage stage, const TrainState& state) {
  write_text(path, encode_checkpoint(make_checkpoint(model, stage, state)));
}

int cmd_synth(const std::string& config_path, const fs::path& out) {
  auto config = read_config(config_path);
  auto world = synth_generate(config.world);
  fs::create_directories(out);
  world.store.save_all(out);
  world.manifest.save(out / kManifestFile);
  write_text(out / kExperimentFile, experiment_to_json(config));
  fmt::print("wrote {} clips to {}\n", world.manifest.size(), out.string());
  return kExitOk;
}

int cmd_train(const std::string& config_path, const fs::path& manifest_path, const fs::path& out,
              const std::optional<fs::path>& resume, std::int64_t every, bool quiet) {
  const auto config = read_config(config_path);
  auto data = open_dataset(manifest_path);

  EmoCastModel model;
  Stage start_stage = Stage::spatial;
  std::optional<TrainState> restored;
  if (resume) {
    const auto ckpt = load_checkpoint(*resume);
    model = model_from_checkpoint(ckpt);
    if (arch_to_json(model.config) != arch_to_json(config.model) || model.seed != config.seed) {
      throw ValueError(fmt::format("checkpoint {} was trained with a different model config or seed", resume->string()));
    }
    start_stage = checkpoint_stage(ckpt);
    restored = ckpt.train;
  } else {
    model = build_model(config.model, config.seed);
  }

  for (Stage stage : {Stage::spatial, Stage::temporal}) {
    if (stage == Stage::spatial && start_stage == Stage::temporal) continue;
    Trainer trainer(model, data.manifest, data.store, config.train_config(stage));
    if (restored && stage == start_stage) trainer.restore(*restored);
    const auto total = trainer.config().curriculum.total_steps();
    while (!trainer.done()) {
      const double loss = trainer.step();
      const auto s = trainer.state().step;
      if (!quiet && (s % 50 == 0 || s == total)) fmt::print(stderr, "{} {}/{} loss {:.6f}\n", to_string(stage), s, total, loss);
      if (every > 0 && s % every == 0 && s != total) save_stage(out, model, stage, trainer.state());
    }
    save_stage(out, model, stage, trainer.state());
  }
  fmt::print("wrote checkpoint {}\n", out.string());
  return kExitOk;
}

Tensor read_reference(const fs::path& path) {
  auto t = read_array(path);
  if (t.rank() == 4) return reshape(slice(t, 0, 0, 1), {t.shape()[1], t.shape()[2], t.shape()[3]});
  if (t.rank() != 3) throw ShapeError(fmt::format("reference {} must be [C, H, W] or [T, C, H, W]", path.string()));
  return t;
}

int cmd_generate(const fs::path& checkpoint, const fs::path& reference, const fs::path& audio, Emotion emotion,
                 double intensity, std::uint64_t seed, const fs::path& out, std::int64_t start,
                 std::optional<std::int64_t> frames, int steps) {
  const auto ckpt = load_checkpoint(checkpoint);
  const auto model = model_from_checkpoint(ckpt);
  GenerateRequest req;
  req.reference_frame = read_reference(reference);
  req.audio_track = read_array(audio);
  req.emotion = emotion;
  req.intensity = intensity;
  req.start_frame = start;
  req.frames = frames;
  req.seed = seed;
  req.sampler.steps = steps;
  req.stage = checkpoint_stage(ckpt);
  const auto result = generate(model, req);
  write_text(out, encode_array(result));
  fmt::print("wrote {} frames to {}\n", result.shape()[0], out.string());
  return kExitOk;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& manifest_path, const fs::path& report_path,
             const std::optional<std::string>& config_path) {
  const auto ckpt = load_checkpoint(checkpoint);
  const auto model = model_from_checkpoint(ckpt);
  auto data = open_dataset(manifest_path);
  const auto config = read_config(config_path ? *config_path : (data.root / kExperimentFile).string());
  check_grid(model.config, config.world);

  SyntheticWorld world;
  world.config = config.world;
  world.manifest = data.manifest;
  world.store = data.store;
  const auto probe = train_probe(world.manifest, world.store, world.config.masks().exp, config.eval.probe, config.seed);
  auto report = evaluate(model, world, probe, config.eval, config.seed);
  report.config_hash = experiment_hash(config);
  (checkpoint_stage(ckpt) == Stage::spatial ? report.spatial_loss : report.temporal_loss) = ckpt.train.loss_trace;
  write_text(report_path, report.to_json());
  fmt::print("emotion accuracy {}  lip sync {}  reconstruction mse {}\n", format_number(report.emotion_accuracy()),
             format_number(report.lip_sync), format_number(report.reconstruction_mse));
  return kExitOk;
}

int cmd_ablate(const std::string& name, const std::string& config_path, const fs::path& report_path, bool quiet) {
  const auto config = read_config(config_path);
  ablated_config(name, config);
  auto progress = [quiet](Stage stage, std::int64_t step, double loss) {
    if (!quiet && step % 100 == 0) fmt::print(stderr, "{} {} loss {:.6f}\n", to_string(stage), step, loss);
  };
  const auto result = run_ablation(name, config, progress);
  nlohmann::ordered_json j;
  j["schema_version"] = EvalReport::kSchemaVersion;
  j["ablation"] = name;
  j["base"] = nlohmann::ordered_json::parse(result.base.to_json());
  j["ablated"] = nlohmann::ordered_json::parse(result.ablated.to_json());
  write_text(report_path, j.dump(2) + "\n");
  fmt::print("{}: emotion accuracy {} -> {}  lip sync {} -> {}\n", name, format_number(result.base.emotion_accuracy()),
             format_number(result.ablated.emotion_accuracy()), format_number(result.base.lip_sync),
             format_number(result.ablated.lip_sync));
  return kExitOk;
}

int cmd_inspect(const fs::path& manifest_path) {
  const auto manifest = Manifest::load(manifest_path);
  std::map<std::string, std::size_t> by_emotion, by_tag;
  for (const auto& r : manifest.records()) {
    ++by_emotion[std::string(to_string(r.emotion_label))];
    ++by_tag[std::string(to_string(r.source_tag))];
  }
  fmt::print("records: {}\n", manifest.size());
  fmt::print("identities: {}\n", manifest.identities().size());
  fmt::print("emotions:\n");
  for (const auto& [k, n] : by_emotion) fmt::print("  {}: {}\n", k, n);
  fmt::print("source tags:\n");
  for (const auto& [k, n] : by_tag) fmt::print("  {}: {}\n", k, n);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EmoCast synthetic talking-face diffusion toolkit"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress training progress");

  std::string config_path, name;
  fs::path out, manifest, checkpoint, reference, audio, report;
  std::optional<fs::path> resume;
  std::optional<std::string> eval_config;
  std::string emotion_name;
  double intensity = 0.0;
  std::uint64_t seed = 0;
  std::int64_t every = 0, start = 0;
  std::optional<std::int64_t> frames;
  int steps = SamplerConfig{}.steps;

  auto* synth = app.add_subcommand("synth-data", "Render a synthetic world to a directory");
  synth->add_option("--config", config_path, "Experiment JSON, or 'desk' for the built-in config")->required();
  synth->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Run the spatial then temporal stage");
  train->add_option("--config", config_path, "Experiment JSON, or 'desk'")->required();
  train->add_option("--manifest", manifest, "manifest.jsonl written by synth-data")->required()->check(CLI::ExistingFile);
  train->add_option("--out-checkpoint", out, "Checkpoint path")->required();
  train->add_option("--resume", resume, "Continue from this checkpoint")->check(CLI::ExistingFile);
  train->add_option("--checkpoint-every", every, "Also write the checkpoint every N steps")->check(CLI::NonNegativeNumber);

  auto* gen = app.add_subcommand("generate", "Generate frames from a reference frame and audio features");
  gen->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  gen->add_option("--reference", reference, "Array file, [C, H, W] or [T, C, H, W] (frame 0 is used)")
      ->required()
      ->check(CLI::ExistingFile);
  gen->add_option("--audio", audio, "Audio feature array [T, A]")->required()->check(CLI::ExistingFile);
  gen->add_option("--emotion", emotion_name)->required()->check([](const std::string& v) -> std::string {
    try {
      parse_emotion(v);
      return {};
    } catch (const std::exception& e) {
      return e.what();
    }
  });
  gen->add_option("--intensity", intensity)->required()->check(CLI::Range(0.0, 1.0));
  gen->add_option("--seed", seed)->required();
  gen->add_option("--out", out, "Output array [F, C, H, W]")->required();
  gen->add_option("--start", start, "First audio row")->check(CLI::NonNegativeNumber);
  gen->add_option("--frames", frames, "Frames to generate (default: the model window)")->check(CLI::PositiveNumber);
  gen->add_option("--steps", steps, "DDIM steps")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "Score a checkpoint on held-out audio");
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
  ev->add_option("--report", report, "Report JSON path")->required();
  ev->add_option("--config", eval_config, "Experiment JSON (default: experiment.json next to the manifest)");

  auto* ab = app.add_subcommand("ablate", "Run the base and one ablated experiment with the same seed");
  ab->add_option("--name", name)->required()->check(CLI::IsMember(std::vector<std::string>(kAblations.begin(), kAblations.end())));
  ab->add_option("--config", config_path, "Experiment JSON, or 'desk'")->required();
  ab->add_option("--report", report, "Report JSON path")->required();

  auto* inspect = app.add_subcommand("inspect-manifest", "Print record, emotion and source-tag counts");
  inspect->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);

  auto* print = app.add_subcommand("print-config", "Print the built-in desk experiment JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return cmd_synth(config_path, out);
    if (train->parsed()) return cmd_train(config_path, manifest, out, resume, every, quiet);
    if (gen->parsed()) {
      return cmd_generate(checkpoint, reference, audio, parse_emotion(emotion_name), intensity, seed, out, start, frames,
                          steps);
    }
    if (ev->parsed()) return cmd_eval(checkpoint, manifest, report, eval_config);
    if (ab->parsed()) return cmd_ablate(name, config_path, report, quiet);
    if (inspect->parsed()) return cmd_inspect(manifest);
    if (print->parsed()) {
      fmt::print("{}", experiment_to_json(desk_experiment()));
      return kExitOk;
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitData;
  }
  return kExitUsage;
}
