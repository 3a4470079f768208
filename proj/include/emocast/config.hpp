// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "emocast/dataset.hpp"
#include "emocast/diffusion.hpp"
#include "emocast/model.hpp"
#include "emocast/trainer.hpp"

namespace emocast {

struct StagePlan {
  /// Steps per curriculum phase: mixed, curated, lip sync.
  std::int64_t phase1 = 100;
  std::int64_t phase2 = 100;
  std::int64_t phase3 = 100;
  std::size_t batch_size = 2;
  double learning_rate = 1e-3;
  /// Cosine decay target as a fraction of learning_rate; 1 keeps the rate constant.
  double final_lr_fraction = 1.0;
  double grad_clip = 1.0;
  bool freeze_spatial = true;

  std::int64_t total() const { return phase1 + phase2 + phase3; }
};

struct ProbeConfig {
  std::int64_t hidden = 32;
  std::int64_t epochs = 200;
  double learning_rate = 1e-2;
  double holdout_fraction = 0.25;
};

struct EvalConfig {
  SamplerConfig sampler;
  /// Length of each held-out audio track used for lip-sync and emotion scoring.
  std::int64_t heldout_frames = 32;
  int heldout_tracks = 2;
  double intensity = 1.0;
  ProbeConfig probe;
};

/// Everything one synth → train → eval run needs.
struct ExperimentConfig {
  std::uint64_t seed = 0;
  SyntheticWorldConfig world;
  ArchConfig model;
  StagePlan spatial;
  StagePlan temporal{50, 50, 50, 1, 1e-3, 1.0, 1.0, true};
  bool emotion_aware_sampling = true;
  bool progressive = true;
  EvalConfig eval;

  /// Throws ValueError when parts disagree (grid sizes, channels, audio widths).
  void validate() const;
  TrainConfig train_config(Stage stage) const;
};

std::string arch_to_json(const ArchConfig& config);
ArchConfig arch_from_json(const std::string& text);

/// Pretty-printed JSON; unknown keys are rejected on the way back in and missing keys, at any depth, keep the desk values.
std::string experiment_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_from_json(const std::string& text);
ExperimentConfig load_experiment(const std::filesystem::path& path);
/// Seed from EMOCAST_SEED when set, else the configured one.
std::uint64_t effective_seed(std::uint64_t configured);

/// Model and world sizes used by the acceptance suite and the CLI default.
ExperimentConfig desk_experiment();

}  // namespace emocast
