// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "emocast/config.hpp"
#include "emocast/dataset.hpp"
#include "emocast/model.hpp"

namespace emocast {

/// Two-layer perceptron over the expression-region pixels of a frame.
struct ProbeClassifier {
  std::int64_t channels = 0, height = 0, width = 0;
  std::vector<std::int64_t> pixels;  // flat [C*H*W] indices inside the exp mask
  Tensor mean, inv_std;              // per-feature standardization, [1, P]
  Tensor w1, b1, w2, b2;
  double heldout_accuracy = 0.0;

  /// [N, kNumEmotions] logits for frames [N, C, H, W] or a single [C, H, W] frame.
  Tensor logits(const Tensor& frames) const;
  std::vector<Emotion> predict(const Tensor& frames) const;
};

/// Trains on ground-truth frames from `store` only; a random holdout split sets heldout_accuracy.
ProbeClassifier train_probe(const Manifest& manifest, const ClipStore& store, const Tensor& exp_mask,
                            const ProbeConfig& config, std::uint64_t seed);

double emotion_accuracy(const Tensor& frames, Emotion label, const ProbeClassifier& probe);
/// Pearson correlation between audio energy and mean lip-region intensity per frame.
double lip_sync_correlation(std::span<const double> energy, const Tensor& frames, const Tensor& lip_mask);
double reconstruction_mse(const Tensor& generated, const Tensor& ground_truth);

using Confusion = std::array<std::array<std::int64_t, kNumEmotions>, kNumEmotions>;  // [true][predicted]

struct EvalReport {
  static constexpr int kSchemaVersion = 1;
  std::string ablation = "none";
  std::string config_hash;
  std::uint64_t seed = 0;
  Confusion confusion{};
  double lip_sync = 0.0;
  double reconstruction_mse = 0.0;
  double probe_heldout_accuracy = 0.0;
  std::vector<double> spatial_loss;
  std::vector<double> temporal_loss;

  /// trace(confusion) / sum(confusion).
  double emotion_accuracy() const;
  /// Fixed key order, nine significant digits.
  std::string to_json() const;
};

/// Generated frames and their inputs for one held-out condition.
struct GeneratedWindow {
  std::string identity;
  Emotion emotion = Emotion::neutral;
  int track = 0;
  std::int64_t start = 0;
  Tensor frames;
  std::vector<double> energy;
};

/// Generates every (identity, emotion, held-out track, window) from a neutral reference frame.
std::vector<GeneratedWindow> generate_heldout(const EmoCastModel& model, const SyntheticWorld& world,
                                              const EvalConfig& config, std::uint64_t seed);

/// Emotion accuracy and lip sync over held-out audio, plus reconstruction of a training window.
EvalReport evaluate(const EmoCastModel& model, const SyntheticWorld& world, const ProbeClassifier& probe,
                    const EvalConfig& config, std::uint64_t seed);

/// Hash of the experiment with the ablation switches reset, shared by paired runs.
std::string experiment_hash(const ExperimentConfig& config);

struct PipelineResult {
  SyntheticWorld world;
  EmoCastModel model;
  ProbeClassifier probe;
  std::vector<double> spatial_loss;
  std::vector<double> temporal_loss;
  EvalReport report;
};

/// synth → spatial stage → temporal stage → probe → evaluate. `progress` gets (stage, step, loss).
PipelineResult run_pipeline(const ExperimentConfig& config,
                            const std::function<void(Stage, std::int64_t, double)>& progress = {});

inline constexpr std::array<const char*, 4> kAblations{"no_decoupled", "no_emotive_audio", "no_emotion_aware_sampling",
                                                       "no_progressive"};

/// The base config with one component switched off; unknown names throw ValueError.
ExperimentConfig ablated_config(const std::string& name, const ExperimentConfig& base);

struct AblationResult {
  EvalReport base;
  EvalReport ablated;
};

AblationResult run_ablation(const std::string& name, const ExperimentConfig& base,
                            const std::function<void(Stage, std::int64_t, double)>& progress = {});

std::string format_number(double value);

}  // namespace emocast
