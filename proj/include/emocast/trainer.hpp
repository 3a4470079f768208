// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "emocast/dataset.hpp"
#include "emocast/model.hpp"
#include "emocast/optim.hpp"

namespace emocast {

/// Non-finite loss or another condition that stops a training run.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  Stage stage = Stage::spatial;
  CurriculumConfig curriculum = progressive_curriculum(100, 100, 100);
  std::size_t batch_size = 2;
  /// Window length in the temporal stage; the spatial stage always uses one frame.
  std::int64_t window = 8;
  OptimizerConfig optimizer;
  /// Cosine decay from the base learning rate to this fraction of it at the last step; 1 keeps it constant.
  double final_lr_fraction = 1.0;
  /// Global gradient norm limit; 0 disables clipping.
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Temporal stage only: keep every non-temporal parameter fixed.
  bool freeze_spatial = true;

  void validate() const;
  std::int64_t effective_window() const { return stage == Stage::spatial ? 1 : window; }
  double learning_rate_at(std::int64_t step) const;
};

struct TrainState {
  std::int64_t step = 0;
  OptimizerState optimizer;
  std::vector<double> loss_trace;
  Rng::State rng;
};

class Trainer {
 public:
  using BatchHook = std::function<void(std::int64_t step, const std::vector<TrainingPair>& batch)>;

  Trainer(EmoCastModel& model, const Manifest& manifest, const ClipStore& store, TrainConfig config);

  /// One optimizer step at state().step; returns the batch loss.
  double step();
  /// Runs until state().step reaches `until` (the curriculum end by default).
  void run(std::int64_t until = -1);
  bool done() const { return state_.step >= config_.curriculum.total_steps(); }

  const TrainConfig& config() const { return config_; }
  const TrainState& state() const { return state_; }
  void restore(TrainState state);
  /// Names of the parameters this stage updates.
  const std::vector<std::string>& trainable() const { return trainable_names_; }
  /// L2 norm of every parameter gradient from the last step; frozen parameters report 0.
  const std::map<std::string, double>& last_grad_norms() const { return grad_norms_; }
  void set_batch_hook(BatchHook hook) { hook_ = std::move(hook); }

 private:
  EmoCastModel* model_;
  TrainConfig config_;
  BatchSampler sampler_;
  NoiseSchedule schedule_;
  Rng base_;
  TrainState state_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<bool> is_trainable_;
  std::vector<std::string> trainable_names_;
  std::map<std::string, double> grad_norms_;
  BatchHook hook_;
};

/// Diffusion loss of one training pair: q_sample with fresh noise, then predict_noise against it.
Tensor pair_loss(const EmoCastModel& model, const TrainingPair& pair, Stage stage, const NoiseSchedule& schedule, Rng& rng);

// Checkpoints: "EMCK", u32 version, u64 config hash, u32 entry count, then per entry
// u32 name length, name, u8 dtype (1 f32, 2 f64, 3 u64, 4 bytes), u32 rank, u32 dims[rank],
// u64 payload offset; payloads; CRC-32 of everything before the trailer.

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  /// Architecture, seed and stage as JSON; its hash is stored in the header.
  std::string config_json;
  std::vector<std::pair<std::string, Tensor>> parameters;
  TrainState train;

  std::uint64_t config_hash() const;
};

/// Config JSON written into checkpoints for `model` trained in `stage`.
std::string checkpoint_config_json(const EmoCastModel& model, Stage stage);
Checkpoint make_checkpoint(const EmoCastModel& model, Stage stage, const TrainState& state);
std::string encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Rebuilds the model from the stored config and copies every parameter in.
EmoCastModel model_from_checkpoint(const Checkpoint& checkpoint);
Stage checkpoint_stage(const Checkpoint& checkpoint);

}  // namespace emocast
