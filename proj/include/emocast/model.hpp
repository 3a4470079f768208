// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emocast/attention.hpp"
#include "emocast/diffusion.hpp"
#include "emocast/labels.hpp"
#include "emocast/tensor.hpp"

namespace emocast {

enum class Stage { spatial, temporal };

const char* to_string(Stage stage);
Stage parse_stage(const std::string& text);

struct ArchConfig {
  std::int64_t image_channels = 1;
  std::int64_t height = 16;
  std::int64_t width = 16;
  RegionRect lip{11, 5, 3, 6};
  RegionRect exp{2, 3, 4, 10};
  RegionRect pose{7, 12, 4, 3};
  /// Channels per resolution level; level l runs at (H, W) / 2^l.
  std::vector<std::int64_t> channels{8, 16, 32};
  std::int64_t head_dim = 32;
  std::int64_t time_dim = 32;
  std::int64_t d_face = 32;
  std::int64_t d_text = 32;
  /// Prompt tokens per emotion.
  std::int64_t text_tokens = 1;
  std::int64_t audio_features = 4;
  int audio_radius = 1;
  /// Frames per window in the temporal stage.
  std::int64_t frames = 8;
  int diffusion_steps = 50;
  double beta_first = 1e-3;
  double beta_last = 0.2;
  /// Face and text branches as separate cross-attentions; false shares one over [e_t; e_f].
  bool decoupled = true;
  /// Region attentions read f_ea; false feeds the raw audio windows instead.
  bool emotive_audio = true;
  DType dtype = DType::f32;

  /// Throws ValueError when sizes or regions are inconsistent.
  void validate() const;
  int levels() const { return static_cast<int>(channels.size()); }
  RegionMasks masks() const;
  EmbeddingBank::Config bank_config() const;
  NoiseSchedule schedule() const;
};

struct ResBlock {
  Tensor conv1;  // [C_out, C_in, 3, 3]
  Tensor bias1;
  Tensor time_w;  // [time_dim, C_out]; undefined in the reference encoder
  Tensor time_b;
  Tensor conv2;  // [C_out, C_out, 3, 3]
  Tensor bias2;
  Tensor skip;  // [C_out, C_in, 1, 1] when C_in != C_out

  std::vector<std::pair<std::string, Tensor>> named(const std::string& prefix) const;
};

struct DenoiserLevel {
  ResBlock res;
  CrossAttentionParams self_attn;
  DecoupledEmotiveParams emotive;  // decoupled variant
  CrossAttentionParams shared;     // shared variant, context [e_t; e_f]
  std::array<CrossAttentionParams, 3> regions;
  Tensor combiner;  // [C, 3C, 1, 1]
  CrossAttentionParams temporal;
};

struct ReferenceNet {
  Tensor conv_in;
  Tensor bias_in;
  Tensor position;  // [C_0, H, W]
  std::vector<ResBlock> levels;
};

struct EmoCastModel {
  ArchConfig config;
  std::uint64_t seed = 0;
  ReferenceNet reference;
  Tensor conv_in;
  Tensor bias_in;
  Tensor position;
  Tensor time_w1, time_b1, time_w2, time_b2;
  CrossAttentionParams text_audio;  // f_ea = CA(Q(e_t), K(e_a), V(e_a))
  std::vector<DenoiserLevel> down;
  std::vector<ResBlock> up;  // up[l] merges level l+1 into level l
  Tensor conv_out;
  Tensor bias_out;
  EmbeddingBank bank;
  std::vector<RegionMasks> masks;  // per level

  /// Every trainable tensor under a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  /// Parameters that belong to temporal attention blocks.
  static bool is_temporal(const std::string& name);
  std::int64_t parameter_count() const;
};

EmoCastModel build_model(const ArchConfig& config, std::uint64_t seed);

struct Conditions {
  Tensor e_f;  // [1, d_face]
  Tensor e_t;  // [N_t, d_text]
  Tensor e_a;  // [F, 2r+1, d_audio]
  std::vector<Tensor> reference;  // per level, [H_l * W_l, C_l]
};

/// Runs the reference encoder once; the result is reused for every denoising step.
std::vector<Tensor> reference_features(const EmoCastModel& model, const Tensor& reference_frame);

/// Conditions for one window: reference frame [C, H, W], audio track [T, A] and target frame indices.
Conditions make_conditions(const EmoCastModel& model, const Tensor& reference_frame, Emotion emotion, double intensity,
                           const Tensor& audio_track, std::span<const std::int64_t> frames);

/// eps prediction for z_t [F, C, H, W]. Temporal attention runs only in the temporal stage.
Tensor predict_noise(const EmoCastModel& model, const Tensor& z_t, int t, const Conditions& cond, Stage stage);

struct GenerateRequest {
  Tensor reference_frame;  // [C, H, W]
  Tensor audio_track;      // [T, A]
  Emotion emotion = Emotion::neutral;
  double intensity = 0.0;
  std::int64_t start_frame = 0;
  std::optional<std::int64_t> frames;  // defaults to the model window
  std::uint64_t seed = 0;
  SamplerConfig sampler;
  Stage stage = Stage::temporal;
};

/// Frames [F, C, H, W] for audio rows [start_frame, start_frame + F).
Tensor generate(const EmoCastModel& model, const GenerateRequest& request);

}  // namespace emocast
