// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emocast/labels.hpp"
#include "emocast/rng.hpp"
#include "emocast/tensor.hpp"

namespace emocast {

// Single-head attention. Token tensors are [N, d] or batched [B, N, d]; a 2-D
// context is shared by every batch entry of a batched query.

struct CrossAttentionParams {
  Tensor w_q;  // [d_model, d]
  Tensor w_k;  // [d_ctx, d]
  Tensor w_v;  // [d_ctx, d]
  Tensor w_o;  // [d, d_model]; undefined means no output projection

  std::int64_t head_dim() const { return w_q.dim(1); }
  std::vector<Tensor> parameters() const;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0].
Tensor projection_init(Rng& rng, Shape shape, DType dtype);

CrossAttentionParams make_cross_attention(Rng& rng, std::int64_t d_model, std::int64_t d_ctx, std::int64_t d,
                                          bool with_output, bool zero_output, DType dtype);

/// Softmax(Q K^T / sqrt(d)) for the given projections, [.., N_q, N_k].
Tensor attention_weights(const Tensor& queries_in, const Tensor& context, const CrossAttentionParams& params);

Tensor cross_attention(const Tensor& queries_in, const Tensor& context, const CrossAttentionParams& params);

struct DecoupledEmotiveParams {
  Tensor w_q;     // [d_model, d], shared by both branches
  Tensor face_k;  // [d_face, d]
  Tensor face_v;
  Tensor text_k;  // [d_text, d]
  Tensor text_v;
  Tensor w_o;  // [d, d_model], applied per branch

  CrossAttentionParams face_branch() const { return {w_q, face_k, face_v, w_o}; }
  CrossAttentionParams text_branch() const { return {w_q, text_k, text_v, w_o}; }
  std::vector<Tensor> parameters() const;
};

DecoupledEmotiveParams make_decoupled_emotive(Rng& rng, std::int64_t d_model, std::int64_t d_face, std::int64_t d_text,
                                              std::int64_t d, DType dtype);

/// CA_face(z, e_f) + CA_text(z, e_t) with the shared query projection.
Tensor decoupled_emotive_attention(const Tensor& z_tokens, const Tensor& e_f, const Tensor& e_t,
                                   const DecoupledEmotiveParams& params);

struct RegionRect {
  std::int64_t top = 0;
  std::int64_t left = 0;
  std::int64_t height = 1;
  std::int64_t width = 1;
};

/// Binary [H, W] masks for the lip, expression and pose regions.
struct RegionMasks {
  Tensor lip;
  Tensor exp;
  Tensor pose;

  static RegionMasks from_rects(std::int64_t height, std::int64_t width, const RegionRect& lip, const RegionRect& exp,
                                const RegionRect& pose, DType dtype = DType::f64);
  /// Pools by `factor`; a cell is on when any covered pixel is on.
  RegionMasks downsample(int factor) const;
  RegionMasks to(DType dtype) const;
  const Tensor& operator[](int region) const;
  /// Throws unless masks are binary, nonempty and share one [H, W] shape.
  void validate() const;
};

struct EmotiveAudioParams {
  CrossAttentionParams text_audio;               // queries e_t, keys/values e_a, no output projection
  std::array<CrossAttentionParams, 3> regions;  // lip, exp, pose: queries f_v, keys/values f_ea
  Tensor combiner;                               // [C, 3C, 1, 1], no bias

  std::vector<Tensor> parameters() const;
};

EmotiveAudioParams make_emotive_audio(Rng& rng, std::int64_t channels, std::int64_t d_text, std::int64_t d_audio,
                                      std::int64_t d, DType dtype);

/// f_ea = CA(Q(e_t), K(e_a), V(e_a)). e_a may be batched [F, N_a, d_audio] (one window per frame).
Tensor emotive_audio_feature(const Tensor& e_t, const Tensor& e_a, const EmotiveAudioParams& params);

struct RegionFeatures {
  Tensor lip;
  Tensor exp;
  Tensor pose;
};

/// Masked region cross-attentions combined by the 1x1 combiner. f_v is [C, H, W] or
/// [F, C, H, W]; f_ea is [N_t, d] or [F, N_t, d]. The caller adds the result to f_v.
Tensor region_audio_attention(const Tensor& f_v, const Tensor& f_ea, const RegionMasks& masks,
                              const EmotiveAudioParams& params, RegionFeatures* features = nullptr);

/// Self-attention over the F frames at every spatial location; returns the residual term.
Tensor temporal_attention(const Tensor& frames, const CrossAttentionParams& params);

/// Self tokens attend over [self; reference]. Reference may be [N_r, d] shared across a batch.
Tensor reference_inject(const Tensor& self_tokens, const Tensor& reference_tokens, const CrossAttentionParams& params);

/// [C, H, W] -> [H*W, C] and [F, C, H, W] -> [F, H*W, C].
Tensor to_tokens(const Tensor& feature_map);
/// Inverse of to_tokens for the given spatial size.
Tensor from_tokens(const Tensor& tokens, std::int64_t height, std::int64_t width);

/// Stand-ins for the face, text and audio encoders. All tables are fixed at construction.
class EmbeddingBank {
 public:
  struct Config {
    std::int64_t channels = 1;
    std::int64_t height = 16;
    std::int64_t width = 16;
    std::int64_t d_face = 16;
    std::int64_t d_text = 16;
    std::int64_t audio_features = 4;
    int audio_radius = 1;
    /// Prompt tokens per emotion (N_t).
    std::int64_t text_tokens = 1;
  };

  EmbeddingBank() = default;
  EmbeddingBank(const Config& config, const RegionMasks& masks, std::uint64_t seed);

  const Config& config() const { return config_; }
  std::int64_t d_audio() const { return config_.audio_features + audio_window(); }
  int audio_window() const { return 2 * config_.audio_radius + 1; }

  /// [1, d_face] from the reference frame with every region blanked out.
  Tensor face(const Tensor& reference_frame, DType dtype) const;
  /// [N_t, d_text]: the emotion's prompt rows, scaled by intensity for non-neutral labels.
  Tensor text(Emotion emotion, double intensity, DType dtype) const;
  /// [F, 2r+1, d_audio] per-frame audio windows; `audio` is [T, audio_features],
  /// `frames` are the target frame indices into it (edges clamp).
  Tensor audio(const Tensor& audio, std::span<const std::int64_t> frames, DType dtype) const;

  const Tensor& face_projection() const { return face_projection_; }
  const Tensor& emotion_table() const { return emotion_table_; }

 private:
  Config config_;
  Tensor face_mask_;        // [C, H, W], zero on the regions
  Tensor face_projection_;  // [C*H*W, d_face]
  Tensor emotion_table_;    // [kNumEmotions * N_t, d_text]
};

}  // namespace emocast
