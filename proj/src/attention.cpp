// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/attention.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "emocast/ops.hpp"

namespace emocast {

namespace {

Tensor broadcast_batch(const Tensor& x, std::int64_t batch) {
  Shape s = x.shape();
  s.insert(s.begin(), 1);
  return repeat_rows(reshape(x, s), batch);
}

Tensor apply_output(const Tensor& x, const Tensor& w_o) { return w_o.defined() ? matmul(x, w_o) : x; }

void check_last_dim(const Tensor& x, const Tensor& w, const char* what) {
  if (x.rank() < 2 || x.dim(-1) != w.dim(0)) {
    throw ShapeError(fmt::format("{}: tokens {} do not match projection {}", what, shape_string(x.shape()),
                                 shape_string(w.shape())));
  }
}

}  // namespace

std::vector<Tensor> CrossAttentionParams::parameters() const {
  std::vector<Tensor> out{w_q, w_k, w_v};
  if (w_o.defined()) out.push_back(w_o);
  return out;
}

Tensor projection_init(Rng& rng, Shape shape, DType dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape.at(0)));
  auto t = rng.uniform_tensor(std::move(shape), -bound, bound, dtype);
  t.set_requires_grad(true);
  return t;
}

CrossAttentionParams make_cross_attention(Rng& rng, std::int64_t d_model, std::int64_t d_ctx, std::int64_t d,
                                          bool with_output, bool zero_output, DType dtype) {
  CrossAttentionParams p;
  p.w_q = projection_init(rng, {d_model, d}, dtype);
  p.w_k = projection_init(rng, {d_ctx, d}, dtype);
  p.w_v = projection_init(rng, {d_ctx, d}, dtype);
  if (with_output) {
    if (zero_output) {
      p.w_o = Tensor::zeros({d, d_model}, dtype);
      p.w_o.set_requires_grad(true);
    } else {
      p.w_o = projection_init(rng, {d, d_model}, dtype);
    }
  }
  return p;
}

Tensor attention_weights(const Tensor& queries_in, const Tensor& context, const CrossAttentionParams& params) {
  if (context.rank() < 2 || context.dim(-2) == 0) throw ValueError("cross_attention: empty context");
  check_last_dim(queries_in, params.w_q, "cross_attention query");
  check_last_dim(context, params.w_k, "cross_attention context");
  Tensor q_in = queries_in;
  if (context.rank() == 3 && q_in.rank() == 2) q_in = broadcast_batch(q_in, context.dim(0));
  auto q = matmul(q_in, params.w_q);
  auto k = matmul(context, params.w_k);
  auto scores = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(params.head_dim())));
  return softmax(scores, -1);
}

Tensor cross_attention(const Tensor& queries_in, const Tensor& context, const CrossAttentionParams& params) {
  auto weights = attention_weights(queries_in, context, params);
  auto v = matmul(context, params.w_v);
  return apply_output(matmul(weights, v), params.w_o);
}

std::vector<Tensor> DecoupledEmotiveParams::parameters() const { return {w_q, face_k, face_v, text_k, text_v, w_o}; }

DecoupledEmotiveParams make_decoupled_emotive(Rng& rng, std::int64_t d_model, std::int64_t d_face, std::int64_t d_text,
                                              std::int64_t d, DType dtype) {
  DecoupledEmotiveParams p;
  p.w_q = projection_init(rng, {d_model, d}, dtype);
  p.face_k = projection_init(rng, {d_face, d}, dtype);
  p.face_v = projection_init(rng, {d_face, d}, dtype);
  p.text_k = projection_init(rng, {d_text, d}, dtype);
  p.text_v = projection_init(rng, {d_text, d}, dtype);
  p.w_o = projection_init(rng, {d, d_model}, dtype);
  return p;
}

Tensor decoupled_emotive_attention(const Tensor& z_tokens, const Tensor& e_f, const Tensor& e_t,
                                   const DecoupledEmotiveParams& params) {
  auto branch = [&](const Tensor& e, const CrossAttentionParams& p, const char* name) {
    if (e.rank() < 2 || e.dim(-2) == 0) throw ValueError(fmt::format("decoupled_emotive_attention: empty {} embedding", name));
    if (e.dim(-1) != p.w_k.dim(0)) {
      throw ShapeError(fmt::format("decoupled_emotive_attention: {} embedding {} does not match projection {}", name,
                                   shape_string(e.shape()), shape_string(p.w_k.shape())));
    }
    return cross_attention(z_tokens, e, p);
  };
  auto face = branch(e_f, params.face_branch(), "face");
  auto text = branch(e_t, params.text_branch(), "text");
  return add(face, text);
}

RegionMasks RegionMasks::from_rects(std::int64_t height, std::int64_t width, const RegionRect& lip,
                                    const RegionRect& exp, const RegionRect& pose, DType dtype) {
  auto one = [&](const RegionRect& r, const char* name) {
    if (r.top < 0 || r.left < 0 || r.height < 1 || r.width < 1 || r.top + r.height > height ||
        r.left + r.width > width) {
      throw ValueError(fmt::format("{} region {{top {}, left {}, height {}, width {}}} does not fit a {}x{} grid", name,
                                   r.top, r.left, r.height, r.width, height, width));
    }
    std::vector<double> v(static_cast<std::size_t>(height * width), 0.0);
    for (std::int64_t y = r.top; y < r.top + r.height; ++y)
      for (std::int64_t x = r.left; x < r.left + r.width; ++x) v[static_cast<std::size_t>(y * width + x)] = 1.0;
    return Tensor::from({height, width}, v, dtype);
  };
  RegionMasks m{one(lip, "lip"), one(exp, "exp"), one(pose, "pose")};
  m.validate();
  return m;
}

RegionMasks RegionMasks::downsample(int factor) const {
  if (factor < 1) throw ValueError("mask downsample factor must be positive");
  auto pool = [&](const Tensor& m) {
    const std::int64_t h = m.dim(0), w = m.dim(1);
    if (h % factor || w % factor) throw ShapeError(fmt::format("mask {} not divisible by {}", shape_string(m.shape()), factor));
    const std::int64_t oh = h / factor, ow = w / factor;
    auto src = m.to_vector();
    std::vector<double> out(static_cast<std::size_t>(oh * ow), 0.0);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        if (src[static_cast<std::size_t>(y * w + x)] != 0.0) out[static_cast<std::size_t>((y / factor) * ow + x / factor)] = 1.0;
    return Tensor::from({oh, ow}, out, m.dtype());
  };
  return {pool(lip), pool(exp), pool(pose)};
}

RegionMasks RegionMasks::to(DType dtype) const { return {lip.to(dtype), exp.to(dtype), pose.to(dtype)}; }

const Tensor& RegionMasks::operator[](int region) const {
  switch (region) {
    case 0: return lip;
    case 1: return exp;
    case 2: return pose;
    default: throw ValueError(fmt::format("region index {} out of range", region));
  }
}

void RegionMasks::validate() const {
  static constexpr const char* kNames[] = {"lip", "exp", "pose"};
  for (int r = 0; r < 3; ++r) {
    const auto& m = (*this)[r];
    if (!m.defined() || m.rank() != 2) throw ShapeError(fmt::format("{} mask must be [H, W]", kNames[r]));
    if (m.shape() != lip.shape()) throw ShapeError("region masks disagree in shape");
    bool any = false;
    for (double v : m.to_vector()) {
      if (v != 0.0 && v != 1.0) throw ValueError(fmt::format("{} mask is not binary", kNames[r]));
      any = any || v == 1.0;
    }
    if (!any) throw ValueError(fmt::format("{} mask is empty", kNames[r]));
  }
}

std::vector<Tensor> EmotiveAudioParams::parameters() const {
  auto out = text_audio.parameters();
  for (const auto& r : regions) {
    auto p = r.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  out.push_back(combiner);
  return out;
}

EmotiveAudioParams make_emotive_audio(Rng& rng, std::int64_t channels, std::int64_t d_text, std::int64_t d_audio,
                                      std::int64_t d, DType dtype) {
  EmotiveAudioParams p;
  p.text_audio = make_cross_attention(rng, d_text, d_audio, d, false, false, dtype);
  for (auto& r : p.regions) r = make_cross_attention(rng, channels, d, d, true, false, dtype);
  p.combiner = Tensor::zeros({channels, 3 * channels, 1, 1}, dtype);
  p.combiner.set_requires_grad(true);
  return p;
}

Tensor emotive_audio_feature(const Tensor& e_t, const Tensor& e_a, const EmotiveAudioParams& params) {
  if (e_a.rank() < 2 || e_a.dim(-2) == 0) throw ValueError("emotive_audio_feature: empty audio context");
  return cross_attention(e_t, e_a, params.text_audio);
}

Tensor to_tokens(const Tensor& feature_map) {
  if (feature_map.rank() == 3) {
    return permute(reshape(feature_map, {feature_map.dim(0), -1}), {1, 0});
  }
  if (feature_map.rank() == 4) {
    return permute(reshape(feature_map, {feature_map.dim(0), feature_map.dim(1), -1}), {0, 2, 1});
  }
  throw ShapeError(fmt::format("to_tokens: expected [C,H,W] or [F,C,H,W], got {}", shape_string(feature_map.shape())));
}

Tensor from_tokens(const Tensor& tokens, std::int64_t height, std::int64_t width) {
  if (tokens.rank() == 2) return reshape(permute(tokens, {1, 0}), {tokens.dim(1), height, width});
  if (tokens.rank() == 3) return reshape(permute(tokens, {0, 2, 1}), {tokens.dim(0), tokens.dim(2), height, width});
  throw ShapeError(fmt::format("from_tokens: expected rank 2 or 3, got {}", shape_string(tokens.shape())));
}

Tensor region_audio_attention(const Tensor& f_v, const Tensor& f_ea, const RegionMasks& masks,
                              const EmotiveAudioParams& params, RegionFeatures* features) {
  if (f_v.rank() != 3 && f_v.rank() != 4) {
    throw ShapeError(fmt::format("region_audio_attention: visual features {} must be [C,H,W] or [F,C,H,W]",
                                 shape_string(f_v.shape())));
  }
  const std::int64_t h = f_v.dim(-2), w = f_v.dim(-1);
  for (int r = 0; r < 3; ++r) {
    if (masks[r].shape() != Shape{h, w}) {
      throw ShapeError(fmt::format("region_audio_attention: mask {} does not match grid {}x{}",
                                   shape_string(masks[r].shape()), h, w));
    }
  }
  auto tokens = to_tokens(f_v);
  std::array<Tensor, 3> parts;
  for (int r = 0; r < 3; ++r) {
    auto attended = from_tokens(cross_attention(tokens, f_ea, params.regions[static_cast<std::size_t>(r)]), h, w);
    parts[static_cast<std::size_t>(r)] = mask_apply(attended, masks[r].to(f_v.dtype()));
  }
  if (features) *features = {parts[0], parts[1], parts[2]};
  return conv2d(concat({parts[0], parts[1], parts[2]}, -3), params.combiner);
}

Tensor temporal_attention(const Tensor& frames, const CrossAttentionParams& params) {
  if (frames.rank() != 4 || frames.dim(0) < 1) {
    throw ShapeError(fmt::format("temporal_attention: expected [F,C,H,W], got {}", shape_string(frames.shape())));
  }
  const std::int64_t f = frames.dim(0), c = frames.dim(1), h = frames.dim(2), w = frames.dim(3);
  auto tokens = reshape(permute(frames, {2, 3, 0, 1}), {h * w, f, c});
  auto out = cross_attention(tokens, tokens, params);
  return permute(reshape(out, {h, w, f, c}), {2, 3, 0, 1});
}

Tensor reference_inject(const Tensor& self_tokens, const Tensor& reference_tokens, const CrossAttentionParams& params) {
  if (!reference_tokens.defined() || reference_tokens.numel() == 0) {
    return cross_attention(self_tokens, self_tokens, params);
  }
  if (reference_tokens.dim(-1) != self_tokens.dim(-1)) {
    throw ShapeError(fmt::format("reference_inject: reference {} and self {} differ in token width",
                                 shape_string(reference_tokens.shape()), shape_string(self_tokens.shape())));
  }
  Tensor ref = reference_tokens;
  if (self_tokens.rank() == 3 && ref.rank() == 2) ref = broadcast_batch(ref, self_tokens.dim(0));
  return cross_attention(self_tokens, concat({self_tokens, ref}, -2), params);
}

EmbeddingBank::EmbeddingBank(const Config& config, const RegionMasks& masks, std::uint64_t seed) : config_(config) {
  if (config.channels < 1 || config.d_face < 1 || config.d_text < 1 || config.audio_features < 1 ||
      config.audio_radius < 0 || config.text_tokens < 1) {
    throw ValueError("EmbeddingBank: invalid dimensions");
  }
  if (masks.lip.shape() != Shape{config.height, config.width}) throw ShapeError("EmbeddingBank: masks do not match grid");
  const auto hw = static_cast<std::size_t>(config.height * config.width);
  auto lip = masks.lip.to_vector(), exp = masks.exp.to_vector(), pose = masks.pose.to_vector();
  std::vector<double> keep(hw * static_cast<std::size_t>(config.channels));
  std::int64_t kept = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    const std::size_t p = i % hw;
    keep[i] = (lip[p] + exp[p] + pose[p]) == 0.0 ? 1.0 : 0.0;
    kept += keep[i] != 0.0;
  }
  if (kept == 0) throw ValueError("EmbeddingBank: regions cover the whole frame");
  face_mask_ = Tensor::from({config.channels, config.height, config.width}, keep);

  Rng root(seed);
  Rng face_rng = root.split("face_projection");
  face_projection_ = scale(face_rng.normal_tensor({static_cast<std::int64_t>(keep.size()), config.d_face}, DType::f64),
                           1.0 / std::sqrt(static_cast<double>(kept)));
  Rng text_rng = root.split("emotion_table");
  emotion_table_ = text_rng.normal_tensor({kNumEmotions * config.text_tokens, config.d_text}, DType::f64);
}

Tensor EmbeddingBank::face(const Tensor& reference_frame, DType dtype) const {
  const Shape expected{config_.channels, config_.height, config_.width};
  if (reference_frame.shape() != expected) {
    throw ShapeError(fmt::format("face embedding: reference {} expected {}", shape_string(reference_frame.shape()),
                                 shape_string(expected)));
  }
  NoGradGuard no_grad;
  auto flat = reshape(mul(reference_frame.to(DType::f64), face_mask_), {1, -1});
  return matmul(flat, face_projection_).to(dtype);
}

Tensor EmbeddingBank::text(Emotion emotion, double intensity, DType dtype) const {
  if (!(intensity >= 0.0 && intensity <= 1.0)) throw ValueError(fmt::format("intensity {} outside [0, 1]", intensity));
  NoGradGuard no_grad;
  const auto n = config_.text_tokens;
  auto row = slice(emotion_table_, 0, static_cast<int>(emotion) * n, n);
  const double s = emotion == Emotion::neutral ? 1.0 : intensity;
  return scale(row, s).to(dtype);
}

Tensor EmbeddingBank::audio(const Tensor& audio, std::span<const std::int64_t> frames, DType dtype) const {
  if (audio.rank() != 2 || audio.dim(1) != config_.audio_features || audio.dim(0) < 1) {
    throw ShapeError(fmt::format("audio features {} expected [T, {}]", shape_string(audio.shape()), config_.audio_features));
  }
  if (frames.empty()) throw ValueError("audio window needs at least one frame");
  const std::int64_t total = audio.dim(0), feat = config_.audio_features, win = audio_window(), width = d_audio();
  auto src = audio.to_vector();
  std::vector<double> out(frames.size() * static_cast<std::size_t>(win * width), 0.0);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    if (frames[f] < 0 || frames[f] >= total) {
      throw ValueError(fmt::format("audio frame {} outside track of length {}", frames[f], total));
    }
    for (std::int64_t o = 0; o < win; ++o) {
      const std::int64_t src_frame = std::clamp<std::int64_t>(frames[f] + o - config_.audio_radius, 0, total - 1);
      double* dst = out.data() + (static_cast<std::int64_t>(f) * win + o) * width;
      std::copy_n(src.begin() + src_frame * feat, feat, dst);
      dst[feat + o] = 1.0;
    }
  }
  return Tensor::from({static_cast<std::int64_t>(frames.size()), win, width}, out, dtype);
}

}  // namespace emocast
