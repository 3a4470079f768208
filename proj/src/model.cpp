// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/model.hpp"

#include <cmath>

#include <fmt/format.h>

#include "emocast/ops.hpp"

namespace emocast {

namespace {

Tensor uniform_param(Rng& rng, Shape shape, std::int64_t fan_in, DType dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  auto t = rng.uniform_tensor(std::move(shape), -bound, bound, dtype);
  t.set_requires_grad(true);
  return t;
}

Tensor zero_param(Shape shape, DType dtype) {
  auto t = Tensor::zeros(std::move(shape), dtype);
  t.set_requires_grad(true);
  return t;
}

Tensor conv_param(Rng& rng, std::int64_t out, std::int64_t in, std::int64_t k, DType dtype) {
  return uniform_param(rng, {out, in, k, k}, in * k * k, dtype);
}

ResBlock make_res_block(Rng& rng, std::int64_t in, std::int64_t out, std::int64_t time_dim, DType dtype) {
  ResBlock b;
  b.conv1 = conv_param(rng, out, in, 3, dtype);
  b.bias1 = zero_param({out}, dtype);
  if (time_dim > 0) {
    b.time_w = uniform_param(rng, {time_dim, out}, time_dim, dtype);
    b.time_b = zero_param({out}, dtype);
  }
  b.conv2 = conv_param(rng, out, out, 3, dtype);
  b.bias2 = zero_param({out}, dtype);
  if (in != out) b.skip = conv_param(rng, out, in, 1, dtype);
  return b;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

Tensor res_forward(const ResBlock& b, const Tensor& x, const Tensor& temb) {
  auto h = conv2d(silu(x), b.conv1, b.bias1);
  if (b.time_w.defined()) {
    h = add(h, reshape(linear(silu(temb), b.time_w, b.time_b), {-1, 1, 1}));
  }
  h = conv2d(silu(h), b.conv2, b.bias2);
  return add(b.skip.defined() ? conv2d(x, b.skip) : x, h);
}

void append(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix, const CrossAttentionParams& p) {
  out.emplace_back(prefix + ".w_q", p.w_q);
  out.emplace_back(prefix + ".w_k", p.w_k);
  out.emplace_back(prefix + ".w_v", p.w_v);
  if (p.w_o.defined()) out.emplace_back(prefix + ".w_o", p.w_o);
}

void append(std::vector<std::pair<std::string, Tensor>>& out, std::vector<std::pair<std::string, Tensor>> more) {
  for (auto& item : more) out.push_back(std::move(item));
}

Tensor timestep_embedding(int t, std::int64_t dim, DType dtype) {
  const std::int64_t half = dim / 2;
  std::vector<double> v(static_cast<std::size_t>(dim));
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[static_cast<std::size_t>(i)] = std::sin(t * freq);
    v[static_cast<std::size_t>(half + i)] = std::cos(t * freq);
  }
  return Tensor::from({1, dim}, v, dtype);
}

void check_rect(const char* name, const RegionRect& r, std::int64_t h, std::int64_t w) {
  if (r.height < 1 || r.width < 1 || r.top < 0 || r.left < 0 || r.top + r.height > h || r.left + r.width > w) {
    throw ValueError(fmt::format("{} region [{}, {}, {}x{}] outside the {}x{} grid", name, r.top, r.left, r.height, r.width,
                                 h, w));
  }
}

}  // namespace

const char* to_string(Stage stage) { return stage == Stage::spatial ? "spatial" : "temporal"; }

Stage parse_stage(const std::string& text) {
  if (text == "spatial") return Stage::spatial;
  if (text == "temporal") return Stage::temporal;
  throw ValueError(fmt::format("unknown stage '{}'", text));
}

void ArchConfig::validate() const {
  if (image_channels < 1 || height < 1 || width < 1) throw ValueError("grid sizes must be positive");
  if (channels.empty()) throw ValueError("at least one resolution level is required");
  for (auto c : channels)
    if (c < 1) throw ValueError(fmt::format("level width {} must be positive", c));
  const std::int64_t factor = std::int64_t{1} << (channels.size() - 1);
  if (height % factor || width % factor) {
    throw ValueError(fmt::format("{}x{} grid does not halve {} times", height, width, channels.size() - 1));
  }
  if (head_dim < 1 || d_face < 1 || d_text < 1 || text_tokens < 1 || audio_features < 1 || audio_radius < 0) {
    throw ValueError("attention and embedding sizes must be positive");
  }
  if (time_dim < 2 || time_dim % 2) throw ValueError(fmt::format("time_dim {} must be even", time_dim));
  if (frames < 1) throw ValueError(fmt::format("window of {} frames", frames));
  if (!decoupled && d_face != d_text) {
    throw ValueError(fmt::format("shared attention over [e_t; e_f] needs d_face == d_text, got {} and {}", d_face, d_text));
  }
  if (diffusion_steps < 1 || !(beta_first > 0 && beta_last < 1 && beta_first <= beta_last)) {
    throw ValueError("invalid noise schedule");
  }
  check_rect("lip", lip, height, width);
  check_rect("exp", exp, height, width);
  check_rect("pose", pose, height, width);
}

RegionMasks ArchConfig::masks() const { return RegionMasks::from_rects(height, width, lip, exp, pose, dtype); }

EmbeddingBank::Config ArchConfig::bank_config() const {
  return {image_channels, height, width, d_face, d_text, audio_features, audio_radius, text_tokens};
}

NoiseSchedule ArchConfig::schedule() const { return make_linear_schedule(diffusion_steps, beta_first, beta_last); }

std::vector<std::pair<std::string, Tensor>> ResBlock::named(const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out{{prefix + ".conv1", conv1}, {prefix + ".bias1", bias1}};
  if (time_w.defined()) {
    out.emplace_back(prefix + ".time_w", time_w);
    out.emplace_back(prefix + ".time_b", time_b);
  }
  out.emplace_back(prefix + ".conv2", conv2);
  out.emplace_back(prefix + ".bias2", bias2);
  if (skip.defined()) out.emplace_back(prefix + ".skip", skip);
  return out;
}

std::vector<std::pair<std::string, Tensor>> EmoCastModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("reference.conv_in", reference.conv_in);
  out.emplace_back("reference.bias_in", reference.bias_in);
  out.emplace_back("reference.position", reference.position);
  for (std::size_t l = 0; l < reference.levels.size(); ++l) append(out, reference.levels[l].named(fmt::format("reference.level{}", l)));
  out.emplace_back("conv_in", conv_in);
  out.emplace_back("bias_in", bias_in);
  out.emplace_back("position", position);
  out.emplace_back("time.w1", time_w1);
  out.emplace_back("time.b1", time_b1);
  out.emplace_back("time.w2", time_w2);
  out.emplace_back("time.b2", time_b2);
  if (config.emotive_audio) append(out, "text_audio", text_audio);
  static constexpr const char* kRegionNames[] = {"lip", "exp", "pose"};
  for (std::size_t l = 0; l < down.size(); ++l) {
    const auto& d = down[l];
    const auto p = fmt::format("down{}", l);
    append(out, d.res.named(p + ".res"));
    append(out, p + ".self_attn", d.self_attn);
    if (config.decoupled) {
      out.emplace_back(p + ".emotive.w_q", d.emotive.w_q);
      out.emplace_back(p + ".emotive.face_k", d.emotive.face_k);
      out.emplace_back(p + ".emotive.face_v", d.emotive.face_v);
      out.emplace_back(p + ".emotive.text_k", d.emotive.text_k);
      out.emplace_back(p + ".emotive.text_v", d.emotive.text_v);
      out.emplace_back(p + ".emotive.w_o", d.emotive.w_o);
    } else {
      append(out, p + ".shared", d.shared);
    }
    for (int r = 0; r < 3; ++r) append(out, p + ".region." + kRegionNames[r], d.regions[static_cast<std::size_t>(r)]);
    out.emplace_back(p + ".combiner", d.combiner);
    append(out, p + ".temporal", d.temporal);
  }
  for (std::size_t l = 0; l < up.size(); ++l) append(out, up[l].named(fmt::format("up{}", l)));
  out.emplace_back("conv_out", conv_out);
  out.emplace_back("bias_out", bias_out);
  return out;
}

std::vector<Tensor> EmoCastModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

bool EmoCastModel::is_temporal(const std::string& name) { return name.find(".temporal.") != std::string::npos; }

std::int64_t EmoCastModel::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : named_parameters()) n += t.numel();
  return n;
}

EmoCastModel build_model(const ArchConfig& config, std::uint64_t seed) {
  config.validate();
  EmoCastModel m;
  m.config = config;
  m.seed = seed;
  const DType dt = config.dtype;
  const Rng root(seed);
  const auto& ch = config.channels;
  const std::int64_t levels = config.levels();
  const std::int64_t d = config.head_dim;

  {
    Rng rng = root.split("reference");
    m.reference.conv_in = conv_param(rng, ch[0], config.image_channels, 3, dt);
    m.reference.bias_in = zero_param({ch[0]}, dt);
    m.reference.position = uniform_param(rng, {ch[0], config.height, config.width}, ch[0], dt);
    for (std::int64_t l = 0; l < levels; ++l) {
      const auto in = l == 0 ? ch[0] : ch[static_cast<std::size_t>(l - 1)];
      m.reference.levels.push_back(make_res_block(rng, in, ch[static_cast<std::size_t>(l)], 0, dt));
    }
  }

  Rng rng = root.split("denoiser");
  m.conv_in = conv_param(rng, ch[0], config.image_channels, 3, dt);
  m.bias_in = zero_param({ch[0]}, dt);
  m.position = uniform_param(rng, {ch[0], config.height, config.width}, ch[0], dt);
  m.time_w1 = uniform_param(rng, {config.time_dim, config.time_dim}, config.time_dim, dt);
  m.time_b1 = zero_param({config.time_dim}, dt);
  m.time_w2 = uniform_param(rng, {config.time_dim, config.time_dim}, config.time_dim, dt);
  m.time_b2 = zero_param({config.time_dim}, dt);

  m.bank = EmbeddingBank(config.bank_config(), config.masks(), root.split("bank").next_u64());
  const std::int64_t d_audio = m.bank.d_audio();
  if (config.emotive_audio) m.text_audio = make_cross_attention(rng, config.d_text, d_audio, d, false, false, dt);
  const std::int64_t audio_ctx = config.emotive_audio ? d : d_audio;

  const auto full_masks = config.masks();
  for (std::int64_t l = 0; l < levels; ++l) {
    const auto c = ch[static_cast<std::size_t>(l)];
    const auto in = l == 0 ? ch[0] : ch[static_cast<std::size_t>(l - 1)];
    DenoiserLevel lv;
    lv.res = make_res_block(rng, in, c, config.time_dim, dt);
    lv.self_attn = make_cross_attention(rng, c, c, d, true, false, dt);
    if (config.decoupled) {
      lv.emotive = make_decoupled_emotive(rng, c, config.d_face, config.d_text, d, dt);
    } else {
      lv.shared = make_cross_attention(rng, c, config.d_text, d, true, false, dt);
    }
    for (auto& r : lv.regions) r = make_cross_attention(rng, c, audio_ctx, d, true, false, dt);
    lv.combiner = zero_param({c, 3 * c, 1, 1}, dt);
    lv.temporal = make_cross_attention(rng, c, c, d, true, true, dt);
    m.down.push_back(std::move(lv));
    m.masks.push_back(l == 0 ? full_masks : full_masks.downsample(1 << l));
  }
  for (std::int64_t l = 0; l + 1 < levels; ++l) {
    const auto c = ch[static_cast<std::size_t>(l)];
    m.up.push_back(make_res_block(rng, c + ch[static_cast<std::size_t>(l + 1)], c, config.time_dim, dt));
  }
  m.conv_out = conv_param(rng, config.image_channels, ch[0], 3, dt);
  m.bias_out = zero_param({config.image_channels}, dt);
  return m;
}

std::vector<Tensor> reference_features(const EmoCastModel& model, const Tensor& reference_frame) {
  const auto& cfg = model.config;
  const Shape expected{cfg.image_channels, cfg.height, cfg.width};
  if (reference_frame.shape() != expected) {
    throw ShapeError(fmt::format("reference frame {} expected {}", shape_string(reference_frame.shape()),
                                 shape_string(expected)));
  }
  auto x = add(conv2d(reference_frame.to(cfg.dtype), model.reference.conv_in, model.reference.bias_in),
               model.reference.position);
  std::vector<Tensor> out;
  for (std::size_t l = 0; l < model.reference.levels.size(); ++l) {
    if (l > 0) x = avg_pool2d(x, 2);
    x = res_forward(model.reference.levels[l], x, Tensor());
    out.push_back(to_tokens(x));
  }
  return out;
}

Conditions make_conditions(const EmoCastModel& model, const Tensor& reference_frame, Emotion emotion, double intensity,
                           const Tensor& audio_track, std::span<const std::int64_t> frames) {
  const DType dt = model.config.dtype;
  Conditions c;
  c.e_f = model.bank.face(reference_frame, dt);
  c.e_t = model.bank.text(emotion, intensity, dt);
  c.e_a = model.bank.audio(audio_track, frames, dt);
  c.reference = reference_features(model, reference_frame);
  return c;
}

Tensor predict_noise(const EmoCastModel& model, const Tensor& z_t, int t, const Conditions& cond, Stage stage) {
  const auto& cfg = model.config;
  if (!cond.e_f.defined()) throw ValueError("predict_noise: missing condition e_f (face embedding)");
  if (!cond.e_t.defined()) throw ValueError("predict_noise: missing condition e_t (text embedding)");
  if (!cond.e_a.defined()) throw ValueError("predict_noise: missing condition e_a (audio windows)");
  if (cond.reference.size() != model.down.size()) {
    throw ValueError(fmt::format("predict_noise: missing condition reference features ({} of {} levels)",
                                 cond.reference.size(), model.down.size()));
  }
  if (z_t.rank() != 4 || z_t.dim(1) != cfg.image_channels || z_t.dim(2) != cfg.height || z_t.dim(3) != cfg.width) {
    throw ShapeError(fmt::format("predict_noise: z_t {} expected [F, {}, {}, {}]", shape_string(z_t.shape()),
                                 cfg.image_channels, cfg.height, cfg.width));
  }
  if (cond.e_a.rank() != 3 || cond.e_a.dim(0) != z_t.dim(0)) {
    throw ShapeError(fmt::format("predict_noise: audio windows {} for {} frames", shape_string(cond.e_a.shape()), z_t.dim(0)));
  }
  const auto sched_steps = cfg.diffusion_steps;
  if (t < 1 || t > sched_steps) throw ValueError(fmt::format("timestep {} outside [1, {}]", t, sched_steps));

  auto temb = linear(timestep_embedding(t, cfg.time_dim, cfg.dtype), model.time_w1, model.time_b1);
  temb = linear(silu(temb), model.time_w2, model.time_b2);

  Tensor audio_ctx = cond.e_a;
  if (cfg.emotive_audio) {
    EmotiveAudioParams ea;
    ea.text_audio = model.text_audio;
    audio_ctx = emotive_audio_feature(cond.e_t, cond.e_a, ea);
  }
  const Tensor text_face = cfg.decoupled ? Tensor() : concat({cond.e_t, cond.e_f}, 0);

  auto x = add(conv2d(z_t, model.conv_in, model.bias_in), model.position);
  std::vector<Tensor> skips;
  for (std::size_t l = 0; l < model.down.size(); ++l) {
    const auto& lv = model.down[l];
    if (l > 0) x = avg_pool2d(x, 2);
    x = res_forward(lv.res, x, temb);
    const auto h = x.dim(2), w = x.dim(3);
    auto tokens = to_tokens(x);
    tokens = add(tokens, reference_inject(tokens, cond.reference[l], lv.self_attn));
    tokens = add(tokens, cfg.decoupled ? decoupled_emotive_attention(tokens, cond.e_f, cond.e_t, lv.emotive)
                                       : cross_attention(tokens, text_face, lv.shared));
    x = from_tokens(tokens, h, w);
    EmotiveAudioParams ea;
    ea.regions = lv.regions;
    ea.combiner = lv.combiner;
    x = add(x, region_audio_attention(x, audio_ctx, model.masks[l], ea));
    if (stage == Stage::temporal) x = add(x, temporal_attention(x, lv.temporal));
    skips.push_back(x);
  }
  for (std::size_t l = model.up.size(); l-- > 0;) {
    x = concat({upsample_nearest2d(x, 2), skips[l]}, 1);
    x = res_forward(model.up[l], x, temb);
  }
  return conv2d(silu(x), model.conv_out, model.bias_out);
}

Tensor generate(const EmoCastModel& model, const GenerateRequest& request) {
  const auto& cfg = model.config;
  const std::int64_t frames = request.frames.value_or(cfg.frames);
  if (frames < 1) throw ValueError(fmt::format("cannot generate {} frames", frames));
  if (!request.audio_track.defined() || request.audio_track.rank() != 2) {
    throw ShapeError("generate: audio track must be [T, A]");
  }
  if (request.start_frame < 0 || request.audio_track.dim(0) < request.start_frame + frames) {
    throw ValueError(fmt::format("generate: audio track has {} frames, need {} from frame {}", request.audio_track.dim(0),
                                 frames, request.start_frame));
  }
  NoGradGuard no_grad;
  std::vector<std::int64_t> indices;
  for (std::int64_t i = 0; i < frames; ++i) indices.push_back(request.start_frame + i);
  const auto cond = make_conditions(model, request.reference_frame, request.emotion, request.intensity, request.audio_track,
                                    indices);
  const auto stage = request.stage;
  Denoiser denoiser = [&](const Tensor& z, int t) { return predict_noise(model, z, t, cond, stage); };
  return sample_loop(denoiser, {frames, cfg.image_channels, cfg.height, cfg.width}, cfg.schedule(), request.sampler,
                     request.seed, {}, cfg.dtype);
}

}  // namespace emocast
