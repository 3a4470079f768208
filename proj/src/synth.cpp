// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "emocast/dataset.hpp"
#include "emocast/ops.hpp"
#include "emocast/stats.hpp"

namespace emocast {

namespace {

constexpr double kGlyphAmplitude = 0.5;
constexpr double kPoseAmplitude = 0.6;
constexpr double kPosePeriod = 16.0;

struct Grid {
  std::int64_t c, h, w;
  std::size_t at(std::int64_t ch, std::int64_t y, std::int64_t x) const {
    return static_cast<std::size_t>((ch * h + y) * w + x);
  }
};

std::vector<double> energy_track(Rng& rng, std::int64_t frames) {
  const double p1 = rng.uniform(6.0, 12.0), p2 = rng.uniform(3.0, 5.0);
  const double phi1 = rng.uniform(0.0, 2 * std::numbers::pi), phi2 = rng.uniform(0.0, 2 * std::numbers::pi);
  std::vector<double> e(static_cast<std::size_t>(frames));
  for (std::int64_t t = 0; t < frames; ++t) {
    const double td = static_cast<double>(t);
    const double v = 0.5 + 0.3 * std::sin(2 * std::numbers::pi * td / p1 + phi1) +
                     0.15 * std::sin(2 * std::numbers::pi * td / p2 + phi2) + 0.05 * rng.normal();
    e[static_cast<std::size_t>(t)] = std::clamp(v, 0.0, 1.0);
  }
  return e;
}

}  // namespace

Tensor audio_features(const SyntheticWorldConfig& config, std::span<const double> energy) {
  Rng projection_rng = Rng(config.seed).split("audio_projection");
  std::vector<double> proj_w, proj_b;
  for (std::int64_t k = 1; k < config.audio_features; ++k) {
    proj_w.push_back(projection_rng.uniform(-1.0, 1.0));
    proj_b.push_back(projection_rng.uniform(-0.5, 0.5));
  }
  std::vector<double> audio;
  for (double e : energy) {
    audio.push_back(e);
    for (std::size_t k = 0; k < proj_w.size(); ++k) audio.push_back(proj_w[k] * e + proj_b[k]);
  }
  return Tensor::from({static_cast<std::int64_t>(energy.size()), config.audio_features}, audio, DType::f32);
}

AudioTrack synth_audio_track(const SyntheticWorldConfig& config, std::int64_t frames, std::uint64_t seed) {
  if (frames < 1) throw DataError(fmt::format("audio track of {} frames", frames));
  Rng rng = Rng(config.seed).split("heldout_audio").split(seed);
  AudioTrack track;
  track.energy = energy_track(rng, frames);
  track.features = audio_features(config, track.energy);
  return track;
}

void SyntheticWorldConfig::validate() const {
  if (identities < 1) throw DataError("synthetic world needs at least one identity");
  if (emotions.empty()) throw DataError("synthetic world needs at least one emotion");
  std::set<Emotion> seen(emotions.begin(), emotions.end());
  if (seen.size() != emotions.size()) throw DataError("synthetic world lists an emotion twice");
  if (clips_per_cell < 1 || wild_clips_per_cell < 0) throw DataError("clip counts per cell must be positive");
  if (!(wild_shuffled_fraction >= 0.0 && wild_shuffled_fraction <= 1.0)) {
    throw DataError(fmt::format("wild_shuffled_fraction {} outside [0, 1]", wild_shuffled_fraction));
  }
  if (height < 1 || width < 1 || channels < 1) throw DataError("grid dimensions must be positive");
  if (frames_per_clip < 2) throw DataError("clips need at least two frames");
  if (audio_features < 1) throw DataError("audio_features must be positive");
  if (!(intensity_min > 0.0 && intensity_min <= intensity_max && intensity_max <= 1.0)) {
    throw DataError(fmt::format("intensity range [{}, {}] must lie in (0, 1]", intensity_min, intensity_max));
  }
  try {
    masks();
  } catch (const ValueError& e) {
    throw DataError(e.what());
  }
}

RegionMasks SyntheticWorldConfig::masks(DType dtype) const {
  return RegionMasks::from_rects(height, width, lip, exp, pose, dtype);
}

FaceRenderer::FaceRenderer(const SyntheticWorldConfig& config) : config_(config) {
  Rng glyph_rng = Rng(config.seed).split("glyph");
  const Grid g{config.channels, config.height, config.width};
  for (int e = 0; e < kNumEmotions; ++e) {
    std::vector<double> v(static_cast<std::size_t>(g.c * g.h * g.w), 0.0);
    Rng r = glyph_rng.split(static_cast<std::uint64_t>(e));
    if (e != static_cast<int>(Emotion::neutral)) {
      for (std::int64_t ch = 0; ch < g.c; ++ch)
        for (std::int64_t y = config.exp.top; y < config.exp.top + config.exp.height; ++y)
          for (std::int64_t x = config.exp.left; x < config.exp.left + config.exp.width; ++x)
            v[g.at(ch, y, x)] = r.uniform() < 0.5 ? -kGlyphAmplitude : kGlyphAmplitude;
    }
    glyphs_.push_back(Tensor::from({g.c, g.h, g.w}, v));
  }
}

Tensor FaceRenderer::identity_pattern(int identity) const {
  Rng r = Rng(config_.seed).split("identity").split(static_cast<std::uint64_t>(identity));
  const Grid g{config_.channels, config_.height, config_.width};
  std::vector<double> v(static_cast<std::size_t>(g.c * g.h * g.w));
  for (std::int64_t ch = 0; ch < g.c; ++ch) {
    const double fy = r.uniform(0.3, 1.2), fx = r.uniform(0.3, 1.2);
    const double py = r.uniform(0, 2 * std::numbers::pi), px = r.uniform(0, 2 * std::numbers::pi);
    const double level = r.uniform(0.3, 0.5);
    for (std::int64_t y = 0; y < g.h; ++y)
      for (std::int64_t x = 0; x < g.w; ++x)
        v[g.at(ch, y, x)] = level + 0.2 * std::sin(fy * static_cast<double>(y) + py) * std::cos(fx * static_cast<double>(x) + px);
  }
  return Tensor::from({g.c, g.h, g.w}, v);
}

Tensor FaceRenderer::emotion_glyph(Emotion emotion) const { return glyphs_.at(static_cast<std::size_t>(emotion)); }

Tensor FaceRenderer::render(int identity, Emotion emotion, double intensity, double energy, double pose_offset) const {
  const Grid g{config_.channels, config_.height, config_.width};
  auto v = identity_pattern(identity).to_vector();
  const auto& pose = config_.pose;
  const double cy = static_cast<double>(pose.top) + (static_cast<double>(pose.height) - 1) * 0.5 * (1.0 + pose_offset);
  const double cx = static_cast<double>(pose.left) + (static_cast<double>(pose.width) - 1) * 0.5;
  for (std::int64_t ch = 0; ch < g.c; ++ch)
    for (std::int64_t y = pose.top; y < pose.top + pose.height; ++y)
      for (std::int64_t x = pose.left; x < pose.left + pose.width; ++x) {
        const double d2 = (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy) +
                          (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx);
        v[g.at(ch, y, x)] += kPoseAmplitude * std::exp(-d2 / (2 * 0.8 * 0.8));
      }
  auto glyph = glyphs_.at(static_cast<std::size_t>(emotion)).to_vector();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += intensity * glyph[i];
  const auto& lip = config_.lip;
  const double filled_rows = std::clamp(energy, 0.0, 1.0) * static_cast<double>(lip.height);
  for (std::int64_t ch = 0; ch < g.c; ++ch)
    for (std::int64_t y = 0; y < lip.height; ++y) {
      const double fill = std::clamp(filled_rows - static_cast<double>(y), 0.0, 1.0);
      for (std::int64_t x = lip.left; x < lip.left + lip.width; ++x) v[g.at(ch, lip.top + y, x)] = fill;
    }
  return Tensor::from({g.c, g.h, g.w}, v);
}

std::vector<double> region_means(const Tensor& frames, const Tensor& mask) {
  if (frames.rank() != 3 && frames.rank() != 4) {
    throw ShapeError(fmt::format("region_means: frames {} must be [C,H,W] or [F,C,H,W]", shape_string(frames.shape())));
  }
  const std::int64_t h = frames.dim(-2), w = frames.dim(-1), c = frames.dim(-3);
  if (mask.shape() != Shape{h, w}) {
    throw ShapeError(fmt::format("region_means: mask {} does not match frames {}", shape_string(mask.shape()),
                                 shape_string(frames.shape())));
  }
  const std::int64_t f = frames.rank() == 4 ? frames.dim(0) : 1;
  auto m = mask.to_vector();
  double count = 0;
  for (double x : m) count += x;
  if (count == 0) throw ValueError("region_means: empty mask");
  auto v = frames.to_vector();
  std::vector<double> out(static_cast<std::size_t>(f), 0.0);
  for (std::int64_t fi = 0; fi < f; ++fi) {
    double acc = 0;
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < h * w; ++p) acc += m[static_cast<std::size_t>(p)] * v[static_cast<std::size_t>((fi * c + ch) * h * w + p)];
    out[static_cast<std::size_t>(fi)] = acc / (count * static_cast<double>(c));
  }
  return out;
}

std::string emotion_prompt(Emotion emotion, double intensity) {
  return fmt::format("a face with {} expression, intensity {:.2f}", to_string(emotion), intensity);
}

ClipRecord SyntheticAnnotator::annotate(const ClipRecord& record) const {
  auto it = truth_.find(record.clip_id);
  if (it == truth_.end()) {
    throw DataError(fmt::format("annotator: unknown source for clip '{}'", record.clip_id));
  }
  ClipRecord out = record;
  out.emotion_label = it->second.emotion;
  out.intensity = it->second.emotion == Emotion::neutral ? 0.0 : it->second.intensity;
  out.text_prompt = emotion_prompt(out.emotion_label, out.intensity);
  return out;
}

ClipRecord annotate(const ClipRecord& record, const Annotator& annotator) { return annotator.annotate(record); }

SyntheticWorld synth_generate(const SyntheticWorldConfig& config) {
  config.validate();
  SyntheticWorld world;
  world.config = config;
  FaceRenderer renderer(config);
  const auto masks = config.masks();
  Rng root(config.seed);
  Rng clip_rng = root.split("clips");

  struct Pending {
    ClipRecord record;
    int identity;
    bool wild;
  };
  std::vector<Pending> pending;
  for (int id = 0; id < config.identities; ++id) {
    for (Emotion e : config.emotions) {
      for (int k = 0; k < config.clips_per_cell + config.wild_clips_per_cell; ++k) {
        const bool wild = k >= config.clips_per_cell;
        ClipRecord r;
        r.identity_id = fmt::format("id{:02d}", id);
        r.clip_id = wild ? fmt::format("{}_{}_w{:02d}", r.identity_id, to_string(e), k - config.clips_per_cell)
                         : fmt::format("{}_{}_{:02d}", r.identity_id, to_string(e), k);
        r.source_tag = wild ? SourceTag::wild : e == Emotion::neutral ? SourceTag::neutral_highsync : SourceTag::lab_emotional;
        r.frame_count = config.frames_per_clip;
        r.frames_ref = fmt::format("frames/{}.ettd", r.clip_id);
        r.audio_ref = fmt::format("audio/{}.ettd", r.clip_id);
        double intensity = 0.0;
        if (e != Emotion::neutral) {
          intensity = config.intensity_min == config.intensity_max
                          ? config.intensity_min
                          : clip_rng.split(r.clip_id).split("intensity").uniform(config.intensity_min, config.intensity_max);
        }
        world.truth[r.clip_id] = ClipTruth{e, intensity, false};
        pending.push_back({r, id, wild});
      }
    }
  }

  std::vector<std::size_t> wild_indices;
  for (std::size_t i = 0; i < pending.size(); ++i)
    if (pending[i].wild) wild_indices.push_back(i);
  const auto n_shuffled = static_cast<std::size_t>(std::llround(config.wild_shuffled_fraction * static_cast<double>(wild_indices.size())));
  Rng shuffle_pick = root.split("shuffle_pick");
  for (std::size_t i = 0; i < n_shuffled; ++i) {
    const auto j = i + static_cast<std::size_t>(shuffle_pick.uniform_int(0, static_cast<std::int64_t>(wild_indices.size() - i)));
    std::swap(wild_indices[i], wild_indices[j]);
    world.truth[pending[wild_indices[i]].record.clip_id].shuffled_audio = true;
  }

  SyntheticAnnotator annotator(world.truth);
  std::vector<ClipRecord> records;
  for (auto& p : pending) {
    const auto& truth = world.truth.at(p.record.clip_id);
    Rng r = clip_rng.split(p.record.clip_id);
    auto energy = energy_track(r, config.frames_per_clip);
    const double pose_phase = r.uniform(0, 2 * std::numbers::pi);
    std::vector<Tensor> frames;
    for (std::int64_t t = 0; t < config.frames_per_clip; ++t) {
      const double offset = std::sin(2 * std::numbers::pi * static_cast<double>(t) / kPosePeriod + pose_phase);
      frames.push_back(renderer.render(p.identity, truth.emotion, truth.intensity, energy[static_cast<std::size_t>(t)], offset));
    }
    auto stacked = reshape(concat(frames, 0), {config.frames_per_clip, config.channels, config.height, config.width});
    auto heard = energy;
    if (truth.shuffled_audio) {
      for (std::size_t i = heard.size() - 1; i > 0; --i) {
        std::swap(heard[i], heard[static_cast<std::size_t>(r.uniform_int(0, static_cast<std::int64_t>(i) + 1))]);
      }
    }
    auto record = annotate(p.record, annotator);
    try {
      record.sync_score = pearson(heard, region_means(stacked, masks.lip));
    } catch (const UndefinedCorrelation&) {
      record.sync_score = 0.0;
    }
    world.store.put(record.frames_ref, stacked.to(DType::f32));
    world.store.put(record.audio_ref, audio_features(config, heard));
    records.push_back(std::move(record));
  }
  world.manifest = Manifest(std::move(records));
  return world;
}

SyncScorer make_synthetic_scorer(const ClipStore& store, const Tensor& lip_mask) {
  return [&store, lip_mask](const ClipRecord& r) {
    const auto& audio = store.get(r.audio_ref);
    const auto& frames = store.get(r.frames_ref);
    std::vector<double> energy;
    auto a = audio.to_vector();
    for (std::int64_t t = 0; t < audio.dim(0); ++t) energy.push_back(a[static_cast<std::size_t>(t * audio.dim(1))]);
    try {
      return pearson(energy, region_means(frames, lip_mask));
    } catch (const UndefinedCorrelation&) {
      return 0.0;
    }
  };
}

Manifest lip_sync_filter(const Manifest& manifest, const SyncScorer& scorer, double threshold) {
  return manifest.filter([&](const ClipRecord& r) { return scorer(r) >= threshold; });
}

}  // namespace emocast
