// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <fmt/format.h>

#include "emocast/dataset.hpp"
#include "emocast/ops.hpp"

namespace emocast {

namespace {

template <typename T>
const T& pick(const std::vector<T>& items, Rng& rng) {
  return items[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(items.size())))];
}

TrainingPair make_pair(const ClipStore& store, const ClipRecord& target, std::int64_t start, std::int64_t window,
                       const ClipRecord& reference, std::int64_t reference_index) {
  NoGradGuard no_grad;
  const auto& frames = store.get(target.frames_ref);
  if (frames.rank() != 4 || frames.dim(0) < start + window) {
    throw DataError(fmt::format("clip {}: frame array {} shorter than its window", target.clip_id, shape_string(frames.shape())));
  }
  const auto& ref_frames = store.get(reference.frames_ref);
  if (ref_frames.rank() != 4 || reference_index >= ref_frames.dim(0)) {
    throw DataError(fmt::format("clip {}: reference frame {} out of range", reference.clip_id, reference_index));
  }
  TrainingPair p;
  p.target_window = slice(frames, 0, start, window);
  p.reference_frame = reshape(slice(ref_frames, 0, reference_index, 1), {ref_frames.dim(1), ref_frames.dim(2), ref_frames.dim(3)});
  p.identity_id = target.identity_id;
  p.emotion = target.emotion_label;
  p.intensity = target.intensity;
  p.audio_track = store.get(target.audio_ref);
  for (std::int64_t i = 0; i < window; ++i) p.frame_indices.push_back(start + i);
  p.reference_clip_id = reference.clip_id;
  p.target_clip_id = target.clip_id;
  p.reference_frame_index = reference_index;
  p.target_source = target.source_tag;
  p.reference_source = reference.source_tag;
  return p;
}

std::int64_t window_start(const ClipRecord& r, std::int64_t window, Rng& rng) {
  if (window < 1) throw ValueError(fmt::format("window length {} must be positive", window));
  if (r.frame_count < window) {
    throw DataError(fmt::format("clip {} has {} frames, fewer than the window {}", r.clip_id, r.frame_count, window));
  }
  return rng.uniform_int(0, r.frame_count - window + 1);
}

const std::vector<std::size_t>& identity_clips(const Manifest& m, const std::string& identity) {
  const auto& clips = m.clips_of(identity);
  if (clips.empty()) throw DataError(fmt::format("unknown identity '{}'", identity));
  return clips;
}

}  // namespace

TrainingPair emotion_aware_sample(const Manifest& manifest, const ClipStore& store, const std::string& identity,
                                  Emotion emotion, std::int64_t window, Rng& rng) {
  identity_clips(manifest, identity);
  const auto& neutral = manifest.clips_of(identity, Emotion::neutral);
  if (neutral.empty()) {
    throw NoNeutralReference(fmt::format("no-neutral-reference: identity '{}' has no neutral clip", identity));
  }
  if (emotion != Emotion::neutral) {
    const auto& targets = manifest.clips_of(identity, emotion);
    if (targets.empty()) throw DataError(fmt::format("identity '{}' has no {} clip", identity, to_string(emotion)));
    const auto& target = manifest[pick(targets, rng)];
    const auto start = window_start(target, window, rng);
    const auto& reference = manifest[pick(neutral, rng)];
    return make_pair(store, target, start, window, reference, rng.uniform_int(0, reference.frame_count));
  }
  if (neutral.size() >= 2) {
    const auto t = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(neutral.size())));
    const auto& target = manifest[neutral[t]];
    const auto start = window_start(target, window, rng);
    auto r = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(neutral.size()) - 1));
    if (r >= t) ++r;
    const auto& reference = manifest[neutral[r]];
    return make_pair(store, target, start, window, reference, rng.uniform_int(0, reference.frame_count));
  }
  const auto& clip = manifest[neutral.front()];
  if (clip.frame_count <= window) {
    throw DataError(fmt::format("identity '{}': single neutral clip {} leaves no frame outside a {}-frame window", identity,
                                clip.clip_id, window));
  }
  const auto start = window_start(clip, window, rng);
  auto ref = rng.uniform_int(0, clip.frame_count - window);
  if (ref >= start) ref += window;
  return make_pair(store, clip, start, window, clip, ref);
}

TrainingPair intra_video_sample(const Manifest& manifest, const ClipStore& store, const std::string& identity,
                                Emotion emotion, std::int64_t window, Rng& rng) {
  identity_clips(manifest, identity);
  const auto& targets = manifest.clips_of(identity, emotion);
  if (targets.empty()) throw DataError(fmt::format("identity '{}' has no {} clip", identity, to_string(emotion)));
  const auto& target = manifest[pick(targets, rng)];
  const auto start = window_start(target, window, rng);
  return make_pair(store, target, start, window, target, rng.uniform_int(0, target.frame_count));
}

void CurriculumConfig::validate() const {
  if (phases.empty()) throw ValueError("curriculum has no phases");
  std::int64_t expected = 0;
  for (const auto& p : phases) {
    if (p.start_step != expected) {
      throw ValueError(fmt::format("phase '{}' starts at {} but the previous phase ends at {}", p.name, p.start_step, expected));
    }
    if (p.end_step <= p.start_step) throw ValueError(fmt::format("phase '{}' is empty", p.name));
    if (p.allowed_tags.empty()) throw ValueError(fmt::format("phase '{}' allows no source tags", p.name));
    expected = p.end_step;
  }
}

CurriculumConfig progressive_curriculum(std::int64_t phase1_steps, std::int64_t phase2_steps, std::int64_t phase3_steps) {
  CurriculumConfig c;
  std::int64_t at = 0;
  auto add = [&](const char* name, std::int64_t steps, std::set<SourceTag> tags, bool neutral_only) {
    if (steps < 0) throw ValueError(fmt::format("phase '{}' has negative length", name));
    if (steps == 0) return;
    c.phases.push_back({name, at, at + steps, std::move(tags), SamplerMode::emotion_aware, neutral_only});
    at += steps;
  };
  add("mixed", phase1_steps, {SourceTag::wild, SourceTag::lab_emotional, SourceTag::neutral_highsync}, false);
  add("curated", phase2_steps, {SourceTag::lab_emotional, SourceTag::neutral_highsync}, false);
  add("lip_sync", phase3_steps, {SourceTag::neutral_highsync}, true);
  c.validate();
  return c;
}

CurriculumConfig single_phase_curriculum(std::int64_t steps) {
  CurriculumConfig c;
  c.phases.push_back({"mixed", 0, steps, {SourceTag::wild, SourceTag::lab_emotional, SourceTag::neutral_highsync},
                      SamplerMode::emotion_aware, false});
  c.validate();
  return c;
}

std::size_t curriculum_phase(std::int64_t step, const CurriculumConfig& config) {
  config.validate();
  for (std::size_t i = 0; i < config.phases.size(); ++i) {
    if (step >= config.phases[i].start_step && step < config.phases[i].end_step) return i;
  }
  throw ValueError(fmt::format("step {} lies outside the curriculum [0, {})", step, config.total_steps()));
}

BatchSampler::BatchSampler(const Manifest& manifest, const ClipStore& store, CurriculumConfig curriculum,
                           std::int64_t window)
    : store_(&store), curriculum_(std::move(curriculum)), window_(window) {
  curriculum_.validate();
  if (window < 1) throw ValueError(fmt::format("window length {} must be positive", window));
  for (const auto& phase : curriculum_.phases) {
    Pool pool;
    pool.eligible = manifest.filter([&](const ClipRecord& r) {
      return phase.allowed_tags.count(r.source_tag) && r.frame_count >= window &&
             (!phase.neutral_only || r.emotion_label == Emotion::neutral);
    });
    const auto& m = pool.eligible;
    for (Emotion e : m.emotions()) {
      std::vector<std::string> ids;
      for (const auto& id : m.identities()) {
        const auto& clips = m.clips_of(id, e);
        if (clips.empty()) continue;
        if (phase.sampler == SamplerMode::emotion_aware) {
          const auto& neutral = m.clips_of(id, Emotion::neutral);
          if (neutral.empty()) continue;
          if (e == Emotion::neutral && neutral.size() == 1 && m[neutral.front()].frame_count <= window) continue;
        }
        ids.push_back(id);
      }
      if (!ids.empty()) {
        pool.emotions.push_back(e);
        pool.identities.push_back(std::move(ids));
      }
    }
    pools_.push_back(std::move(pool));
  }
}

std::vector<TrainingPair> BatchSampler::sample(std::int64_t step, std::size_t batch_size, Rng& rng) const {
  const auto phase_index = curriculum_phase(step, curriculum_);
  const auto& phase = curriculum_.phases[phase_index];
  const auto& pool = pools_[phase_index];
  if (pool.emotions.empty()) {
    throw DataError(fmt::format("phase '{}' at step {}: no eligible records", phase.name, step));
  }
  std::vector<TrainingPair> out;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto e = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.emotions.size())));
    const auto& identity = pick(pool.identities[e], rng);
    out.push_back(phase.sampler == SamplerMode::emotion_aware
                      ? emotion_aware_sample(pool.eligible, *store_, identity, pool.emotions[e], window_, rng)
                      : intra_video_sample(pool.eligible, *store_, identity, pool.emotions[e], window_, rng));
  }
  return out;
}

std::vector<TrainingPair> batch_sample(std::int64_t step, const Manifest& manifest, const ClipStore& store,
                                       const CurriculumConfig& config, std::int64_t window, std::size_t batch_size,
                                       Rng& rng) {
  return BatchSampler(manifest, store, config, window).sample(step, batch_size, rng);
}

}  // namespace emocast
