// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "emocast/attention.hpp"
#include "emocast/labels.hpp"
#include "emocast/rng.hpp"
#include "emocast/tensor.hpp"

namespace emocast {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An identity with emotional clips but no neutral clip to draw a reference from.
class NoNeutralReference : public DataError {
 public:
  using DataError::DataError;
};

struct ClipRecord {
  std::string clip_id;
  std::string identity_id;
  SourceTag source_tag = SourceTag::lab_emotional;
  Emotion emotion_label = Emotion::neutral;
  double intensity = 0.0;
  std::string text_prompt;
  std::int64_t frame_count = 0;
  double sync_score = 0.0;
  std::string frames_ref;
  std::string audio_ref;

  bool operator==(const ClipRecord&) const = default;
  /// Throws DataError when a record invariant fails.
  void validate() const;
};

class Manifest {
 public:
  Manifest() = default;
  explicit Manifest(std::vector<ClipRecord> records);

  const std::vector<ClipRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  const ClipRecord& operator[](std::size_t i) const { return records_.at(i); }
  const ClipRecord& clip(const std::string& clip_id) const;

  std::vector<std::string> identities() const;
  /// Indices into records(), in manifest order.
  const std::vector<std::size_t>& clips_of(const std::string& identity) const;
  const std::vector<std::size_t>& clips_of(const std::string& identity, Emotion emotion) const;
  std::set<Emotion> emotions() const;

  Manifest filter(const std::function<bool(const ClipRecord&)>& keep) const;
  /// Throws NoNeutralReference if an identity with emotional clips has no neutral clip.
  void validate_for_emotion_aware() const;

  std::string to_jsonl() const;
  static Manifest from_jsonl(const std::string& text);
  void save(const std::filesystem::path& path) const;
  static Manifest load(const std::filesystem::path& path);

 private:
  std::vector<ClipRecord> records_;
  std::map<std::string, std::size_t> by_id_;
  std::map<std::string, std::vector<std::size_t>> by_identity_;
  std::map<std::pair<std::string, int>, std::vector<std::size_t>> by_identity_emotion_;
};

// Flat array files: "ETTD", u32 version, u32 rank, u32 dims[rank], u8 dtype, little-endian payload.
void write_array(const std::filesystem::path& path, const Tensor& t);
Tensor read_array(const std::filesystem::path& path);
std::string encode_array(const Tensor& t);
Tensor decode_array(const std::string& bytes, const std::string& what = "array");

/// Frame ([T, C, H, W]) and audio ([T, A]) arrays keyed by the record refs. Arrays are
/// loaded from `root` on first use when not already held in memory.
class ClipStore {
 public:
  ClipStore() = default;
  explicit ClipStore(std::filesystem::path root) : root_(std::move(root)) {}

  void put(const std::string& ref, Tensor array);
  const Tensor& get(const std::string& ref) const;
  bool contains(const std::string& ref) const;
  void save_all(const std::filesystem::path& root) const;
  const std::map<std::string, Tensor>& arrays() const { return arrays_; }

 private:
  std::filesystem::path root_;
  mutable std::map<std::string, Tensor> arrays_;
};

struct SyntheticWorldConfig {
  int identities = 2;
  std::vector<Emotion> emotions{Emotion::neutral, Emotion::happy};
  int clips_per_cell = 1;
  /// Extra clips per (identity, emotion) tagged wild.
  int wild_clips_per_cell = 0;
  /// Fraction of wild clips whose audio is shuffled against the frames.
  double wild_shuffled_fraction = 0.0;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::int64_t channels = 1;
  RegionRect lip{11, 5, 3, 6};
  RegionRect exp{2, 3, 4, 10};
  RegionRect pose{7, 12, 4, 3};
  std::int64_t frames_per_clip = 32;
  std::int64_t audio_features = 4;
  double intensity_min = 1.0;
  double intensity_max = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  RegionMasks masks(DType dtype = DType::f64) const;
};

/// Ground truth the generator knows about each clip.
struct ClipTruth {
  Emotion emotion = Emotion::neutral;
  double intensity = 0.0;
  bool shuffled_audio = false;
};

struct SyntheticWorld {
  SyntheticWorldConfig config;
  Manifest manifest;
  ClipStore store;
  std::map<std::string, ClipTruth> truth;
};

/// Deterministic renderer for one frame of the synthetic face world.
class FaceRenderer {
 public:
  explicit FaceRenderer(const SyntheticWorldConfig& config);

  /// Identity base pattern, [C, H, W] in float64.
  Tensor identity_pattern(int identity) const;
  /// Emotion glyph over the exp region at unit intensity, [C, H, W]; zero for neutral.
  Tensor emotion_glyph(Emotion emotion) const;
  /// Composes base, pose bump, glyph and the lip bar whose filled area is `energy` of the region.
  Tensor render(int identity, Emotion emotion, double intensity, double energy, double pose_offset) const;

 private:
  SyntheticWorldConfig config_;
  std::vector<Tensor> glyphs_;
};

/// Mean of `frames` ([F, C, H, W] or [C, H, W]) over the mask, per frame.
std::vector<double> region_means(const Tensor& frames, const Tensor& mask);

SyntheticWorld synth_generate(const SyntheticWorldConfig& config);

/// Per-frame audio rows [T, audio_features]: the energy followed by fixed affine views of it.
Tensor audio_features(const SyntheticWorldConfig& config, std::span<const double> energy);

struct AudioTrack {
  std::vector<double> energy;
  Tensor features;  // [T, audio_features]
};

/// A fresh energy track (never used by synth_generate) and its audio features.
AudioTrack synth_audio_track(const SyntheticWorldConfig& config, std::int64_t frames, std::uint64_t seed);

std::string emotion_prompt(Emotion emotion, double intensity);

class Annotator {
 public:
  virtual ~Annotator() = default;
  /// Returns the record with emotion_label, intensity and text_prompt populated.
  virtual ClipRecord annotate(const ClipRecord& record) const = 0;
};

/// Reads labels from the generator's truth table; clips it never generated are an error.
class SyntheticAnnotator : public Annotator {
 public:
  explicit SyntheticAnnotator(std::map<std::string, ClipTruth> truth) : truth_(std::move(truth)) {}
  ClipRecord annotate(const ClipRecord& record) const override;

 private:
  std::map<std::string, ClipTruth> truth_;
};

ClipRecord annotate(const ClipRecord& record, const Annotator& annotator);

using SyncScorer = std::function<double(const ClipRecord&)>;
/// Pearson correlation between stored audio energy and mean lip-region intensity.
SyncScorer make_synthetic_scorer(const ClipStore& store, const Tensor& lip_mask);
Manifest lip_sync_filter(const Manifest& manifest, const SyncScorer& scorer, double threshold);

struct TrainingPair {
  Tensor reference_frame;  // [C, H, W]
  Tensor target_window;    // [F, C, H, W]
  std::string identity_id;
  Emotion emotion = Emotion::neutral;
  double intensity = 0.0;
  Tensor audio_track;  // [T, A] for the target clip
  std::vector<std::int64_t> frame_indices;
  std::string reference_clip_id;
  std::string target_clip_id;
  std::int64_t reference_frame_index = 0;
  SourceTag target_source = SourceTag::lab_emotional;
  SourceTag reference_source = SourceTag::lab_emotional;
};

enum class SamplerMode { emotion_aware, intra_video };

/// Reference from a neutral clip of the same identity. Neutral targets take their reference
/// from another neutral clip, or from frames outside the window when the identity has one.
TrainingPair emotion_aware_sample(const Manifest& manifest, const ClipStore& store, const std::string& identity,
                                  Emotion emotion, std::int64_t window, Rng& rng);
/// Reference frame drawn from the target clip itself.
TrainingPair intra_video_sample(const Manifest& manifest, const ClipStore& store, const std::string& identity,
                                Emotion emotion, std::int64_t window, Rng& rng);

struct CurriculumPhase {
  std::string name;
  std::int64_t start_step = 0;
  std::int64_t end_step = 0;
  std::set<SourceTag> allowed_tags;
  SamplerMode sampler = SamplerMode::emotion_aware;
  bool neutral_only = false;
};

struct CurriculumConfig {
  std::vector<CurriculumPhase> phases;

  /// Throws unless phases are nonempty, contiguous from step 0 and non-overlapping.
  void validate() const;
  std::int64_t total_steps() const { return phases.empty() ? 0 : phases.back().end_step; }
};

/// Mixed data, then no wild clips, then neutral high-sync clips only.
CurriculumConfig progressive_curriculum(std::int64_t phase1_steps, std::int64_t phase2_steps, std::int64_t phase3_steps);
/// One mixed phase over every source.
CurriculumConfig single_phase_curriculum(std::int64_t steps);

/// Index of the phase whose [start, end) holds `step`.
std::size_t curriculum_phase(std::int64_t step, const CurriculumConfig& config);

class BatchSampler {
 public:
  BatchSampler(const Manifest& manifest, const ClipStore& store, CurriculumConfig curriculum, std::int64_t window);

  std::vector<TrainingPair> sample(std::int64_t step, std::size_t batch_size, Rng& rng) const;
  const CurriculumConfig& curriculum() const { return curriculum_; }
  /// Records a phase may draw from.
  const Manifest& eligible(std::size_t phase) const { return pools_.at(phase).eligible; }

 private:
  struct Pool {
    Manifest eligible;
    std::vector<Emotion> emotions;
    std::vector<std::vector<std::string>> identities;  // per entry of `emotions`
  };

  const ClipStore* store_;
  CurriculumConfig curriculum_;
  std::int64_t window_;
  std::vector<Pool> pools_;
};

std::vector<TrainingPair> batch_sample(std::int64_t step, const Manifest& manifest, const ClipStore& store,
                                       const CurriculumConfig& config, std::int64_t window, std::size_t batch_size,
                                       Rng& rng);

}  // namespace emocast
