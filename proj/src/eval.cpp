// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include <fmt/format.h>
#include <json.hpp>

#include "emocast/ops.hpp"
#include "emocast/optim.hpp"
#include "emocast/stats.hpp"

namespace emocast {

namespace {

using json = nlohmann::ordered_json;

double rounded(double value) { return std::strtod(format_number(value).c_str(), nullptr); }

/// Rows of `frames` ([N, C*H*W] after flattening) restricted to the probe pixels, as float64.
std::vector<double> gather_features(const ProbeClassifier& p, const Tensor& frames, std::int64_t& rows) {
  const std::int64_t plane = p.channels * p.height * p.width;
  const bool single = frames.rank() == 3;
  const Shape expected = single ? Shape{p.channels, p.height, p.width} : Shape{frames.dim(0), p.channels, p.height, p.width};
  if (frames.rank() < 3 || frames.shape() != expected) {
    throw ShapeError(fmt::format("probe expects frames [N, {}, {}, {}], got {}", p.channels, p.height, p.width,
                                 shape_string(frames.shape())));
  }
  rows = single ? 1 : frames.dim(0);
  const auto values = frames.to_vector();
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows) * p.pixels.size());
  for (std::int64_t n = 0; n < rows; ++n)
    for (auto idx : p.pixels) out.push_back(values[static_cast<std::size_t>(n * plane + idx)]);
  return out;
}

Tensor probe_forward(const ProbeClassifier& p, const Tensor& features) {
  auto x = mul(sub(features, p.mean), p.inv_std);
  return add(matmul(silu(add(matmul(x, p.w1), p.b1)), p.w2), p.b2);
}

std::vector<Emotion> argmax_rows(const Tensor& logits) {
  const auto v = logits.to_vector();
  const auto cols = static_cast<std::size_t>(logits.dim(1));
  std::vector<Emotion> out;
  for (std::size_t r = 0; r < v.size() / cols; ++r) {
    const auto* row = v.data() + r * cols;
    out.push_back(static_cast<Emotion>(std::max_element(row, row + cols) - row));
  }
  return out;
}

/// Frame 0 of the identity's first high-sync neutral clip, else its first neutral clip.
Tensor neutral_reference(const SyntheticWorld& world, const std::string& identity) {
  const auto& neutral = world.manifest.clips_of(identity, Emotion::neutral);
  if (neutral.empty()) throw NoNeutralReference(fmt::format("no-neutral-reference: identity '{}' has no neutral clip", identity));
  std::size_t pick = neutral.front();
  for (auto i : neutral) {
    if (world.manifest[i].source_tag == SourceTag::neutral_highsync) {
      pick = i;
      break;
    }
  }
  const auto& frames = world.store.get(world.manifest[pick].frames_ref);
  return reshape(slice(frames, 0, 0, 1), {frames.dim(1), frames.dim(2), frames.dim(3)});
}

}  // namespace

std::string format_number(double value) { return fmt::format("{:.9g}", value); }

Tensor ProbeClassifier::logits(const Tensor& frames) const {
  NoGradGuard no_grad;
  std::int64_t rows = 0;
  auto features = gather_features(*this, frames, rows);
  return probe_forward(*this, Tensor::from({rows, static_cast<std::int64_t>(pixels.size())}, features));
}

std::vector<Emotion> ProbeClassifier::predict(const Tensor& frames) const { return argmax_rows(logits(frames)); }

ProbeClassifier train_probe(const Manifest& manifest, const ClipStore& store, const Tensor& exp_mask,
                            const ProbeConfig& config, std::uint64_t seed) {
  if (manifest.empty()) throw DataError("train_probe: empty manifest");
  if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0) || config.hidden < 1 || config.epochs < 1) {
    throw ValueError("train_probe: invalid probe config");
  }
  ProbeClassifier p;
  const auto& first = store.get(manifest[0].frames_ref);
  p.channels = first.dim(1);
  p.height = first.dim(2);
  p.width = first.dim(3);
  if (exp_mask.shape() != Shape{p.height, p.width}) {
    throw ShapeError(fmt::format("train_probe: exp mask {} for a {}x{} grid", shape_string(exp_mask.shape()), p.height, p.width));
  }
  const auto mask = exp_mask.to_vector();
  for (std::int64_t c = 0; c < p.channels; ++c)
    for (std::int64_t i = 0; i < p.height * p.width; ++i)
      if (mask[static_cast<std::size_t>(i)] != 0) p.pixels.push_back(c * p.height * p.width + i);
  if (p.pixels.empty()) throw ValueError("train_probe: empty exp mask");
  const auto width = static_cast<std::int64_t>(p.pixels.size());

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::array<std::int64_t, kNumEmotions> per_class{};
  for (const auto& r : manifest.records()) {
    std::int64_t n = 0;
    auto f = gather_features(p, store.get(r.frames_ref), n);
    for (std::int64_t i = 0; i < n; ++i) {
      rows.emplace_back(f.begin() + i * width, f.begin() + (i + 1) * width);
      labels.push_back(static_cast<int>(r.emotion_label));
    }
    per_class[static_cast<std::size_t>(r.emotion_label)] += n;
  }
  const auto usable = std::count_if(per_class.begin(), per_class.end(), [](std::int64_t n) { return n >= 20; });
  if (usable < 2) throw DataError("train_probe: need at least two emotion classes with 20 or more frames each");

  Rng rng = Rng(seed).split("probe");
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t i = order.size() - 1; i > 0; --i) {
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) + 1))]);
  }
  const auto n_hold = static_cast<std::size_t>(std::llround(config.holdout_fraction * static_cast<double>(rows.size())));
  const auto n_train = rows.size() - n_hold;
  auto pack = [&](std::size_t begin, std::size_t end, std::vector<int>& y) {
    std::vector<double> x;
    for (std::size_t i = begin; i < end; ++i) {
      x.insert(x.end(), rows[order[i]].begin(), rows[order[i]].end());
      y.push_back(labels[order[i]]);
    }
    return Tensor::from({static_cast<std::int64_t>(end - begin), width}, x);
  };
  std::vector<int> y_train, y_hold;
  auto x_train = pack(0, n_train, y_train);
  auto x_hold = pack(n_train, rows.size(), y_hold);

  std::vector<double> mean(static_cast<std::size_t>(width)), inv_std(static_cast<std::size_t>(width));
  const auto xv = x_train.to_vector();
  for (std::int64_t j = 0; j < width; ++j) {
    double s = 0, s2 = 0;
    for (std::size_t i = 0; i < n_train; ++i) s += xv[i * static_cast<std::size_t>(width) + static_cast<std::size_t>(j)];
    const double m = s / static_cast<double>(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
      const double d = xv[i * static_cast<std::size_t>(width) + static_cast<std::size_t>(j)] - m;
      s2 += d * d;
    }
    const double sd = std::sqrt(s2 / static_cast<double>(n_train));
    mean[static_cast<std::size_t>(j)] = m;
    inv_std[static_cast<std::size_t>(j)] = sd > 1e-6 ? 1.0 / sd : 1.0;
  }
  p.mean = Tensor::from({1, width}, mean);
  p.inv_std = Tensor::from({1, width}, inv_std);

  auto init = [&](Shape shape, std::int64_t fan_in) {
    const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto t = rng.uniform_tensor(std::move(shape), -b, b, DType::f64);
    t.set_requires_grad(true);
    return t;
  };
  p.w1 = init({width, config.hidden}, width);
  p.b1 = Tensor::zeros({config.hidden});
  p.b1.set_requires_grad(true);
  p.w2 = init({config.hidden, kNumEmotions}, config.hidden);
  p.b2 = Tensor::zeros({kNumEmotions});
  p.b2.set_requires_grad(true);
  std::vector<Tensor> params{p.w1, p.b1, p.w2, p.b2};
  OptimizerConfig oc;
  oc.learning_rate = config.learning_rate;
  OptimizerState state(oc);
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (auto& t : params) t.zero_grad();
    backward(cross_entropy(probe_forward(p, x_train), y_train));
    std::vector<Tensor> grads;
    for (auto& t : params) grads.push_back(t.grad());
    optimizer_step(params, grads, state);
  }
  for (auto& t : params) {
    t.zero_grad();
    t.set_requires_grad(false);
  }
  if (n_hold > 0) {
    NoGradGuard no_grad;
    const auto predicted = argmax_rows(probe_forward(p, x_hold));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) hits += static_cast<int>(predicted[i]) == y_hold[i];
    p.heldout_accuracy = static_cast<double>(hits) / static_cast<double>(n_hold);
  } else {
    p.heldout_accuracy = 1.0;
  }
  return p;
}

double emotion_accuracy(const Tensor& frames, Emotion label, const ProbeClassifier& probe) {
  if (!frames.defined() || frames.numel() == 0 || (frames.rank() == 4 && frames.dim(0) == 0)) {
    throw ValueError("emotion_accuracy: no frames");
  }
  const auto predicted = probe.predict(frames);
  const auto hits = std::count(predicted.begin(), predicted.end(), label);
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double lip_sync_correlation(std::span<const double> energy, const Tensor& frames, const Tensor& lip_mask) {
  if (frames.rank() != 4) throw ShapeError(fmt::format("lip_sync_correlation: frames {} must be [F, C, H, W]", shape_string(frames.shape())));
  if (static_cast<std::int64_t>(energy.size()) != frames.dim(0)) {
    throw ShapeError(fmt::format("lip_sync_correlation: {} energy values for {} frames", energy.size(), frames.dim(0)));
  }
  if (energy.size() < 2) throw ValueError("lip_sync_correlation: need at least two frames");
  return pearson(energy, region_means(frames, lip_mask));
}

double reconstruction_mse(const Tensor& generated, const Tensor& ground_truth) {
  if (generated.shape() != ground_truth.shape()) {
    throw ShapeError(fmt::format("reconstruction_mse: {} vs {}", shape_string(generated.shape()),
                                 shape_string(ground_truth.shape())));
  }
  if (generated.numel() == 0) throw ValueError("reconstruction_mse: empty tensors");
  const auto a = generated.to_vector(), b = ground_truth.to_vector();
  long double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<long double>(a[i]) - b[i]) * (static_cast<long double>(a[i]) - b[i]);
  return static_cast<double>(s / static_cast<long double>(a.size()));
}

double EvalReport::emotion_accuracy() const {
  std::int64_t trace = 0, total = 0;
  for (std::size_t i = 0; i < kNumEmotions; ++i)
    for (std::size_t j = 0; j < kNumEmotions; ++j) {
      total += confusion[i][j];
      if (i == j) trace += confusion[i][j];
    }
  if (total == 0) throw ValueError("emotion accuracy of an empty confusion matrix");
  return static_cast<double>(trace) / static_cast<double>(total);
}

std::string EvalReport::to_json() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["ablation"] = ablation;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  j["emotion_accuracy"] = rounded(emotion_accuracy());
  j["lip_sync_correlation"] = rounded(lip_sync);
  j["reconstruction_mse"] = rounded(reconstruction_mse);
  j["probe_heldout_accuracy"] = rounded(probe_heldout_accuracy);
  j["fid"] = "out of scope";
  json labels = json::array();
  for (std::size_t e = 0; e < kNumEmotions; ++e) labels.push_back(to_string(static_cast<Emotion>(e)));
  json counts = json::array();
  for (const auto& row : confusion) counts.push_back(row);
  j["confusion"] = {{"labels", labels}, {"counts", counts}};
  auto trace_summary = [](const std::vector<double>& t) {
    json s;
    s["steps"] = t.size();
    s["initial"] = t.empty() ? 0.0 : rounded(t.front());
    s["final"] = t.empty() ? 0.0 : rounded(t.back());
    return s;
  };
  j["loss"] = {{"spatial", trace_summary(spatial_loss)}, {"temporal", trace_summary(temporal_loss)}};
  return j.dump(2) + "\n";
}

std::vector<GeneratedWindow> generate_heldout(const EmoCastModel& model, const SyntheticWorld& world,
                                              const EvalConfig& config, std::uint64_t seed) {
  const std::int64_t f = model.config.frames;
  const Rng root = Rng(seed).split("heldout");
  std::vector<GeneratedWindow> out;
  for (const auto& identity : world.manifest.identities()) {
    const auto reference = neutral_reference(world, identity);
    for (Emotion emotion : world.config.emotions) {
      for (int k = 0; k < config.heldout_tracks; ++k) {
        const auto track = synth_audio_track(world.config, config.heldout_frames, static_cast<std::uint64_t>(k));
        for (std::int64_t start = 0; start + f <= config.heldout_frames; start += f) {
          GenerateRequest req;
          req.reference_frame = reference;
          req.audio_track = track.features;
          req.emotion = emotion;
          req.intensity = emotion == Emotion::neutral ? 0.0 : config.intensity;
          req.start_frame = start;
          req.seed = root.split(identity).split(static_cast<std::uint64_t>(emotion)).split(static_cast<std::uint64_t>(k))
                         .split(static_cast<std::uint64_t>(start))
                         .next_u64();
          req.sampler = config.sampler;
          GeneratedWindow w;
          w.identity = identity;
          w.emotion = emotion;
          w.track = k;
          w.start = start;
          w.frames = generate(model, req);
          w.energy.assign(track.energy.begin() + start, track.energy.begin() + start + f);
          out.push_back(std::move(w));
        }
      }
    }
  }
  return out;
}

EvalReport evaluate(const EmoCastModel& model, const SyntheticWorld& world, const ProbeClassifier& probe,
                    const EvalConfig& config, std::uint64_t seed) {
  EvalReport report;
  report.seed = seed;
  report.probe_heldout_accuracy = probe.heldout_accuracy;
  const auto windows = generate_heldout(model, world, config, seed);
  std::vector<double> energy, lip;
  const auto lip_mask = world.config.masks().lip;
  for (const auto& w : windows) {
    for (auto pred : probe.predict(w.frames)) {
      ++report.confusion[static_cast<std::size_t>(w.emotion)][static_cast<std::size_t>(pred)];
    }
    const auto means = region_means(w.frames, lip_mask);
    energy.insert(energy.end(), w.energy.begin(), w.energy.end());
    lip.insert(lip.end(), means.begin(), means.end());
  }
  try {
    report.lip_sync = pearson(energy, lip);
  } catch (const UndefinedCorrelation&) {
    report.lip_sync = 0.0;
  }

  // Reconstruction of the first window of the first non-wild emotional clip (else any clip).
  const ClipRecord* target = nullptr;
  for (const auto& r : world.manifest.records()) {
    if (r.source_tag == SourceTag::lab_emotional) {
      target = &r;
      break;
    }
  }
  if (target == nullptr) target = &world.manifest[0];
  const std::int64_t f = model.config.frames;
  GenerateRequest req;
  req.reference_frame = neutral_reference(world, target->identity_id);
  req.audio_track = world.store.get(target->audio_ref);
  req.emotion = target->emotion_label;
  req.intensity = target->intensity;
  req.seed = Rng(seed).split("reconstruction").next_u64();
  req.sampler = config.sampler;
  const auto generated = generate(model, req);
  report.reconstruction_mse = reconstruction_mse(generated, slice(world.store.get(target->frames_ref), 0, 0, f).to(generated.dtype()));
  return report;
}

std::string experiment_hash(const ExperimentConfig& config) {
  auto c = config;
  c.model.decoupled = true;
  c.model.emotive_audio = true;
  c.emotion_aware_sampling = true;
  c.progressive = true;
  return fmt::format("{:016x}", fnv1a64(experiment_to_json(c)));
}

PipelineResult run_pipeline(const ExperimentConfig& config, const std::function<void(Stage, std::int64_t, double)>& progress) {
  config.validate();
  auto world = synth_generate(config.world);
  auto model = build_model(config.model, config.seed);
  std::vector<double> traces[2];
  for (Stage stage : {Stage::spatial, Stage::temporal}) {
    Trainer trainer(model, world.manifest, world.store, config.train_config(stage));
    while (!trainer.done()) {
      const double loss = trainer.step();
      if (progress) progress(stage, trainer.state().step, loss);
    }
    traces[stage == Stage::spatial ? 0 : 1] = trainer.state().loss_trace;
  }
  auto probe = train_probe(world.manifest, world.store, world.config.masks().exp, config.eval.probe, config.seed);
  auto report = evaluate(model, world, probe, config.eval, config.seed);
  report.config_hash = experiment_hash(config);
  report.spatial_loss = traces[0];
  report.temporal_loss = traces[1];
  return {std::move(world), std::move(model), std::move(probe), std::move(traces[0]), std::move(traces[1]), std::move(report)};
}

ExperimentConfig ablated_config(const std::string& name, const ExperimentConfig& base) {
  auto c = base;
  if (name == "no_decoupled") {
    c.model.decoupled = false;
  } else if (name == "no_emotive_audio") {
    c.model.emotive_audio = false;
  } else if (name == "no_emotion_aware_sampling") {
    c.emotion_aware_sampling = false;
  } else if (name == "no_progressive") {
    c.progressive = false;
  } else {
    throw ValueError(fmt::format("unknown ablation '{}' (expected one of {})", name, fmt::join(kAblations, ", ")));
  }
  return c;
}

AblationResult run_ablation(const std::string& name, const ExperimentConfig& base,
                            const std::function<void(Stage, std::int64_t, double)>& progress) {
  const auto ablated = ablated_config(name, base);
  AblationResult r;
  r.base = run_pipeline(base, progress).report;
  r.ablated = run_pipeline(ablated, progress).report;
  r.ablated.ablation = name;
  return r;
}

}  // namespace emocast
