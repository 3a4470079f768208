// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/trainer.hpp"

#include <bit>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>
#include <zlib.h>

#include "emocast/config.hpp"
#include "emocast/ops.hpp"

namespace emocast {

void TrainConfig::validate() const {
  curriculum.validate();
  if (batch_size < 1) throw ValueError("batch size must be positive");
  if (window < 1) throw ValueError(fmt::format("window of {} frames", window));
  if (!(optimizer.learning_rate > 0)) throw ValueError("learning rate must be positive");
  if (grad_clip < 0) throw ValueError("grad_clip must be non-negative");
  if (!(final_lr_fraction > 0 && final_lr_fraction <= 1)) throw ValueError("final_lr_fraction must be in (0, 1]");
}

double TrainConfig::learning_rate_at(std::int64_t step) const {
  const double base = optimizer.learning_rate;
  const std::int64_t total = curriculum.total_steps();
  if (final_lr_fraction == 1.0 || total < 2) return base;
  const double progress = static_cast<double>(std::clamp<std::int64_t>(step, 0, total - 1)) / static_cast<double>(total - 1);
  return base * (final_lr_fraction + (1.0 - final_lr_fraction) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

Tensor pair_loss(const EmoCastModel& model, const TrainingPair& pair, Stage stage, const NoiseSchedule& schedule, Rng& rng) {
  const auto z0 = pair.target_window.to(model.config.dtype);
  const int t = static_cast<int>(rng.uniform_int(1, schedule.steps + 1));
  const auto eps = rng.normal_tensor(z0.shape(), model.config.dtype);
  const auto z_t = q_sample(z0, t, eps, schedule);
  const auto cond = make_conditions(model, pair.reference_frame, pair.emotion, pair.intensity, pair.audio_track,
                                    pair.frame_indices);
  return training_loss(predict_noise(model, z_t, t, cond, stage), eps);
}

Trainer::Trainer(EmoCastModel& model, const Manifest& manifest, const ClipStore& store, TrainConfig config)
    : model_(&model),
      config_(std::move(config)),
      sampler_(manifest, store, config_.curriculum, config_.effective_window()),
      schedule_(model.config.schedule()),
      base_(Rng(config_.seed).split("train").split(to_string(config_.stage))) {
  config_.validate();
  if (config_.stage == Stage::temporal && config_.window != model.config.frames) {
    throw ValueError(fmt::format("temporal window {} differs from the model window {}", config_.window, model.config.frames));
  }
  state_.optimizer = OptimizerState(config_.optimizer);
  state_.rng = base_.state();
  params_ = model.named_parameters();
  for (const auto& [name, _] : params_) {
    bool train;
    if (config_.stage == Stage::spatial) {
      train = !EmoCastModel::is_temporal(name);
    } else {
      train = EmoCastModel::is_temporal(name) || !config_.freeze_spatial;
    }
    is_trainable_.push_back(train);
    if (train) trainable_names_.push_back(name);
  }
}

void Trainer::restore(TrainState state) {
  if (state.rng != base_.state()) throw ValueError("train state belongs to a different seed or stage");
  state_ = std::move(state);
  state_.optimizer.config = config_.optimizer;
  if (state_.step > 0) state_.optimizer.config.learning_rate = config_.learning_rate_at(state_.step - 1);
}

double Trainer::step() {
  const std::int64_t s = state_.step;
  const auto phase = curriculum_phase(s, config_.curriculum);
  Rng step_rng = base_.split(static_cast<std::uint64_t>(s));
  Rng batch_rng = step_rng.split("batch");
  Rng noise_rng = step_rng.split("noise");
  const auto batch = sampler_.sample(s, config_.batch_size, batch_rng);
  if (hook_) hook_(s, batch);

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].second;
    p.zero_grad();
    p.set_requires_grad(is_trainable_[i]);
  }
  Tensor total;
  for (const auto& pair : batch) {
    auto l = pair_loss(*model_, pair, config_.stage, schedule_, noise_rng);
    total = total.defined() ? add(total, l) : l;
  }
  total = scale(total, 1.0 / static_cast<double>(batch.size()));
  const double loss = total.item();
  if (!std::isfinite(loss)) {
    for (auto& [_, p] : params_) p.set_requires_grad(true);
    throw TrainingError(fmt::format("non-finite loss {} at {} step {} (phase '{}')", loss, to_string(config_.stage), s,
                                    config_.curriculum.phases[phase].name));
  }
  backward(total);

  std::vector<Tensor> trainable, grads;
  grad_norms_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& [name, p] = params_[i];
    double norm = 0;
    if (is_trainable_[i]) {
      auto g = p.grad();
      for (double v : g.to_vector()) norm += v * v;
      trainable.push_back(p);
      grads.push_back(g);
    }
    grad_norms_[name] = std::sqrt(norm);
  }
  if (config_.grad_clip > 0) clip_grad_norm(grads, config_.grad_clip);
  state_.optimizer.config.learning_rate = config_.learning_rate_at(s);
  optimizer_step(trainable, grads, state_.optimizer);
  for (auto& [_, p] : params_) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  state_.loss_trace.push_back(loss);
  ++state_.step;
  return loss;
}

void Trainer::run(std::int64_t until) {
  const auto end = until < 0 ? config_.curriculum.total_steps() : until;
  while (state_.step < end) step();
}

namespace {

using json = nlohmann::ordered_json;

enum : std::uint8_t { kF32 = 1, kF64 = 2, kU64 = 3, kBytes = 4 };

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw CheckpointTruncatedError("checkpoint truncated inside the directory");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

struct Entry {
  std::string name;
  std::uint8_t dtype = kBytes;
  Shape dims;
  std::string payload;
};

Entry tensor_entry(std::string name, const Tensor& t) {
  Entry e{std::move(name), t.dtype() == DType::f32 ? kF32 : kF64, t.shape(), {}};
  detail::dispatch(t.dtype(), [&]<typename T>() {
    auto d = t.data<T>();
    e.payload.assign(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  });
  return e;
}

Entry u64_entry(std::string name, const std::vector<std::uint64_t>& values) {
  Entry e{std::move(name), kU64, {static_cast<std::int64_t>(values.size())}, {}};
  e.payload.assign(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(std::uint64_t));
  return e;
}

Entry bytes_entry(std::string name, const std::string& bytes) {
  return {std::move(name), kBytes, {static_cast<std::int64_t>(bytes.size())}, bytes};
}

Tensor entry_tensor(const Entry& e) {
  const auto n = static_cast<std::size_t>(shape_numel(e.dims));
  if (e.dtype == kF32) {
    if (e.payload.size() != n * sizeof(float)) throw CheckpointError(fmt::format("entry '{}': payload size mismatch", e.name));
    std::vector<float> v(n);
    std::memcpy(v.data(), e.payload.data(), e.payload.size());
    return Tensor::from_buffer(e.dims, std::move(v));
  }
  if (e.dtype == kF64) {
    if (e.payload.size() != n * sizeof(double)) throw CheckpointError(fmt::format("entry '{}': payload size mismatch", e.name));
    std::vector<double> v(n);
    std::memcpy(v.data(), e.payload.data(), e.payload.size());
    return Tensor::from_buffer(e.dims, std::move(v));
  }
  throw CheckpointError(fmt::format("entry '{}' is not a float array", e.name));
}

std::vector<std::uint64_t> entry_u64(const Entry& e) {
  if (e.dtype != kU64 || e.payload.size() % sizeof(std::uint64_t)) {
    throw CheckpointError(fmt::format("entry '{}' is not a u64 array", e.name));
  }
  std::vector<std::uint64_t> v(e.payload.size() / sizeof(std::uint64_t));
  std::memcpy(v.data(), e.payload.data(), e.payload.size());
  return v;
}

std::uint32_t crc32_of(const std::string& bytes, std::size_t length) {
  return static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(length)));
}

}  // namespace

std::uint64_t Checkpoint::config_hash() const { return fnv1a64(config_json); }

std::string checkpoint_config_json(const EmoCastModel& model, Stage stage) {
  json j;
  j["model"] = json::parse(arch_to_json(model.config));
  j["seed"] = model.seed;
  j["stage"] = to_string(stage);
  return j.dump();
}

Checkpoint make_checkpoint(const EmoCastModel& model, Stage stage, const TrainState& state) {
  Checkpoint c;
  c.config_json = checkpoint_config_json(model, stage);
  for (const auto& [name, t] : model.named_parameters()) c.parameters.emplace_back(name, t.detach().clone());
  c.train = state;
  return c;
}

Stage checkpoint_stage(const Checkpoint& checkpoint) {
  try {
    return parse_stage(json::parse(checkpoint.config_json).at("stage").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(fmt::format("checkpoint config: {}", e.what()));
  }
}

std::string encode_checkpoint(const Checkpoint& c) {
  std::vector<Entry> entries;
  entries.push_back(bytes_entry("config", c.config_json));
  for (const auto& [name, t] : c.parameters) entries.push_back(tensor_entry("param/" + name, t));
  const auto& opt = c.train.optimizer;
  json oc;
  oc["mode"] = opt.config.mode == OptimizerMode::adam ? "adam" : "sgd";
  oc["learning_rate"] = opt.config.learning_rate;
  oc["beta1"] = opt.config.beta1;
  oc["beta2"] = opt.config.beta2;
  oc["epsilon"] = opt.config.epsilon;
  entries.push_back(bytes_entry("optim/config", oc.dump()));
  entries.push_back(u64_entry("optim/step", {static_cast<std::uint64_t>(opt.step)}));
  for (std::size_t i = 0; i < opt.first_moment.size(); ++i) {
    entries.push_back(tensor_entry(fmt::format("optim/m/{}", i), opt.first_moment[i]));
    entries.push_back(tensor_entry(fmt::format("optim/v/{}", i), opt.second_moment[i]));
  }
  entries.push_back(u64_entry("rng/state", {c.train.rng.key, c.train.rng.counter, c.train.rng.lane}));
  entries.push_back(u64_entry("train/step", {static_cast<std::uint64_t>(c.train.step)}));
  entries.push_back(tensor_entry("train/loss_trace",
                                 Tensor::from_buffer({static_cast<std::int64_t>(c.train.loss_trace.size())},
                                                     std::vector<double>(c.train.loss_trace))));

  std::string header = "EMCK";
  put<std::uint32_t>(header, c.version);
  put<std::uint64_t>(header, c.config_hash());
  put<std::uint32_t>(header, static_cast<std::uint32_t>(entries.size()));
  std::size_t dir_size = 0;
  for (const auto& e : entries) dir_size += 4 + e.name.size() + 1 + 4 + 4 * e.dims.size() + 8;
  std::uint64_t offset = header.size() + dir_size;
  std::string out = header;
  for (const auto& e : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    put<std::uint8_t>(out, e.dtype);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (auto d : e.dims) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    put<std::uint64_t>(out, offset);
    offset += e.payload.size();
  }
  for (const auto& e : entries) out += e.payload;
  put<std::uint32_t>(out, crc32_of(out, out.size()));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "EMCK") != 0) throw CheckpointError("not a checkpoint (bad magic)");
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError(fmt::format("checkpoint version {} unsupported (expected {})", version, kCheckpointVersion));
  }
  const auto hash = get<std::uint64_t>(bytes, pos);
  const auto count = get<std::uint32_t>(bytes, pos);
  struct Dir {
    Entry entry;
    std::uint64_t offset;
    std::size_t size;
  };
  std::vector<Dir> dir;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw CheckpointTruncatedError("checkpoint truncated inside the directory");
    Dir d;
    d.entry.name = bytes.substr(pos, len);
    pos += len;
    d.entry.dtype = get<std::uint8_t>(bytes, pos);
    if (d.entry.dtype < kF32 || d.entry.dtype > kBytes) {
      throw CheckpointError(fmt::format("entry '{}': unknown dtype code {}", d.entry.name, d.entry.dtype));
    }
    const auto rank = get<std::uint32_t>(bytes, pos);
    if (rank > 8) throw CheckpointError(fmt::format("entry '{}': implausible rank {}", d.entry.name, rank));
    for (std::uint32_t r = 0; r < rank; ++r) d.entry.dims.push_back(get<std::uint32_t>(bytes, pos));
    d.offset = get<std::uint64_t>(bytes, pos);
    const std::size_t width = d.entry.dtype == kF32 ? 4 : d.entry.dtype == kBytes ? 1 : 8;
    d.size = static_cast<std::size_t>(shape_numel(d.entry.dims)) * width;
    dir.push_back(std::move(d));
  }
  std::size_t end = pos;
  for (const auto& d : dir) {
    if (d.offset != end) throw CheckpointError(fmt::format("entry '{}': payload offset {} out of order", d.entry.name, d.offset));
    end += d.size;
  }
  if (end + 4 > bytes.size()) {
    throw CheckpointTruncatedError(fmt::format("checkpoint truncated: {} bytes, payloads need {}", bytes.size(), end + 4));
  }
  if (end + 4 < bytes.size()) throw CheckpointError("trailing bytes after the checksum");
  std::size_t crc_pos = end;
  if (get<std::uint32_t>(bytes, crc_pos) != crc32_of(bytes, end)) throw CheckpointChecksumError("checkpoint checksum mismatch");

  Checkpoint c;
  c.version = version;
  std::map<std::string, Entry> named;
  for (auto& d : dir) {
    d.entry.payload = bytes.substr(static_cast<std::size_t>(d.offset), d.size);
    named[d.entry.name] = d.entry;
    if (d.entry.name.rfind("param/", 0) == 0) c.parameters.emplace_back(d.entry.name.substr(6), entry_tensor(d.entry));
  }
  auto need = [&](const std::string& name) -> const Entry& {
    auto it = named.find(name);
    if (it == named.end()) throw CheckpointError(fmt::format("checkpoint lacks entry '{}'", name));
    return it->second;
  };
  c.config_json = need("config").payload;
  if (c.config_hash() != hash) throw CheckpointError("config hash does not match the stored config");
  try {
    const auto oc = json::parse(need("optim/config").payload);
    OptimizerConfig cfg;
    cfg.mode = oc.at("mode").get<std::string>() == "adam" ? OptimizerMode::adam : OptimizerMode::sgd;
    cfg.learning_rate = oc.at("learning_rate").get<double>();
    cfg.beta1 = oc.at("beta1").get<double>();
    cfg.beta2 = oc.at("beta2").get<double>();
    cfg.epsilon = oc.at("epsilon").get<double>();
    c.train.optimizer = OptimizerState(cfg);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(fmt::format("optimizer config: {}", e.what()));
  }
  c.train.optimizer.step = static_cast<std::int64_t>(entry_u64(need("optim/step")).at(0));
  for (std::size_t i = 0; named.count(fmt::format("optim/m/{}", i)); ++i) {
    c.train.optimizer.first_moment.push_back(entry_tensor(need(fmt::format("optim/m/{}", i))));
    c.train.optimizer.second_moment.push_back(entry_tensor(need(fmt::format("optim/v/{}", i))));
  }
  const auto rng = entry_u64(need("rng/state"));
  if (rng.size() != 3) throw CheckpointError("rng/state must hold three values");
  c.train.rng = {rng[0], rng[1], static_cast<std::uint32_t>(rng[2])};
  c.train.step = static_cast<std::int64_t>(entry_u64(need("train/step")).at(0));
  c.train.loss_trace = entry_tensor(need("train/loss_trace")).to_vector();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = encode_checkpoint(checkpoint);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(fmt::format("cannot write {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(fmt::format("short write to {}", path.string()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

EmoCastModel model_from_checkpoint(const Checkpoint& checkpoint) {
  ArchConfig arch;
  std::uint64_t seed = 0;
  try {
    const auto j = json::parse(checkpoint.config_json);
    arch = arch_from_json(j.at("model").dump());
    seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(fmt::format("checkpoint config: {}", e.what()));
  }
  auto model = build_model(arch, seed);
  auto params = model.named_parameters();
  if (params.size() != checkpoint.parameters.size()) {
    throw CheckpointError(fmt::format("checkpoint holds {} parameters, model has {}", checkpoint.parameters.size(),
                                      params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, dst] = params[i];
    const auto& [src_name, src] = checkpoint.parameters[i];
    if (name != src_name || dst.shape() != src.shape() || dst.dtype() != src.dtype()) {
      throw CheckpointError(fmt::format("checkpoint parameter '{}' {} does not match model '{}' {}", src_name,
                                        shape_string(src.shape()), name, shape_string(dst.shape())));
    }
    detail::dispatch(dst.dtype(), [&]<typename T>() {
      auto s = src.data<T>();
      auto d = dst.mutable_data<T>();
      std::copy(s.begin(), s.end(), d.begin());
    });
  }
  return model;
}

}  // namespace emocast
