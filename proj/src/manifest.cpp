// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "emocast/dataset.hpp"

namespace emocast {

using ordered_json = nlohmann::ordered_json;

namespace {

constexpr const char* kFields[] = {"clip_id",    "identity_id", "source_tag", "emotion_label", "intensity",
                                   "text_prompt", "frame_count", "sync_score", "frames_ref",   "audio_ref"};

ordered_json record_to_json(const ClipRecord& r) {
  ordered_json j;
  j["clip_id"] = r.clip_id;
  j["identity_id"] = r.identity_id;
  j["source_tag"] = std::string(to_string(r.source_tag));
  j["emotion_label"] = std::string(to_string(r.emotion_label));
  j["intensity"] = r.intensity;
  j["text_prompt"] = r.text_prompt;
  j["frame_count"] = r.frame_count;
  j["sync_score"] = r.sync_score;
  j["frames_ref"] = r.frames_ref;
  j["audio_ref"] = r.audio_ref;
  return j;
}

ClipRecord record_from_json(const ordered_json& j, std::size_t line) {
  if (!j.is_object()) throw DataError(fmt::format("manifest line {}: not a JSON object", line));
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kFields), std::end(kFields), key) == std::end(kFields)) {
      throw DataError(fmt::format("manifest line {}: unknown field '{}'", line, key));
    }
  }
  auto field = [&](const char* name) -> const ordered_json& {
    auto it = j.find(name);
    if (it == j.end()) throw DataError(fmt::format("manifest line {}: missing field '{}'", line, name));
    return *it;
  };
  ClipRecord r;
  try {
    r.clip_id = field("clip_id").get<std::string>();
    r.identity_id = field("identity_id").get<std::string>();
    r.source_tag = parse_source_tag(field("source_tag").get<std::string>());
    r.emotion_label = parse_emotion(field("emotion_label").get<std::string>());
    r.intensity = field("intensity").get<double>();
    r.text_prompt = field("text_prompt").get<std::string>();
    r.frame_count = field("frame_count").get<std::int64_t>();
    r.sync_score = field("sync_score").get<double>();
    r.frames_ref = field("frames_ref").get<std::string>();
    r.audio_ref = field("audio_ref").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(fmt::format("manifest line {}: {}", line, e.what()));
  } catch (const ValueError& e) {
    throw DataError(fmt::format("manifest line {}: {}", line, e.what()));
  }
  return r;
}

const std::vector<std::size_t>& empty_indices() {
  static const std::vector<std::size_t> none;
  return none;
}

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > in.size()) throw DataError(fmt::format("{}: truncated", what));
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(fmt::format("cannot open {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(fmt::format("cannot write {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(fmt::format("short write to {}", path.string()));
}

}  // namespace

void ClipRecord::validate() const {
  if (clip_id.empty()) throw DataError("clip record without clip_id");
  if (identity_id.empty()) throw DataError(fmt::format("clip {}: empty identity_id", clip_id));
  if (frame_count < 1) throw DataError(fmt::format("clip {}: frame_count {} must be positive", clip_id, frame_count));
  if (!(intensity >= 0.0 && intensity <= 1.0)) {
    throw DataError(fmt::format("clip {}: intensity {} outside [0, 1]", clip_id, intensity));
  }
  if (emotion_label == Emotion::neutral && intensity != 0.0) {
    throw DataError(fmt::format("clip {}: neutral clip with intensity {}", clip_id, intensity));
  }
  if (emotion_label != Emotion::neutral && intensity <= 0.0) {
    throw DataError(fmt::format("clip {}: {} clip needs positive intensity", clip_id, to_string(emotion_label)));
  }
  if (!std::isfinite(sync_score)) throw DataError(fmt::format("clip {}: non-finite sync_score", clip_id));
}

Manifest::Manifest(std::vector<ClipRecord> records) : records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    r.validate();
    if (!by_id_.emplace(r.clip_id, i).second) throw DataError(fmt::format("duplicate clip_id '{}'", r.clip_id));
    by_identity_[r.identity_id].push_back(i);
    by_identity_emotion_[{r.identity_id, static_cast<int>(r.emotion_label)}].push_back(i);
  }
}

const ClipRecord& Manifest::clip(const std::string& clip_id) const {
  auto it = by_id_.find(clip_id);
  if (it == by_id_.end()) throw DataError(fmt::format("unknown clip '{}'", clip_id));
  return records_[it->second];
}

std::vector<std::string> Manifest::identities() const {
  std::vector<std::string> out;
  for (const auto& [id, _] : by_identity_) out.push_back(id);
  return out;
}

const std::vector<std::size_t>& Manifest::clips_of(const std::string& identity) const {
  auto it = by_identity_.find(identity);
  return it == by_identity_.end() ? empty_indices() : it->second;
}

const std::vector<std::size_t>& Manifest::clips_of(const std::string& identity, Emotion emotion) const {
  auto it = by_identity_emotion_.find({identity, static_cast<int>(emotion)});
  return it == by_identity_emotion_.end() ? empty_indices() : it->second;
}

std::set<Emotion> Manifest::emotions() const {
  std::set<Emotion> out;
  for (const auto& r : records_) out.insert(r.emotion_label);
  return out;
}

Manifest Manifest::filter(const std::function<bool(const ClipRecord&)>& keep) const {
  std::vector<ClipRecord> kept;
  for (const auto& r : records_)
    if (keep(r)) kept.push_back(r);
  return Manifest(std::move(kept));
}

void Manifest::validate_for_emotion_aware() const {
  for (const auto& [identity, clips] : by_identity_) {
    bool emotional = false;
    for (auto i : clips) emotional = emotional || records_[i].emotion_label != Emotion::neutral;
    if (emotional && clips_of(identity, Emotion::neutral).empty()) {
      throw NoNeutralReference(fmt::format("no-neutral-reference: identity '{}' has emotional clips but no neutral clip",
                                           identity));
    }
  }
}

std::string Manifest::to_jsonl() const {
  std::string out;
  for (const auto& r : records_) {
    out += record_to_json(r).dump();
    out += '\n';
  }
  return out;
}

Manifest Manifest::from_jsonl(const std::string& text) {
  std::vector<ClipRecord> records;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(fmt::format("manifest line {}: {}", n, e.what()));
    }
    records.push_back(record_from_json(j, n));
  }
  return Manifest(std::move(records));
}

void Manifest::save(const std::filesystem::path& path) const { write_file(path, to_jsonl()); }

Manifest Manifest::load(const std::filesystem::path& path) { return from_jsonl(read_file(path)); }

std::string encode_array(const Tensor& t) {
  std::string out = "ETTD";
  put_le<std::uint32_t>(out, 1);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
  detail::dispatch(t.dtype(), [&]<typename T>() {
    auto d = t.data<T>();
    out.append(reinterpret_cast<const char*>(d.data()), d.size_bytes());
  });
  return out;
}

Tensor decode_array(const std::string& bytes, const std::string& what) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "ETTD") != 0) throw DataError(fmt::format("{}: bad magic", what));
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos, what);
  if (version != 1) throw DataError(fmt::format("{}: unsupported version {}", what, version));
  const auto rank = get_le<std::uint32_t>(bytes, pos, what);
  if (rank > 8) throw DataError(fmt::format("{}: implausible rank {}", what, rank));
  Shape shape;
  for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get_le<std::uint32_t>(bytes, pos, what));
  const auto code = get_le<std::uint8_t>(bytes, pos, what);
  if (code != 1 && code != 2) throw DataError(fmt::format("{}: unknown dtype code {}", what, code));
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  if (code == 1) {
    if (bytes.size() - pos != n * sizeof(float)) throw DataError(fmt::format("{}: payload size mismatch", what));
    std::vector<float> v(n);
    std::memcpy(v.data(), bytes.data() + pos, n * sizeof(float));
    return Tensor::from_buffer(shape, std::move(v));
  }
  if (bytes.size() - pos != n * sizeof(double)) throw DataError(fmt::format("{}: payload size mismatch", what));
  std::vector<double> v(n);
  std::memcpy(v.data(), bytes.data() + pos, n * sizeof(double));
  return Tensor::from_buffer(shape, std::move(v));
}

void write_array(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_array(t)); }

Tensor read_array(const std::filesystem::path& path) { return decode_array(read_file(path), path.string()); }

void ClipStore::put(const std::string& ref, Tensor array) { arrays_[ref] = std::move(array); }

const Tensor& ClipStore::get(const std::string& ref) const {
  auto it = arrays_.find(ref);
  if (it != arrays_.end()) return it->second;
  if (root_.empty()) throw DataError(fmt::format("array '{}' not in store", ref));
  return arrays_.emplace(ref, read_array(root_ / ref)).first->second;
}

bool ClipStore::contains(const std::string& ref) const {
  return arrays_.count(ref) > 0 || (!root_.empty() && std::filesystem::exists(root_ / ref));
}

void ClipStore::save_all(const std::filesystem::path& root) const {
  for (const auto& [ref, t] : arrays_) write_array(root / ref, t);
}

}  // namespace emocast
