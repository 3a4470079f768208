// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/labels.hpp"

#include <fmt/format.h>

#include "emocast/tensor.hpp"

namespace emocast {

std::string_view to_string(Emotion e) { return kEmotionNames.at(static_cast<std::size_t>(e)); }
std::string_view to_string(SourceTag t) { return kSourceTagNames.at(static_cast<std::size_t>(t)); }

Emotion parse_emotion(std::string_view name) {
  for (int i = 0; i < kNumEmotions; ++i) {
    if (kEmotionNames[i] == name) return static_cast<Emotion>(i);
  }
  throw ValueError(fmt::format("unknown emotion label '{}'", name));
}

SourceTag parse_source_tag(std::string_view name) {
  for (int i = 0; i < kNumSourceTags; ++i) {
    if (kSourceTagNames[i] == name) return static_cast<SourceTag>(i);
  }
  throw ValueError(fmt::format("unknown source tag '{}'", name));
}

}  // namespace emocast
