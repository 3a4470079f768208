// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <string>
#include <string_view>

namespace emocast {

enum class Emotion : int { neutral = 0, angry, contempt, disgusted, fear, happy, sad, surprised };
inline constexpr int kNumEmotions = 8;

enum class SourceTag : int { wild = 0, lab_emotional, neutral_highsync };
inline constexpr int kNumSourceTags = 3;

inline constexpr std::array<std::string_view, kNumEmotions> kEmotionNames{
    "neutral", "angry", "contempt", "disgusted", "fear", "happy", "sad", "surprised"};
inline constexpr std::array<std::string_view, kNumSourceTags> kSourceTagNames{"wild", "lab_emotional",
                                                                              "neutral_highsync"};

std::string_view to_string(Emotion e);
std::string_view to_string(SourceTag t);
/// Throws ValueError on an unknown name.
Emotion parse_emotion(std::string_view name);
SourceTag parse_source_tag(std::string_view name);

}  // namespace emocast
