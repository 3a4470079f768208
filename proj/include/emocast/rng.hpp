// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "emocast/tensor.hpp"

namespace emocast {

/// Counter-based Philox4x32-10 stream. A stream is fully described by its key and
/// counter, so it can be split by name or index and serialized exactly.
class Rng {
 public:
  struct State {
    std::uint64_t key = 0;
    std::uint64_t counter = 0;
    std::uint32_t lane = 4;

    bool operator==(const State&) const = default;
  };

  explicit Rng(std::uint64_t seed = 0);

  /// Independent child stream; does not advance this stream.
  Rng split(std::string_view name) const;
  Rng split(std::uint64_t index) const;

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Unbiased integer in [lo, hi).
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal via Box-Muller (one draw per call).
  double normal();

  Tensor normal_tensor(Shape shape, DType dtype);
  Tensor uniform_tensor(Shape shape, double lo, double hi, DType dtype);

  State state() const;
  static Rng from_state(const State& state);

 private:
  void refill();

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint32_t, 4> block_{};
  std::uint32_t lane_ = 4;
};

std::uint64_t fnv1a64(std::string_view text);

}  // namespace emocast
