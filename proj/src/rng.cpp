// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/rng.hpp"

#include <cmath>
#include <numbers>

#include <fmt/format.h>

namespace emocast {

namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::array<std::uint32_t, 4> philox4x32(std::uint64_t counter, std::uint64_t key) {
  std::array<std::uint32_t, 4> c{static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32), 0u, 0u};
  std::uint32_t k0 = static_cast<std::uint32_t>(key), k1 = static_cast<std::uint32_t>(key >> 32);
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kPhiloxM0) * c[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kPhiloxM1) * c[2];
    c = {static_cast<std::uint32_t>(p1 >> 32) ^ c[1] ^ k0, static_cast<std::uint32_t>(p1),
         static_cast<std::uint32_t>(p0 >> 32) ^ c[3] ^ k1, static_cast<std::uint32_t>(p0)};
    k0 += kPhiloxW0;
    k1 += kPhiloxW1;
  }
  return c;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001B3ull;
  }
  return h;
}

Rng::Rng(std::uint64_t seed) : key_(splitmix64(seed)) {}

Rng Rng::split(std::string_view name) const {
  Rng child;
  child.key_ = splitmix64(key_ ^ splitmix64(fnv1a64(name)));
  return child;
}

Rng Rng::split(std::uint64_t index) const {
  Rng child;
  child.key_ = splitmix64(splitmix64(key_) + index);
  return child;
}

void Rng::refill() {
  block_ = philox4x32(counter_++, key_);
  lane_ = 0;
}

std::uint32_t Rng::next_u32() {
  if (lane_ >= 4) refill();
  return block_[lane_++];
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t hi = next_u32();
  return (hi << 32) | next_u32();
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) throw ValueError(fmt::format("uniform_int: empty range [{}, {})", lo, hi));
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % span;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor Rng::normal_tensor(Shape shape, DType dtype) {
  auto t = Tensor::zeros(std::move(shape), dtype);
  detail::dispatch(dtype, [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(normal());
  });
  return t;
}

Tensor Rng::uniform_tensor(Shape shape, double lo, double hi, DType dtype) {
  auto t = Tensor::zeros(std::move(shape), dtype);
  detail::dispatch(dtype, [&]<typename T>() {
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(uniform(lo, hi));
  });
  return t;
}

Rng::State Rng::state() const {
  // The buffered block is a pure function of (key, counter - 1), so lane suffices.
  return State{key_, counter_, lane_};
}

Rng Rng::from_state(const State& state) {
  Rng rng;
  rng.key_ = state.key;
  rng.counter_ = state.counter;
  rng.lane_ = state.lane;
  if (state.lane < 4) {
    if (state.counter == 0) throw ValueError("corrupt rng state");
    rng.block_ = philox4x32(state.counter - 1, state.key);
  }
  return rng;
}

}  // namespace emocast
