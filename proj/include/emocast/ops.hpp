// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

#include "emocast/tensor.hpp"

namespace emocast {

// Every op below records itself on the tape when grad mode is on and an input
// requires grad. Operands must share a dtype.

/// [..., m, k] x [k, n] or [B.., m, k] x [B.., k, n] (identical leading dims).
Tensor matmul(const Tensor& a, const Tensor& b);
/// a x b^T over the last two axes: [..., m, k] x [n, k] or batched [B.., n, k].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor silu(const Tensor& x);

/// Hadamard product with a constant {0,1} mask broadcastable to x's shape.
Tensor mask_apply(const Tensor& x, const Tensor& mask);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<int> order);
/// Repeats each row along axis 0 `times` consecutively: [B, ...] -> [B*times, ...].
Tensor repeat_rows(const Tensor& x, std::int64_t times);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// Same-padded cross-correlation. input [C_in,H,W] or [N,C_in,H,W];
/// kernel [C_out,C_in,kh,kw] with odd kh, kw; bias [C_out] or undefined.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = Tensor());
Tensor avg_pool2d(const Tensor& x, int factor);
Tensor upsample_nearest2d(const Tensor& x, int factor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);
/// Mean negative log-likelihood of `labels` under softmax(logits); logits [N, K].
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Reduces a broadcast gradient back to `shape` by summation.
Tensor sum_to_shape(const Tensor& x, const Shape& shape);
Shape broadcast_shapes(const Shape& a, const Shape& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double s, const Tensor& x) { return scale(x, s); }

}  // namespace emocast
