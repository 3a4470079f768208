// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

namespace emocast {

using detail::dispatch;
using detail::make_tensor;
using detail::record;

namespace {

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) {
    throw ValueError(fmt::format("{}: dtype mismatch {} vs {}", op, dtype_name(a.dtype()), dtype_name(b.dtype())));
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw ValueError(fmt::format("{}: axis {} invalid for rank {}", op, axis, rank));
  return a;
}

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[static_cast<std::size_t>(i)] = strides[static_cast<std::size_t>(i) + 1] * shape[static_cast<std::size_t>(i) + 1];
  }
  return strides;
}

// Strides of `in` viewed at rank of `out`, zero along broadcast axes.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  const auto base = contiguous_strides(in);
  std::vector<std::int64_t> strides(out.size(), 0);
  const std::size_t lead = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i) {
    strides[lead + i] = in[i] == 1 ? 0 : base[i];
  }
  return strides;
}

// Calls fn(out_offset, a_offset, b_offset) over every element of `out` in row-major order.
template <typename F>
void for_each_indexed(const Shape& out, const std::vector<std::int64_t>& sa, const std::vector<std::int64_t>& sb,
                      F&& fn) {
  const int r = static_cast<int>(out.size());
  if (shape_numel(out) == 0) return;
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  const std::int64_t inner = out[static_cast<std::size_t>(r - 1)];
  const std::int64_t ia = sa[static_cast<std::size_t>(r - 1)];
  const std::int64_t ib = sb[static_cast<std::size_t>(r - 1)];
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t off_a = 0, off_b = 0, o = 0;
  while (true) {
    for (std::int64_t j = 0; j < inner; ++j) fn(o + j, off_a + j * ia, off_b + j * ib);
    o += inner;
    int d = r - 2;
    for (; d >= 0; --d) {
      const auto ud = static_cast<std::size_t>(d);
      ++idx[ud];
      off_a += sa[ud];
      off_b += sb[ud];
      if (idx[ud] < out[ud]) break;
      off_a -= sa[ud] * out[ud];
      off_b -= sb[ud] * out[ud];
      idx[ud] = 0;
    }
    if (d < 0) break;
  }
}

enum class BinaryKind { add, sub, mul };

Tensor binary_forward(const Tensor& a, const Tensor& b, BinaryKind kind) {
  const Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto out = make_tensor(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    auto po = out.mutable_data<T>();
    if (a.shape() == b.shape()) {
      for (std::size_t i = 0; i < po.size(); ++i) {
        po[i] = kind == BinaryKind::add ? pa[i] + pb[i] : kind == BinaryKind::sub ? pa[i] - pb[i] : pa[i] * pb[i];
      }
      return;
    }
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_indexed(out_shape, sa, sb, [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
      const T x = pa[static_cast<std::size_t>(ia)];
      const T y = pb[static_cast<std::size_t>(ib)];
      po[static_cast<std::size_t>(o)] = kind == BinaryKind::add ? x + y : kind == BinaryKind::sub ? x - y : x * y;
    });
  });
  return out;
}

// Batched row-major GEMM over contiguous matrices: C[M,N] = op(A) op(B).
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t n, std::int64_t k, bool ta, bool tb) {
  std::vector<T> a_tmp, b_tmp;
  if (ta) {
    a_tmp.resize(static_cast<std::size_t>(m * k));
    for (std::int64_t p = 0; p < k; ++p)
      for (std::int64_t i = 0; i < m; ++i) a_tmp[static_cast<std::size_t>(i * k + p)] = a[p * m + i];
    a = a_tmp.data();
  }
  if (tb) {
    b_tmp.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) b_tmp[static_cast<std::size_t>(p * n + j)] = b[j * k + p];
    b = b_tmp.data();
  }
  std::fill(c, c + m * n, T(0));
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = arow[p];
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

Tensor gemm_op(const Tensor& a, const Tensor& b, bool ta, bool tb);

Tensor gemm_2d_flat(const Tensor& a, const Tensor& b, bool tb) {
  // a is [..., m, k] with 2-D weight b; fold leading dims into rows.
  Shape lead(a.shape().begin(), a.shape().end() - 1);
  const std::int64_t k = a.dim(-1);
  auto a2 = reshape(a, {shape_numel(lead), k});
  auto c2 = gemm_op(a2, b, false, tb);
  Shape out = lead;
  out.push_back(c2.dim(-1));
  return reshape(c2, out);
}

Tensor gemm_op(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  require_same_dtype(a, b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError(fmt::format("matmul needs rank >= 2 operands, got {} and {}", shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
  if (b.rank() == 2 && a.rank() > 2) {
    if (ta) throw ShapeError("matmul: transposed batched lhs with 2-D rhs is unsupported");
    return gemm_2d_flat(a, b, tb);
  }
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2)) {
    throw ShapeError(fmt::format("matmul batch dimensions differ: {} vs {}", shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
  const std::int64_t m = ta ? a.dim(-1) : a.dim(-2);
  const std::int64_t ka = ta ? a.dim(-2) : a.dim(-1);
  const std::int64_t kb = tb ? b.dim(-1) : b.dim(-2);
  const std::int64_t n = tb ? b.dim(-2) : b.dim(-1);
  if (ka != kb) {
    throw ShapeError(fmt::format("matmul inner dimensions disagree: {} vs {}", shape_string(a.shape()),
                                 shape_string(b.shape())));
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  const std::int64_t batch = shape_numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);
  auto out = make_tensor(out_shape, a.dtype());
  dispatch(a.dtype(), [&]<typename T>() {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* pc = out.mutable_data<T>().data();
    for (std::int64_t i = 0; i < batch; ++i) {
      gemm(pa + i * m * ka, pb + i * ka * n, pc + i * m * n, m, n, ka, ta, tb);
    }
  });
  record(out, "matmul", {a, b}, [a_ = a.detach(), b_ = b.detach(), ta, tb](const Tensor& g) {
    Tensor ga, gb;
    if (!ta && !tb) {
      ga = gemm_op(g, b_, false, true);
      gb = gemm_op(a_, g, true, false);
    } else if (!ta && tb) {
      ga = gemm_op(g, b_, false, false);
      gb = gemm_op(g, a_, true, false);
    } else if (ta && !tb) {
      ga = gemm_op(b_, g, false, true);
      gb = gemm_op(a_, g, false, false);
    } else {
      ga = gemm_op(b_, g, true, true);
      gb = gemm_op(g, a_, true, true);
    }
    return std::vector<Tensor>{ga, gb};
  });
  return out;
}

template <typename T>
void conv_forward(const T* in, const T* w, const T* bias, T* out, std::int64_t n, std::int64_t cin,
                  std::int64_t cout, std::int64_t h, std::int64_t wd, std::int64_t kh, std::int64_t kw) {
  const std::int64_t ph = kh / 2, pw = kw / 2, plane = h * wd;
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t co = 0; co < cout; ++co) {
      T* o = out + (s * cout + co) * plane;
      std::fill(o, o + plane, bias ? bias[co] : T(0));
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* x = in + (s * cin + ci) * plane;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t dy = ky - ph;
          const std::int64_t y0 = std::max<std::int64_t>(0, -dy), y1 = std::min(h, h - dy);
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t dx = kx - pw;
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx), x1 = std::min(wd, wd - dx);
            const T wv = w[((co * cin + ci) * kh + ky) * kw + kx];
            for (std::int64_t y = y0; y < y1; ++y) {
              T* orow = o + y * wd;
              const T* xrow = x + (y + dy) * wd + dx;
              for (std::int64_t xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward(const T* in, const T* w, const T* g, T* gin, T* gw, T* gb, std::int64_t n, std::int64_t cin,
                   std::int64_t cout, std::int64_t h, std::int64_t wd, std::int64_t kh, std::int64_t kw) {
  const std::int64_t ph = kh / 2, pw = kw / 2, plane = h * wd;
  for (std::int64_t s = 0; s < n; ++s) {
    for (std::int64_t co = 0; co < cout; ++co) {
      const T* go = g + (s * cout + co) * plane;
      if (gb) {
        T acc = 0;
        for (std::int64_t i = 0; i < plane; ++i) acc += go[i];
        gb[co] += acc;
      }
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* x = in + (s * cin + ci) * plane;
        T* gx = gin + (s * cin + ci) * plane;
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t dy = ky - ph;
          const std::int64_t y0 = std::max<std::int64_t>(0, -dy), y1 = std::min(h, h - dy);
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t dx = kx - pw;
            const std::int64_t x0 = std::max<std::int64_t>(0, -dx), x1 = std::min(wd, wd - dx);
            const std::int64_t widx = ((co * cin + ci) * kh + ky) * kw + kx;
            const T wv = w[widx];
            T acc = 0;
            for (std::int64_t y = y0; y < y1; ++y) {
              const T* grow = go + y * wd;
              const T* xrow = x + (y + dy) * wd + dx;
              T* gxrow = gx + (y + dy) * wd + dx;
              for (std::int64_t xx = x0; xx < x1; ++xx) {
                acc += grow[xx] * xrow[xx];
                gxrow[xx] += wv * grow[xx];
              }
            }
            gw[widx] += acc;
          }
        }
      }
    }
  }
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(fmt::format("shapes {} and {} are not broadcast-compatible", shape_string(a), shape_string(b)));
    }
    out[i] = da == 1 ? db : da;
  }
  return out;
}

Tensor sum_to_shape(const Tensor& x, const Shape& shape) {
  if (x.shape() == shape) return x;
  if (broadcast_shapes(x.shape(), shape) != x.shape()) {
    throw ShapeError(fmt::format("cannot reduce {} to {}", shape_string(x.shape()), shape_string(shape)));
  }
  auto out = make_tensor(shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    const auto sx = contiguous_strides(x.shape());
    const auto so = broadcast_strides(shape, x.shape());
    for_each_indexed(x.shape(), sx, so, [&](std::int64_t, std::int64_t ix, std::int64_t io) {
      po[static_cast<std::size_t>(io)] += px[static_cast<std::size_t>(ix)];
    });
  });
  record(out, "sum_to_shape", {x}, [xs = x.shape(), dt = x.dtype()](const Tensor& g) {
    return std::vector<Tensor>{add(Tensor::zeros(xs, dt), g)};
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) { return gemm_op(a, b, false, false); }

Tensor matmul_nt(const Tensor& a, const Tensor& b) { return gemm_op(a, b, false, true); }

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "add");
  auto out = binary_forward(a, b, BinaryKind::add);
  record(out, "add", {a, b}, [sa = a.shape(), sb = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{sum_to_shape(g, sa), sum_to_shape(g, sb)};
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "sub");
  auto out = binary_forward(a, b, BinaryKind::sub);
  record(out, "sub", {a, b}, [sa = a.shape(), sb = b.shape()](const Tensor& g) {
    return std::vector<Tensor>{sum_to_shape(g, sa), scale(sum_to_shape(g, sb), -1.0)};
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "mul");
  auto out = binary_forward(a, b, BinaryKind::mul);
  record(out, "mul", {a, b}, [a_ = a.detach(), b_ = b.detach()](const Tensor& g) {
    return std::vector<Tensor>{sum_to_shape(mul(g, b_), a_.shape()), sum_to_shape(mul(g, a_), b_.shape())};
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  auto out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = px[i] * f;
  });
  record(out, "scale", {x}, [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
  return out;
}

Tensor silu(const Tensor& x) {
  auto out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] = px[i] / (T(1) + std::exp(-px[i]));
  });
  record(out, "silu", {x}, [x_ = x.detach()](const Tensor& g) {
    auto gx = make_tensor(x_.shape(), x_.dtype());
    dispatch(x_.dtype(), [&]<typename T>() {
      auto px = x_.data<T>();
      auto pg = g.data<T>();
      auto po = gx.mutable_data<T>();
      for (std::size_t i = 0; i < po.size(); ++i) {
        const T s = T(1) / (T(1) + std::exp(-px[i]));
        po[i] = pg[i] * s * (T(1) + px[i] * (T(1) - s));
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor mask_apply(const Tensor& x, const Tensor& mask) {
  require_same_dtype(x, mask, "mask_apply");
  if (mask.requires_grad()) throw ValueError("mask_apply: mask must be a constant tensor");
  if (broadcast_shapes(x.shape(), mask.shape()) != x.shape()) {
    throw ShapeError(fmt::format("mask_apply: mask {} does not broadcast to {}", shape_string(mask.shape()),
                                 shape_string(x.shape())));
  }
  for (double v : mask.to_vector()) {
    if (v != 0.0 && v != 1.0) throw ValueError(fmt::format("mask_apply: mask value {} is not 0 or 1", v));
  }
  auto out = binary_forward(x, mask, BinaryKind::mul);
  record(out, "mask_apply", {x}, [m = mask.detach()](const Tensor& g) {
    return std::vector<Tensor>{binary_forward(g, m, BinaryKind::mul)};
  });
  return out;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ValueError("concat of zero tensors");
  const auto& first = parts.front();
  const int r = first.rank();
  const int ax = normalize_axis(axis, r, "concat");
  Shape out_shape = first.shape();
  out_shape[static_cast<std::size_t>(ax)] = 0;
  for (const auto& p : parts) {
    require_same_dtype(first, p, "concat");
    bool ok = p.rank() == r;
    for (int i = 0; ok && i < r; ++i) ok = i == ax || p.dim(i) == first.dim(i);
    if (!ok) {
      throw ShapeError(fmt::format("concat: {} incompatible with {} on axis {}", shape_string(p.shape()),
                                   shape_string(first.shape()), ax));
    }
    out_shape[static_cast<std::size_t>(ax)] += p.dim(ax);
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= first.dim(i);
  for (int i = ax + 1; i < r; ++i) inner *= first.dim(i);
  const std::int64_t total = out_shape[static_cast<std::size_t>(ax)];
  auto out = make_tensor(out_shape, first.dtype());
  dispatch(first.dtype(), [&]<typename T>() {
    auto po = out.mutable_data<T>();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      auto pp = p.data<T>();
      const std::int64_t len = p.dim(ax);
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(pp.begin() + o * len * inner, len * inner, po.begin() + (o * total + offset) * inner);
      }
      offset += len;
    }
  });
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  std::vector<std::int64_t> lengths;
  for (const auto& p : parts) lengths.push_back(p.dim(ax));
  record(out, "concat", inputs, [ax, lengths](const Tensor& g) {
    std::vector<Tensor> grads;
    std::int64_t start = 0;
    for (auto len : lengths) {
      grads.push_back(slice(g, ax, start, len));
      start += len;
    }
    return grads;
  });
  return out;
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
  const int ax = normalize_axis(axis, x.rank(), "slice");
  if (start < 0 || length < 0 || start + length > x.dim(ax)) {
    throw ShapeError(fmt::format("slice [{}, {}) out of range for axis {} of {}", start, start + length, ax,
                                 shape_string(x.shape())));
  }
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::int64_t full = x.dim(ax);
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  auto out = make_tensor(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(px.begin() + (o * full + start) * inner, length * inner, po.begin() + o * length * inner);
    }
  });
  record(out, "slice", {x}, [xs = x.shape(), dt = x.dtype(), ax, start, length, outer, inner, full](const Tensor& g) {
    auto gx = make_tensor(xs, dt);
    dispatch(dt, [&]<typename T>() {
      auto pg = g.data<T>();
      auto po = gx.mutable_data<T>();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(pg.begin() + o * length * inner, length * inner, po.begin() + (o * full + start) * inner);
      }
    });
    (void)ax;
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred dimension");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[static_cast<std::size_t>(infer)] = x.numel() / known;
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError(fmt::format("reshape {} to {} changes element count", shape_string(x.shape()), shape_string(shape)));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = shape;
  impl->dtype = x.dtype();
  impl->buffer = x.impl()->buffer;
  Tensor out(std::move(impl));
  record(out, "reshape", {x}, [xs = x.shape()](const Tensor& g) { return std::vector<Tensor>{reshape(g, xs)}; });
  return out;
}

Tensor permute(const Tensor& x, std::vector<int> order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r) throw ValueError("permute: order length must equal rank");
  std::vector<int> seen(static_cast<std::size_t>(r), 0);
  for (int o : order) {
    if (o < 0 || o >= r || seen[static_cast<std::size_t>(o)]++) throw ValueError("permute: order is not a permutation");
  }
  const auto in_strides = contiguous_strides(x.shape());
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> src_strides(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.dim(order[static_cast<std::size_t>(i)]);
    src_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  auto out = make_tensor(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for_each_indexed(out_shape, src_strides, src_strides, [&](std::int64_t o, std::int64_t i, std::int64_t) {
      po[static_cast<std::size_t>(o)] = px[static_cast<std::size_t>(i)];
    });
  });
  std::vector<int> inverse(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i;
  record(out, "permute", {x}, [inverse](const Tensor& g) { return std::vector<Tensor>{permute(g, inverse)}; });
  return out;
}

Tensor repeat_rows(const Tensor& x, std::int64_t times) {
  if (x.rank() < 1) throw ShapeError("repeat_rows needs rank >= 1");
  if (times < 1) throw ValueError("repeat_rows: times must be positive");
  const std::int64_t rows = x.dim(0);
  const std::int64_t row = rows == 0 ? 0 : x.numel() / rows;
  Shape out_shape = x.shape();
  out_shape[0] *= times;
  auto out = make_tensor(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t t = 0; t < times; ++t) std::copy_n(px.begin() + r * row, row, po.begin() + (r * times + t) * row);
  });
  record(out, "repeat_rows", {x}, [xs = x.shape(), dt = x.dtype(), rows, row, times](const Tensor& g) {
    auto gx = make_tensor(xs, dt);
    dispatch(dt, [&]<typename T>() {
      auto pg = g.data<T>();
      auto po = gx.mutable_data<T>();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t t = 0; t < times; ++t)
          for (std::int64_t i = 0; i < row; ++i) po[static_cast<std::size_t>(r * row + i)] += pg[static_cast<std::size_t>((r * times + t) * row + i)];
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = normalize_axis(axis, x.rank(), "softmax");
  const std::int64_t len = x.dim(ax);
  if (len == 0) throw ShapeError(fmt::format("softmax over empty axis {} of {}", ax, shape_string(x.shape())));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= x.dim(i);
  for (int i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  auto out = make_tensor(x.shape(), x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T mx = px[static_cast<std::size_t>(base)];
        for (std::int64_t k = 1; k < len; ++k) mx = std::max(mx, px[static_cast<std::size_t>(base + k * inner)]);
        T total = 0;
        for (std::int64_t k = 0; k < len; ++k) {
          const auto idx = static_cast<std::size_t>(base + k * inner);
          po[idx] = std::exp(px[idx] - mx);
          total += po[idx];
        }
        for (std::int64_t k = 0; k < len; ++k) po[static_cast<std::size_t>(base + k * inner)] /= total;
      }
    }
  });
  record(out, "softmax", {x}, [y = out.detach(), outer, inner, len](const Tensor& g) {
    auto gx = make_tensor(y.shape(), y.dtype());
    dispatch(y.dtype(), [&]<typename T>() {
      auto py = y.data<T>();
      auto pg = g.data<T>();
      auto po = gx.mutable_data<T>();
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * len * inner + in;
          T dot = 0;
          for (std::int64_t k = 0; k < len; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * inner);
            dot += pg[idx] * py[idx];
          }
          for (std::int64_t k = 0; k < len; ++k) {
            const auto idx = static_cast<std::size_t>(base + k * inner);
            po[idx] = py[idx] * (pg[idx] - dot);
          }
        }
      }
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  require_same_dtype(input, kernel, "conv2d");
  if (input.rank() != 3 && input.rank() != 4) {
    throw ShapeError(fmt::format("conv2d input must be [C,H,W] or [N,C,H,W], got {}", shape_string(input.shape())));
  }
  if (kernel.rank() != 4) throw ShapeError(fmt::format("conv2d kernel must be rank 4, got {}", shape_string(kernel.shape())));
  const bool batched = input.rank() == 4;
  const std::int64_t n = batched ? input.dim(0) : 1;
  const std::int64_t cin = input.dim(-3), h = input.dim(-2), w = input.dim(-1);
  const std::int64_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) {
    throw ShapeError(fmt::format("conv2d channel mismatch: input {} vs kernel {}", shape_string(input.shape()),
                                 shape_string(kernel.shape())));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError(fmt::format("conv2d kernel {} must be odd", shape_string(kernel.shape())));
  if (bias.defined()) {
    require_same_dtype(input, bias, "conv2d");
    if (bias.shape() != Shape{cout}) throw ShapeError(fmt::format("conv2d bias {} for {} outputs", shape_string(bias.shape()), cout));
  }
  Shape out_shape = batched ? Shape{n, cout, h, w} : Shape{cout, h, w};
  auto out = make_tensor(out_shape, input.dtype());
  dispatch(input.dtype(), [&]<typename T>() {
    conv_forward<T>(input.data<T>().data(), kernel.data<T>().data(), bias.defined() ? bias.data<T>().data() : nullptr,
                    out.mutable_data<T>().data(), n, cin, cout, h, w, kh, kw);
  });
  std::vector<Tensor> inputs{input, kernel};
  if (bias.defined()) inputs.push_back(bias);
  record(out, "conv2d", inputs,
         [x_ = input.detach(), k_ = kernel.detach(), has_bias = bias.defined(), n, cin, cout, h, w, kh, kw](const Tensor& g) {
           auto gx = make_tensor(x_.shape(), x_.dtype());
           auto gk = make_tensor(k_.shape(), k_.dtype());
           Tensor gb = has_bias ? make_tensor({cout}, x_.dtype()) : Tensor();
           dispatch(x_.dtype(), [&]<typename T>() {
             conv_backward<T>(x_.data<T>().data(), k_.data<T>().data(), g.data<T>().data(), gx.mutable_data<T>().data(),
                              gk.mutable_data<T>().data(), has_bias ? gb.mutable_data<T>().data() : nullptr, n, cin, cout, h,
                              w, kh, kw);
           });
           std::vector<Tensor> grads{gx, gk};
           if (has_bias) grads.push_back(gb);
           return grads;
         });
  return out;
}

Tensor avg_pool2d(const Tensor& x, int factor) {
  if (x.rank() < 2 || factor < 1 || x.dim(-1) % factor || x.dim(-2) % factor) {
    throw ShapeError(fmt::format("avg_pool2d factor {} does not divide {}", factor, shape_string(x.shape())));
  }
  const std::int64_t h = x.dim(-2), w = x.dim(-1), oh = h / factor, ow = w / factor;
  const std::int64_t planes = x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  auto out = make_tensor(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    const T inv = T(1) / static_cast<T>(factor * factor);
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          T acc = 0;
          for (int dy = 0; dy < factor; ++dy)
            for (int dx = 0; dx < factor; ++dx) acc += px[static_cast<std::size_t>(p * h * w + (y * factor + dy) * w + xx * factor + dx)];
          po[static_cast<std::size_t>(p * oh * ow + y * ow + xx)] = acc * inv;
        }
  });
  record(out, "avg_pool2d", {x}, [factor](const Tensor& g) {
    return std::vector<Tensor>{scale(upsample_nearest2d(g, factor), 1.0 / (factor * factor))};
  });
  return out;
}

Tensor upsample_nearest2d(const Tensor& x, int factor) {
  if (x.rank() < 2 || factor < 1) throw ShapeError(fmt::format("upsample_nearest2d on {}", shape_string(x.shape())));
  const std::int64_t h = x.dim(-2), w = x.dim(-1), oh = h * factor, ow = w * factor;
  const std::int64_t planes = h * w == 0 ? 0 : x.numel() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = oh;
  out_shape[out_shape.size() - 1] = ow;
  auto out = make_tensor(out_shape, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    auto px = x.data<T>();
    auto po = out.mutable_data<T>();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx)
          po[static_cast<std::size_t>(p * oh * ow + y * ow + xx)] = px[static_cast<std::size_t>(p * h * w + (y / factor) * w + xx / factor)];
  });
  record(out, "upsample_nearest2d", {x}, [factor](const Tensor& g) {
    return std::vector<Tensor>{scale(avg_pool2d(g, factor), static_cast<double>(factor * factor))};
  });
  return out;
}

Tensor sum(const Tensor& x) {
  auto out = make_tensor({}, x.dtype());
  dispatch(x.dtype(), [&]<typename T>() {
    T acc = 0;
    for (T v : x.data<T>()) acc += v;
    out.mutable_data<T>()[0] = acc;
  });
  record(out, "sum", {x}, [xs = x.shape(), dt = x.dtype()](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(xs, g.item(), dt)};
  });
  return out;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same_dtype(pred, target, "mse_loss");
  if (pred.shape() != target.shape()) {
    throw ShapeError(fmt::format("mse_loss shape mismatch: {} vs {}", shape_string(pred.shape()), shape_string(target.shape())));
  }
  if (pred.numel() == 0) throw ShapeError("mse_loss of empty tensors");
  auto out = make_tensor({}, pred.dtype());
  const auto n = pred.numel();
  dispatch(pred.dtype(), [&]<typename T>() {
    auto pp = pred.data<T>();
    auto pt = target.data<T>();
    T acc = 0;
    for (std::size_t i = 0; i < pp.size(); ++i) {
      const T d = pp[i] - pt[i];
      acc += d * d;
    }
    out.mutable_data<T>()[0] = acc / static_cast<T>(n);
  });
  record(out, "mse_loss", {pred, target}, [p_ = pred.detach(), t_ = target.detach(), n](const Tensor& g) {
    auto gp = make_tensor(p_.shape(), p_.dtype());
    dispatch(p_.dtype(), [&]<typename T>() {
      auto pp = p_.data<T>();
      auto pt = t_.data<T>();
      auto po = gp.mutable_data<T>();
      const T f = static_cast<T>(2.0 * g.item() / static_cast<double>(n));
      for (std::size_t i = 0; i < po.size(); ++i) po[i] = f * (pp[i] - pt[i]);
    });
    return std::vector<Tensor>{gp, scale(gp, -1.0)};
  });
  return out;
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != static_cast<std::int64_t>(labels.size()) || logits.dim(0) == 0) {
    throw ShapeError(fmt::format("cross_entropy: logits {} with {} labels", shape_string(logits.shape()), labels.size()));
  }
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  for (int l : labels) {
    if (l < 0 || l >= k) throw ValueError(fmt::format("cross_entropy: label {} outside [0, {})", l, k));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  auto probs = make_tensor(logits.shape(), logits.dtype());
  auto out = make_tensor({}, logits.dtype());
  dispatch(logits.dtype(), [&]<typename T>() {
    auto px = logits.data<T>();
    auto pp = probs.mutable_data<T>();
    T loss = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const T* row = px.data() + i * k;
      T mx = *std::max_element(row, row + k);
      T total = 0;
      for (std::int64_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < k; ++j) pp[static_cast<std::size_t>(i * k + j)] = std::exp(row[j] - mx) / total;
      loss += -(row[lab[static_cast<std::size_t>(i)]] - mx - std::log(total));
    }
    out.mutable_data<T>()[0] = loss / static_cast<T>(n);
  });
  record(out, "cross_entropy", {logits}, [probs, lab, n, k](const Tensor& g) {
    auto gx = probs.clone();
    dispatch(gx.dtype(), [&]<typename T>() {
      auto pg = gx.mutable_data<T>();
      for (std::int64_t i = 0; i < n; ++i) pg[static_cast<std::size_t>(i * k + lab[static_cast<std::size_t>(i)])] -= T(1);
      const T f = static_cast<T>(g.item() / static_cast<double>(n));
      for (auto& v : pg) v *= f;
    });
    return std::vector<Tensor>{gx};
  });
  return out;
}

}  // namespace emocast
