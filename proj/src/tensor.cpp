// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#include "emocast/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include <fmt/format.h>

namespace emocast {

namespace {

std::atomic<std::uint64_t> g_sequence{0};
thread_local bool g_grad_enabled = true;

void check_shape(const Shape& shape) {
  for (auto d : shape) {
    if (d < 0) throw ShapeError(fmt::format("negative dimension in shape {}", shape_string(shape)));
  }
}

template <typename T>
std::vector<T>& buffer_of(detail::TensorImpl& impl) {
  return std::get<std::vector<T>>(*impl.buffer);
}

// In-place dst += src for equal shapes and dtypes.
void accumulate(Tensor& dst, const Tensor& src) {
  if (!dst.defined()) {
    dst = src.clone();
    return;
  }
  if (dst.shape() != src.shape()) {
    throw ShapeError(fmt::format("gradient shape {} does not match {}", shape_string(src.shape()),
                                 shape_string(dst.shape())));
  }
  detail::dispatch(dst.dtype(), [&]<typename T>() {
    auto out = dst.mutable_data<T>();
    auto in = src.data<T>();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  });
}

}  // namespace

const char* dtype_name(DType dtype) {
  switch (dtype) {
    case DType::f32:
      return "float32";
    case DType::f64:
      return "float64";
  }
  return "?";
}

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace detail {

Tensor make_tensor(Shape shape, DType dtype) {
  check_shape(shape);
  auto impl = std::make_shared<TensorImpl>();
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  impl->shape = std::move(shape);
  impl->dtype = dtype;
  if (dtype == DType::f32) {
    impl->buffer = std::make_shared<Buffer>(std::vector<float>(n, 0.0f));
  } else {
    impl->buffer = std::make_shared<Buffer>(std::vector<double>(n, 0.0));
  }
  return Tensor(std::move(impl));
}

bool grad_enabled() { return g_grad_enabled; }

void record(Tensor& output, const char* op, std::vector<Tensor> inputs, BackwardFn backward) {
  if (!g_grad_enabled) return;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return;
  auto node = std::make_shared<Node>();
  node->sequence = ++g_sequence;
  node->op = op;
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  output.impl()->node = std::move(node);
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, DType dtype) { return detail::make_tensor(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  auto t = detail::make_tensor(std::move(shape), dtype);
  detail::dispatch(dtype, [&]<typename T>() {
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_string(shape),
                                 shape_numel(shape), values.size()));
  }
  auto t = detail::make_tensor(std::move(shape), dtype);
  detail::dispatch(dtype, [&]<typename T>() {
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
  return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::from_buffer(Shape shape, std::vector<float> values) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_string(shape),
                                 shape_numel(shape), values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f32;
  impl->buffer = std::make_shared<detail::Buffer>(std::move(values));
  return Tensor(std::move(impl));
}

Tensor Tensor::from_buffer(Shape shape, std::vector<double> values) {
  check_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_string(shape),
                                 shape_numel(shape), values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->dtype = DType::f64;
  impl->buffer = std::make_shared<detail::Buffer>(std::move(values));
  return Tensor(std::move(impl));
}

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::rank() const { return static_cast<int>(impl_->shape.size()); }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ValueError(fmt::format("axis {} out of range for rank {}", axis, r));
  return impl_->shape[static_cast<std::size_t>(a)];
}

std::int64_t Tensor::numel() const { return shape_numel(impl_->shape); }

DType Tensor::dtype() const { return impl_->dtype; }

template <typename T>
std::span<const T> Tensor::data() const {
  if (!impl_) throw ValueError("access to undefined tensor");
  const auto* v = std::get_if<std::vector<T>>(impl_->buffer.get());
  if (!v) throw ValueError(fmt::format("tensor holds {}", dtype_name(impl_->dtype)));
  return {v->data(), v->size()};
}

template <typename T>
std::span<T> Tensor::mutable_data() {
  if (!impl_) throw ValueError("access to undefined tensor");
  if (impl_->node) throw ValueError("cannot mutate a tensor recorded on the tape");
  auto* v = std::get_if<std::vector<T>>(impl_->buffer.get());
  if (!v) throw ValueError(fmt::format("tensor holds {}", dtype_name(impl_->dtype)));
  return {v->data(), v->size()};
}

template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

std::vector<double> Tensor::to_vector() const {
  return detail::dispatch(dtype(), [&]<typename T>() {
    auto d = data<T>();
    return std::vector<double>(d.begin(), d.end());
  });
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError(fmt::format("item() needs one element, shape is {}", shape_string(shape())));
  return to_vector()[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank()) {
    throw ShapeError(fmt::format("index of rank {} for shape {}", index.size(), shape_string(shape())));
  }
  std::int64_t offset = 0;
  std::size_t i = 0;
  for (auto idx : index) {
    const auto d = impl_->shape[i++];
    if (idx < 0 || idx >= d) throw ValueError(fmt::format("index {} out of range {}", idx, d));
    offset = offset * d + idx;
  }
  return detail::dispatch(dtype(), [&]<typename T>() { return static_cast<double>(data<T>()[offset]); });
}

Tensor& Tensor::set_requires_grad(bool flag) {
  if (impl_->node) throw AutogradError("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = flag;
  return *this;
}

bool Tensor::requires_grad() const { return impl_ && (impl_->requires_grad || impl_->node != nullptr); }

bool Tensor::is_leaf() const { return impl_ && impl_->node == nullptr; }

Tensor Tensor::grad() const {
  if (impl_->grad.defined()) return impl_->grad;
  return zeros(shape(), dtype());
}

bool Tensor::has_grad() const { return impl_->grad.defined(); }

void Tensor::zero_grad() { impl_->grad = Tensor(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->buffer = impl_->buffer;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->buffer = std::make_shared<detail::Buffer>(*impl_->buffer);
  return Tensor(std::move(impl));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  auto values = to_vector();
  return from(shape(), values, target);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tape Tape::collect(const Tensor& loss) {
  Tape tape;
  if (!loss.defined() || !loss.impl()->node) return tape;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{loss.impl()->node};
  seen.insert(stack.back().get());
  while (!stack.empty()) {
    auto node = std::move(stack.back());
    stack.pop_back();
    if (!node->backward) throw AutogradError(fmt::format("graph through '{}' was already consumed", node->op));
    for (const auto& in : node->inputs) {
      const auto& child = in.impl()->node;
      if (child && seen.insert(child.get()).second) stack.push_back(child);
    }
    tape.nodes_.push_back(std::move(node));
  }
  std::sort(tape.nodes_.begin(), tape.nodes_.end(),
            [](const auto& a, const auto& b) { return a->sequence > b->sequence; });
  return tape;
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto& n : nodes_) names.emplace_back(n->op);
  return names;
}

void Tape::run(const Tensor& root, const Tensor& seed) {
  NoGradGuard no_grad;
  if (nodes_.empty()) {
    if (root.impl()->requires_grad) accumulate(root.impl()->grad, seed);
    return;
  }
  nodes_.front()->grad = seed.clone();
  for (auto& node : nodes_) {
    if (node->grad.defined()) {
      auto grads = node->backward(node->grad);
      for (std::size_t i = 0; i < node->inputs.size(); ++i) {
        if (i >= grads.size() || !grads[i].defined()) continue;
        auto& in = node->inputs[i];
        if (grads[i].shape() != in.shape() || grads[i].dtype() != in.dtype()) {
          throw AutogradError(fmt::format("'{}' produced gradient {} for input {}", node->op,
                                          shape_string(grads[i].shape()), shape_string(in.shape())));
        }
        if (auto& child = in.impl()->node) {
          accumulate(child->grad, grads[i]);
        } else if (in.impl()->requires_grad) {
          accumulate(in.impl()->grad, grads[i]);
        }
      }
    }
    node->backward = nullptr;
    node->inputs.clear();
    node->grad = Tensor();
  }
  nodes_.clear();
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw AutogradError("backward() on undefined tensor");
  if (loss.numel() != 1) {
    throw AutogradError(fmt::format("backward() needs a scalar loss, got shape {}", shape_string(loss.shape())));
  }
  if (!loss.requires_grad()) throw AutogradError("loss does not require grad");
  auto tape = Tape::collect(loss);
  tape.run(loss, Tensor::ones(loss.shape(), loss.dtype()));
}

}  // namespace emocast
