// Copyright 2026 The EmoCast Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace emocast {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Shape = std::vector<std::int64_t>;

const char* dtype_name(DType dtype);
std::string shape_string(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

/// Raised when operand shapes are incompatible. The message names every shape involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid argument values (bad axis, non-binary mask, dtype mix).
class ValueError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by backward() when the graph cannot be differentiated as requested.
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

namespace detail {
struct TensorImpl;
struct Node;
using Buffer = std::variant<std::vector<float>, std::vector<double>>;
}  // namespace detail

/// Dense row-major tensor handle. Copies share the same buffer and graph node;
/// use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f64);
  static Tensor ones(Shape shape, DType dtype = DType::f64);
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);
  /// Converts `values` into `dtype`. Throws ShapeError if the count does not match.
  static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::f64);
  static Tensor from(Shape shape, std::initializer_list<double> values, DType dtype = DType::f64);
  static Tensor from_buffer(Shape shape, std::vector<float> values);
  static Tensor from_buffer(Shape shape, std::vector<double> values);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  /// Dimension `axis`; negative values count from the back.
  std::int64_t dim(int axis) const;
  std::int64_t numel() const;
  DType dtype() const;

  template <typename T>
  std::span<const T> data() const;
  /// Writable view of the buffer. Only legal on tensors without a graph node.
  template <typename T>
  std::span<T> mutable_data();

  std::vector<double> to_vector() const;
  double item() const;
  /// Element at a full multi-index, converted to double.
  double at(std::initializer_list<std::int64_t> index) const;

  Tensor& set_requires_grad(bool flag);
  /// True for leaves flagged requires_grad and for every result recorded on the tape.
  bool requires_grad() const;
  bool is_leaf() const;
  /// Accumulated gradient of a leaf; zeros when nothing has flowed into it.
  Tensor grad() const;
  bool has_grad() const;
  void zero_grad();

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  DType dtype = DType::f64;
  std::shared_ptr<Buffer> buffer;
  bool requires_grad = false;
  Tensor grad;
  std::shared_ptr<Node> node;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

struct Node {
  std::uint64_t sequence = 0;
  const char* op = "";
  std::vector<Tensor> inputs;
  BackwardFn backward;
  Tensor grad;
};

Tensor make_tensor(Shape shape, DType dtype);
bool grad_enabled();
/// Records `op` on the tape for `output` if grad mode is on and an input needs grad.
void record(Tensor& output, const char* op, std::vector<Tensor> inputs, BackwardFn backward);

template <typename F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  switch (dtype) {
    case DType::f32:
      return fn.template operator()<float>();
    case DType::f64:
      return fn.template operator()<double>();
  }
  throw ValueError("unknown dtype");
}

}  // namespace detail

/// Disables tape recording for the lifetime of the guard (inference, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// The ordered set of recorded operations reachable from a loss, latest first.
class Tape {
 public:
  static Tape collect(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<std::shared_ptr<detail::Node>>& nodes() const { return nodes_; }
  /// Names of the recorded operations in execution (reverse recording) order.
  std::vector<std::string> op_names() const;
  /// Runs the backward pass seeded with `seed`. Each node is visited exactly once and
  /// released afterwards, so a tape can be run only one time.
  void run(const Tensor& root, const Tensor& seed);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Populates .grad() on every requires_grad leaf reachable from the scalar `loss`.
void backward(const Tensor& loss);

}  // namespace emocast
