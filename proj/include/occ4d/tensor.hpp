// Copyright 2026 The occ4d Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense float64 tensors and a reverse-mode tape.
//
// A Tensor is a shared handle: copies alias the same storage, the same way
// parameters are shared between an optimizer and the graph that reads them.
// Operations record themselves on the thread's active Tape (see TapeScope)
// when at least one input requires a gradient. With no active tape the same
// forward code runs and nothing is recorded.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "occ4d/errors.hpp"

namespace occ4d {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : impl_(std::make_shared<Impl>()) {
    detail::require(shape_numel(shape) == data.size(),
                    "tensor: shape " + shape_string(shape) + " does not match " +
                        std::to_string(data.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  bool defined() const noexcept { return impl_ != nullptr; }
  const void* id() const noexcept { return impl_.get(); }

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  /// Writable view. Only for leaves (parameters, inputs) between forward passes.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const {
    detail::require(numel() == 1, "item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return impl_ && !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  /// Gradient buffer, allocated (zeroed) on first use.
  std::span<double> grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }
  void clear_grad() { impl_->grad.clear(); }

  /// Deep copy of shape and data; the copy does not require grad.
  Tensor clone() const { return Tensor(impl_->shape, impl_->data); }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Adjoint buffers for one backward sweep, keyed by tensor identity.
class Adjoints {
 public:
  /// True when `t` should receive a gradient.
  static bool wants(const Tensor& t) { return t.requires_grad(); }

  /// Accumulation target for `t`, zero-initialized on first access.
  std::span<double> of(const Tensor& t) {
    auto [it, inserted] = buffers_.try_emplace(t.id());
    if (inserted) {
      it->second.tensor = t;
      it->second.values.assign(t.numel(), 0.0);
    }
    return it->second.values;
  }

  const std::vector<double>* find(const Tensor& t) const {
    auto it = buffers_.find(t.id());
    return it == buffers_.end() ? nullptr : &it->second.values;
  }

  /// Adds every buffer into its tensor's persistent grad.
  void flush() {
    for (auto& [key, entry] : buffers_) {
      auto grad = entry.tensor.grad_buffer();
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += entry.values[i];
    }
  }

 private:
  struct Entry {
    Tensor tensor;
    std::vector<double> values;
  };
  std::unordered_map<const void*, Entry> buffers_;
};

/// Ordered log of differentiable operations.
class Tape {
 public:
  /// Receives d(loss)/d(output) and accumulates into the inputs' adjoints.
  using BackwardFn = std::function<void(std::span<const double> out_grad, Adjoints& adj)>;

  void record(Tensor output, BackwardFn fn) {
    records_.push_back(Record{std::move(output), std::move(fn)});
  }

  std::size_t size() const noexcept { return records_.size(); }
  void clear() { records_.clear(); }

  /// Reverse sweep from a one-element tensor. Gradients are added to the
  /// existing grad buffers, so repeated calls accumulate.
  void backward(const Tensor& scalar) const {
    detail::require(scalar.defined() && scalar.numel() == 1,
                    "backward: expected a scalar, got shape " +
                        (scalar.defined() ? shape_string(scalar.shape()) : std::string("<undefined>")));
    Adjoints adj;
    if (scalar.requires_grad()) adj.of(scalar)[0] = 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      const std::vector<double>* out_grad = adj.find(it->output);
      if (out_grad == nullptr) continue;
      // Buffers are map nodes, so this view survives insertions by the rule.
      it->fn(*out_grad, adj);
    }
    adj.flush();
  }

 private:
  struct Record {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

/// Makes `tape` the recording target for this thread until destruction.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for this thread until destruction.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {

/// Records `fn` for `output` when a tape is active and any input needs grads.
template <typename Fn>
void record_op(std::initializer_list<const Tensor*> inputs, Tensor& output, Fn&& fn) {
  Tape* tape = active_tape();
  if (tape == nullptr) return;
  bool needed = false;
  for (const Tensor* in : inputs) needed = needed || in->requires_grad();
  if (!needed) return;
  output.set_requires_grad(true);
  tape->record(output, std::forward<Fn>(fn));
}

inline void record_op_dynamic(const std::vector<Tensor>& inputs, Tensor& output, Tape::BackwardFn fn) {
  Tape* tape = active_tape();
  if (tape == nullptr) return;
  bool needed = false;
  for (const Tensor& in : inputs) needed = needed || in.requires_grad();
  if (!needed) return;
  output.set_requires_grad(true);
  tape->record(output, std::move(fn));
}

}  // namespace detail

/// Runs backward on the thread's active tape.
inline void backward(const Tensor& scalar) {
  Tape* tape = active_tape();
  detail::require(tape != nullptr, "backward: no active tape");
  tape->backward(scalar);
}

}  // namespace occ4d
