// Copyright 2026 The MetaVIB Authors.
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

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace metavib {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Keeps freed heap memory mapped so per-iteration activations reuse pages
/// instead of faulting fresh ones. Idempotent; glibc only.
void tune_allocator();

class Tape;

/// Dense row-major array of doubles.
///
/// The buffer is immutable and shared between copies, so a Tensor behaves as
/// a value. A Tensor produced by an operation on a recorded input carries a
/// handle to the node on its Tape; constants carry none and never receive a
/// gradient.
class Tensor {
 public:
  /// Scalar zero.
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return data_->size(); }

  std::span<const double> data() const { return *data_; }
  double at(std::size_t flat_index) const { return (*data_)[flat_index]; }
  /// Value of a single-element tensor.
  double item() const;

  bool recorded() const { return tape_ != nullptr; }
  std::optional<int> node_id() const;
  Tape* tape() const { return tape_; }

  /// Same values, detached from any tape.
  Tensor detached() const;
  /// Same buffer viewed under a new shape of equal element count. Not recorded.
  Tensor with_shape(Shape shape) const;

 private:
  friend class Tape;

  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

/// Records primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it. A tape is built fresh for each forward pass and discarded afterwards;
/// tensors recorded on it must not outlive it.
class Tape {
 public:
  /// Propagates the output gradient into parent accumulators.
  using BackwardFn = std::function<void(std::span<const double> grad_out, Tape& tape)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a leaf (trainable input) and returns it with a node handle.
  Tensor variable(const Tensor& value);

  /// Appends an operation node. `parents` may contain -1 for constant inputs.
  Tensor record(Tensor value, std::vector<int> parents, BackwardFn backward);

  /// Computes gradients of a recorded scalar with respect to every node.
  void backward(const Tensor& root);

  /// Gradient of the last backward pass; zeros when `t` was unreachable.
  Tensor grad(const Tensor& t) const;

  /// Mutable accumulator for `node`, allocated as zeros on first use.
  std::vector<double>& accumulator(int node);

  std::size_t size() const { return nodes_.size(); }
  const std::vector<int>& parents(int node) const { return nodes_.at(node).parents; }

 private:
  struct Node {
    Shape shape;
    std::vector<int> parents;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

}  // namespace metavib
