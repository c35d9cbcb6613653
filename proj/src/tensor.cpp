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

#include "metavib/tensor.hpp"

#include <algorithm>
#include <cstdlib>
#include <mutex>
#include <new>
#include <sstream>

#include "metavib/errors.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

// Eigen chooses vectorized code paths from the runtime alignment of each
// buffer, which changes the order of floating-point sums. Aligning every
// buffer keeps results independent of heap history.
namespace {

constexpr std::size_t kBufferAlignment = 64;

void* allocate(std::size_t n) {
  void* p = n >= 32 ? std::aligned_alloc(kBufferAlignment, (n + kBufferAlignment - 1) & ~(kBufferAlignment - 1))
                    : std::malloc(n == 0 ? 1 : n);
  if (p == nullptr) throw std::bad_alloc();
  return p;
}

}  // namespace

void* operator new(std::size_t n) { return allocate(n); }
void* operator new[](std::size_t n) { return allocate(n); }
void* operator new(std::size_t n, const std::nothrow_t&) noexcept {
  try {
    return allocate(n);
  } catch (...) {
    return nullptr;
  }
}
void* operator new[](std::size_t n, const std::nothrow_t& tag) noexcept { return operator new(n, tag); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }

namespace metavib {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void tune_allocator() {
  static std::once_flag once;
  std::call_once(once, [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 512 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 64 << 20);
#endif
  });
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != data.size()) {
    throw DimensionError("tensor shape " + shape_to_string(shape_) + " holds " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(data.size()));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ParameterError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on tensor of shape " + shape_to_string(shape_));
  }
  return (*data_)[0];
}

std::optional<int> Tensor::node_id() const {
  if (tape_ == nullptr) return std::nullopt;
  return node_;
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

Tensor Tensor::with_shape(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot view " + shape_to_string(shape_) + " as " + shape_to_string(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

Tensor Tape::variable(const Tensor& value) {
  return record(value.detached(), {}, nullptr);
}

Tensor Tape::record(Tensor value, std::vector<int> parents, BackwardFn backward) {
  const int id = static_cast<int>(nodes_.size());
  for (int p : parents) {
    if (p >= id) throw ContractError("tape parent must precede its child");
  }
  nodes_.push_back({value.shape(), std::move(parents), std::move(backward)});
  value.tape_ = this;
  value.node_ = id;
  return value;
}

std::vector<double>& Tape::accumulator(int node) {
  auto& g = grads_.at(static_cast<std::size_t>(node));
  if (g.empty()) g.assign(shape_numel(nodes_[node].shape), 0.0);
  return g;
}

void Tape::backward(const Tensor& root) {
  if (root.tape_ != this) throw ContractError("backward root is not recorded on this tape");
  if (root.numel() != 1) {
    throw ContractError("backward root must be scalar, got shape " + shape_to_string(root.shape()));
  }
  grads_.assign(nodes_.size(), {});
  accumulator(root.node_)[0] = 1.0;
  for (int id = root.node_; id >= 0; --id) {
    if (grads_[id].empty() || !nodes_[id].backward) continue;
    // The callback may only touch accumulators of strictly earlier nodes, so
    // the reference stays valid.
    nodes_[id].backward(grads_[id], *this);
  }
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape_ != this) return Tensor::zeros(t.shape());
  const std::size_t id = static_cast<std::size_t>(t.node_);
  if (id >= grads_.size() || grads_[id].empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), grads_[id]);
}

}  // namespace metavib
