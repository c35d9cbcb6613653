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
#include <span>

#include "metavib/tensor.hpp"

// Differentiable primitives. Each op records itself on the tape of its
// recorded operands; with only constant operands it computes the value and
// returns a constant.
namespace metavib::ops {

enum class Padding { kSame, kValid };

// Linear algebra (2-D operands).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// NHWC cross-correlation with an HWIO kernel. SAME pads zeros so the output
/// extent is ceil(input / stride); VALID uses floor((input - k) / stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, Padding padding);
/// conv2d plus a per-output-channel bias [Cout], in one pass.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, Padding padding);

/// NHWC windowed maximum. Gradient flows to the first maximal element of each
/// window in row-major order.
Tensor maxpool2d(const Tensor& x, int window_h, int window_w, int stride, Padding padding);

// Pointwise.
Tensor relu(const Tensor& x);
Tensor elu(const Tensor& x);  // alpha = 1
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // throws DomainError for x <= 0
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
/// Identity inside [lo, hi]; saturated elements receive zero gradient.
Tensor clamp(const Tensor& x, double lo, double hi);

// Binary pointwise. Shapes must match, or one operand must be a single value
// or match the trailing dimensions of the other.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Reductions.
/// Max-shifted log-sum-exp over the last axis.
Tensor logsumexp(const Tensor& logits);
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::size_t axis);

// Structural.
Tensor reshape(const Tensor& x, Shape shape);
/// Columns [begin, end) of the last axis.
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
/// Rows of a 2-D tensor, in the given order (repeats allowed).
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows);
/// out[i] = x[i, columns[i]] for a 2-D x.
Tensor pick(const Tensor& x, std::span<const std::size_t> columns);

/// Row-wise softmax over the last axis. Not recorded.
Tensor softmax(const Tensor& logits);

}  // namespace metavib::ops
