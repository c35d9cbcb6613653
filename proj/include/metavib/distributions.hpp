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

#include <vector>

#include "metavib/rng.hpp"
#include "metavib/tensor.hpp"

namespace metavib {

inline constexpr double kMinLogVar = -10.0;
inline constexpr double kMaxLogVar = 10.0;

/// Factorized normal. The last axis is the event dimension; leading axes
/// index independent distributions sharing one parameter tensor, so one
/// object can hold the per-class or per-sample Gaussians of a whole batch.
class DiagGaussian {
 public:
  /// log_var is clamped to [kMinLogVar, kMaxLogVar] on the tape.
  DiagGaussian(Tensor mu, Tensor log_var);

  /// N(0, I) of dimension d.
  static DiagGaussian standard(std::size_t d);

  const Tensor& mu() const { return mu_; }
  const Tensor& log_var() const { return log_var_; }
  std::size_t dim() const { return mu_.shape().back(); }
  /// Number of distributions held along the leading axes.
  std::size_t count() const { return mu_.numel() / dim(); }

 private:
  Tensor mu_;
  Tensor log_var_;
};

/// Standard-normal constant of the given shape, drawn in row-major order.
Tensor standard_normal(const Shape& shape, Rng& rng);

/// One reparameterized draw mu + exp(log_var / 2) * eps, same shape as mu.
Tensor sample(const DiagGaussian& dist, Rng& rng);
std::vector<Tensor> sample(const DiagGaussian& dist, Rng& rng, int count);

/// Closed-form KL(p || q) per distribution along the leading axes. q may
/// broadcast against p by the trailing-dimension rule.
Tensor kl_divergence_rows(const DiagGaussian& p, const DiagGaussian& q);
/// Sum of kl_divergence_rows.
Tensor kl_divergence(const DiagGaussian& p, const DiagGaussian& q);

}  // namespace metavib
