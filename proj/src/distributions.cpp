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

#include "metavib/distributions.hpp"

#include "metavib/errors.hpp"
#include "metavib/ops.hpp"

namespace metavib {

DiagGaussian::DiagGaussian(Tensor mu, Tensor log_var) : mu_(std::move(mu)) {
  if (mu_.shape() != log_var.shape()) {
    throw DimensionError("DiagGaussian: mu " + shape_to_string(mu_.shape()) + " vs log_var " +
                         shape_to_string(log_var.shape()));
  }
  if (mu_.rank() == 0 || mu_.shape().back() == 0) {
    throw DimensionError("DiagGaussian needs dimension >= 1");
  }
  log_var_ = ops::clamp(log_var, kMinLogVar, kMaxLogVar);
}

DiagGaussian DiagGaussian::standard(std::size_t d) {
  return DiagGaussian(Tensor::zeros({d}), Tensor::zeros({d}));
}

Tensor standard_normal(const Shape& shape, Rng& rng) {
  std::vector<double> eps(shape_numel(shape));
  for (double& e : eps) e = rng.normal();
  return Tensor(shape, std::move(eps));
}

Tensor sample(const DiagGaussian& dist, Rng& rng) {
  const Tensor eps = standard_normal(dist.mu().shape(), rng);
  const Tensor sigma = ops::exp(ops::scale(dist.log_var(), 0.5));
  return ops::add(dist.mu(), ops::mul(sigma, eps));
}

std::vector<Tensor> sample(const DiagGaussian& dist, Rng& rng, int count) {
  if (count < 1) throw ParameterError("sample count must be at least 1");
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(count));
  const Tensor sigma = ops::exp(ops::scale(dist.log_var(), 0.5));
  for (int i = 0; i < count; ++i) {
    out.push_back(ops::add(dist.mu(), ops::mul(sigma, standard_normal(dist.mu().shape(), rng))));
  }
  return out;
}

// 0.5 * sum_i [ exp(lv_p - lv_q) + (mu_p - mu_q)^2 exp(-lv_q) - 1 + lv_q - lv_p ]
Tensor kl_divergence_rows(const DiagGaussian& p, const DiagGaussian& q) {
  if (p.dim() != q.dim()) {
    throw ParameterError("kl_divergence: dimension " + std::to_string(p.dim()) + " vs " +
                         std::to_string(q.dim()));
  }
  const Tensor lv_diff = ops::sub(p.log_var(), q.log_var());
  const Tensor dmu = ops::sub(p.mu(), q.mu());
  const Tensor mahalanobis = ops::mul(ops::mul(dmu, dmu), ops::exp(ops::neg(q.log_var())));
  const Tensor terms = ops::sub(ops::add(ops::exp(lv_diff), mahalanobis), ops::add_scalar(lv_diff, 1.0));
  const Tensor per_dim = ops::scale(terms, 0.5);
  return ops::sum(per_dim, per_dim.rank() - 1);
}

Tensor kl_divergence(const DiagGaussian& p, const DiagGaussian& q) {
  return ops::sum(kl_divergence_rows(p, q));
}

}  // namespace metavib
