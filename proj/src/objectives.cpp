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

#include "metavib/objectives.hpp"

#include "metavib/errors.hpp"
#include "metavib/ops.hpp"

namespace metavib {
namespace {

enum class LatentMode { kSampled, kMean };
enum class KlPrior { kNone, kClassPrior, kStandard };

void check_episode(const Episode& ep, const ModelParams& params) {
  if (ep.class_count != params.spec.num_classes) {
    throw ProtocolError("episode has " + std::to_string(ep.class_count) + " classes, model expects " +
                        std::to_string(params.spec.num_classes));
  }
  if (ep.meta_test.size() == 0) throw ProtocolError("episode has no meta-test samples");
  if (ep.meta_train.size() == 0) throw ProtocolError("episode has no meta-train samples");
  std::vector<bool> present(ep.class_count, false);
  for (std::size_t y : ep.meta_train.labels) {
    if (y >= ep.class_count) throw ProtocolError("meta-train label out of range");
    present[y] = true;
  }
  for (std::size_t y : ep.meta_test.labels) {
    if (y >= ep.class_count) throw ProtocolError("meta-test label out of range");
    if (!present[y]) throw ProtocolError("class " + std::to_string(y) + " missing from meta-train batch");
  }
}

// Shared body of the three probabilistic objectives.
LossBreakdown probabilistic_loss(const ModelParams& params, const Episode& ep, double beta, int samples_z,
                                 int samples_psi, LatentMode latent, KlPrior prior, KlDirection direction,
                                 Rng& rng) {
  check_episode(ep, params);
  if (samples_psi < 1 || samples_z < 1) throw ParameterError("sample counts must be at least 1");
  const std::size_t n = ep.meta_test.size();
  const std::span<const std::size_t> labels = ep.meta_test.labels;

  const Tensor train_features = feature_extract(params, ep.meta_train.images);
  const Tensor pooled = class_pool(train_features, ep.meta_train.labels, ep.class_count);
  const DiagGaussian psi_dist = infer_classifier_dist(params, pooled);
  const DiagGaussian posterior = infer_latent_dist(params, feature_extract(params, ep.meta_test.images));

  const int z_draws = latent == LatentMode::kSampled ? samples_z : 1;
  Tensor log_lik = Tensor::scalar(0.0);
  for (int lp = 0; lp < samples_psi; ++lp) {
    const Tensor psi_t = ops::transpose(sample(psi_dist, rng));  // [F x C]
    for (int lz = 0; lz < z_draws; ++lz) {
      const Tensor z = latent == LatentMode::kSampled ? sample(posterior, rng) : posterior.mu();
      const Tensor logits = ops::matmul(z, psi_t);
      log_lik = ops::add(log_lik, ops::sum(ops::sub(ops::pick(logits, labels), ops::logsumexp(logits))));
    }
  }
  const Tensor ce = ops::scale(log_lik, -1.0 / (static_cast<double>(n) * z_draws * samples_psi));

  Tensor kl = Tensor::scalar(0.0);
  if (prior == KlPrior::kClassPrior) {
    const DiagGaussian class_prior = infer_latent_dist(params, pooled);
    const DiagGaussian matched(ops::gather_rows(class_prior.mu(), labels),
                               ops::gather_rows(class_prior.log_var(), labels));
    kl = ops::mean(direction == KlDirection::kForward ? kl_divergence_rows(posterior, matched)
                                                      : kl_divergence_rows(matched, posterior));
  } else if (prior == KlPrior::kStandard) {
    const DiagGaussian standard = DiagGaussian::standard(posterior.dim());
    kl = ops::mean(direction == KlDirection::kForward ? kl_divergence_rows(posterior, standard)
                                                      : kl_divergence_rows(standard, posterior));
  }

  LossBreakdown out;
  out.total_node = ops::add(ce, ops::scale(kl, beta));
  out.total = out.total_node.item();
  out.cross_entropy = ce.item();
  out.kl = kl.item();
  out.beta = beta;
  out.samples_z = z_draws;
  out.samples_psi = samples_psi;
  return out;
}

}  // namespace

void ObjectiveOptions::validate() const {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  if (samples_z < 1) throw ParameterError("samples_z must be at least 1");
  if (samples_psi < 1) throw ParameterError("samples_psi must be at least 1");
}

LossBreakdown metavib_loss(const ModelParams& params, const Episode& episode, const ObjectiveOptions& options,
                           Rng& rng) {
  options.validate();
  return probabilistic_loss(params, episode, options.beta, options.samples_z, options.samples_psi,
                            LatentMode::kSampled, KlPrior::kClassPrior, options.kl_direction, rng);
}

LossBreakdown vib_loss(const ModelParams& params, const Episode& episode, const ObjectiveOptions& options, Rng& rng) {
  options.validate();
  return probabilistic_loss(params, episode, options.beta, options.samples_z, options.samples_psi,
                            LatentMode::kSampled, KlPrior::kStandard, options.kl_direction, rng);
}

LossBreakdown baseline_loss(const ModelParams& params, const Episode& episode, int samples_psi, Rng& rng) {
  return probabilistic_loss(params, episode, 0.0, 1, samples_psi, LatentMode::kMean, KlPrior::kNone,
                            KlDirection::kForward, rng);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size() || labels.empty()) {
    throw DimensionError("softmax_cross_entropy: logits " + shape_to_string(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  return ops::neg(ops::mean(ops::sub(ops::pick(logits, labels), ops::logsumexp(logits))));
}

LossBreakdown erm_loss(const ModelParams& params, const LabeledImages& batch) {
  if (!params.dense_head) throw ParameterError("erm_loss needs a model with a dense head");
  const DiagGaussian latent = infer_latent_dist(params, feature_extract(params, batch.images));
  const Tensor logits = ops::matmul(latent.mu(), *params.dense_head);
  LossBreakdown out;
  out.total_node = softmax_cross_entropy(logits, batch.labels);
  out.total = out.total_node.item();
  out.cross_entropy = out.total;
  return out;
}

}  // namespace metavib
