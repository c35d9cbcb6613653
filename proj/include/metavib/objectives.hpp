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

#include "metavib/data.hpp"
#include "metavib/networks.hpp"
#include "metavib/rng.hpp"

namespace metavib {

/// kForward: KL(p(z|x_n) || q(z|D^s_c)), posterior against the class prior.
/// kReverse: KL(q(z|D^s_c) || p(z|x_n)).
enum class KlDirection { kForward, kReverse };

struct ObjectiveOptions {
  double beta = 0.001;
  int samples_z = 10;
  int samples_psi = 1;
  KlDirection kl_direction = KlDirection::kForward;

  void validate() const;
};

struct LossBreakdown {
  Tensor total_node;  // recorded scalar for backward
  double total = 0.0;
  double cross_entropy = 0.0;
  double kl = 0.0;
  double beta = 0.0;
  int samples_z = 0;
  int samples_psi = 0;
};

/// Monte-Carlo MetaVIB objective on one episode.
///
/// Classifier weights psi_c ~ q(psi | D^s_c) come from the pooled meta-train
/// features of class c; every meta-test sample draws z ~ p(z | x_n). The
/// cross-entropy averages over samples and draws; the KL term pairs each
/// meta-test sample with the latent prior of its own class.
/// Draw order: for each psi draw, all z draws.
LossBreakdown metavib_loss(const ModelParams& params, const Episode& episode, const ObjectiveOptions& options,
                           Rng& rng);

/// Same classifier sampling as metavib_loss, but the KL term uses a fixed
/// N(0, I) prior on z.
LossBreakdown vib_loss(const ModelParams& params, const Episode& episode, const ObjectiveOptions& options, Rng& rng);

/// Sampled classifier, deterministic z = posterior mean, no KL term.
LossBreakdown baseline_loss(const ModelParams& params, const Episode& episode, int samples_psi, Rng& rng);

/// Softmax cross-entropy of the learned head applied to the latent mean.
/// Requires params.dense_head.
LossBreakdown erm_loss(const ModelParams& params, const LabeledImages& batch);

/// Mean negative log-softmax of `logits` [N x C] at `labels`.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

}  // namespace metavib
