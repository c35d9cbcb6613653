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

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "metavib/data.hpp"
#include "metavib/networks.hpp"
#include "metavib/trainer.hpp"

namespace metavib {

struct PredictionRecord {
  std::size_t sample_id = 0;
  std::size_t true_label = 0;
  std::vector<double> mean_probs;
  /// One row per exported classifier draw, each averaged over the z draws.
  std::vector<std::vector<double>> per_classifier_probs;
  /// psi = mu_psi, z = mu.
  std::vector<double> mean_classifier_probs;
  std::size_t predicted = 0;
};

struct PredictOptions {
  int samples_z = 10;
  int samples_psi = 1;
  int repeats = 20;
  std::uint64_t seed = 1;
  /// false uses z = posterior mean (baseline-style prediction).
  bool sample_latent = true;
  std::size_t export_draws = 5;
};

/// Options matching how `objective` was trained.
PredictOptions predict_options_for(Objective objective, const TrainConfig& config);

/// Per-class mean features over every sample of `sources`, [C x feature_dim].
Tensor pooled_class_features(const ModelParams& params, std::span<const Domain> sources);

/// Monte-Carlo prediction. The z noise of each record is keyed by its
/// sample id, so results do not depend on the order of `test`.
/// Throws EvaluationError on non-finite parameters.
std::vector<PredictionRecord> predict(const ModelParams& params, std::span<const Domain> sources,
                                      const LabeledImages& test, const PredictOptions& options,
                                      std::span<const std::size_t> sample_ids = {});

/// Macro accuracy in percent. Classes without samples are skipped with a warning.
double macro_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                      std::size_t num_classes);
double micro_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);
double accuracy(std::span<const PredictionRecord> records, std::size_t num_classes);

/// `sample_id,true_label,classifier_id,prob_0..` with classifier ids psi_1..,
/// psi_mu and mean.
void write_uncertainty_csv(std::ostream& os, std::span<const PredictionRecord> records);

// Ablation and sweeps --------------------------------------------------------

struct ExperimentOptions {
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::string> targets;
  double validation_fraction = 0.1;
  int repeats = 20;
  /// Concurrent training runs.
  int jobs = 1;
  /// Per-run checkpoint directories go below this when set.
  std::string run_root;
  /// Called after each finished run with a short description.
  std::function<void(const std::string&)> progress;
};

struct AblationRow {
  std::string objective;
  std::string domain;  // target id or "mean"
  double acc_mean = 0.0;
  double acc_std = 0.0;
  std::size_t seeds = 0;
};

std::vector<AblationRow> run_ablation(std::span<const Domain> domains, std::span<const Objective> objectives,
                                      const ExperimentOptions& options);
void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows);

enum class SweepAxis { kBeta, kLz };
std::string sweep_axis_name(SweepAxis axis);
SweepAxis parse_sweep_axis(const std::string& name);

struct SweepRow {
  std::string axis;
  double value = 0.0;
  std::string domain;
  double acc_mean = 0.0;
  double acc_std = 0.0;
};

/// Needs at least two values.
std::vector<SweepRow> run_sweep(std::span<const Domain> domains, SweepAxis axis, std::span<const double> values,
                                const ExperimentOptions& options);
void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows);

/// Held-out accuracy of one trained run on the split's target.
double target_accuracy(const TrainResult& result, const TrainConfig& config, int repeats);

// Information plane ----------------------------------------------------------

/// Plug-in mutual information (nats) between two discrete codings.
double plugin_mutual_information(std::span<const std::size_t> a, std::span<const std::size_t> b);
/// Equal-width bin indices over the observed range. A constant input maps to bin 0.
std::vector<std::size_t> equal_width_bins(std::span<const double> values, std::size_t bins);

struct InfoPlaneOptions {
  std::size_t bins = 30;
  /// Latent draws per probe sample for the sampled layer.
  int z_draws = 10;
  std::uint64_t seed = 1;
};

struct InfoPlanePoint {
  int iter = 0;
  int layer = 0;  // 1, 2: hidden layers of the latent network; 3: sampled z
  double i_xt = 0.0;
  double i_ty = 0.0;
};

/// Up to `count` samples of `domain` in an order shuffled by derive(seed, 13).
LabeledImages info_plane_probe(const Domain& domain, std::size_t count, std::uint64_t seed);

/// Per-unit binned estimates of I(X;T) and I(T;Y), averaged over units.
/// X is the probe sample identity.
std::vector<InfoPlanePoint> info_plane_layers(const ModelParams& params, const LabeledImages& probe,
                                              const InfoPlaneOptions& options, int iter = 0);
/// Needs at least two checkpoints.
std::vector<InfoPlanePoint> info_plane(std::span<const std::pair<int, ModelParams>> history,
                                       const LabeledImages& probe, const InfoPlaneOptions& options);
/// Estimates for explicit activations [rows x units]; `sample_ids` and
/// `labels` have one entry per row.
std::pair<double, double> layer_information(const Tensor& activations, std::span<const std::size_t> sample_ids,
                                            std::span<const std::size_t> labels, std::size_t bins);
void write_infoplane_csv(std::ostream& os, std::span<const InfoPlanePoint> points);

/// `domain,label,feat_0..` rows of the latent mean for every sample.
void export_embeddings(std::ostream& os, const ModelParams& params, std::span<const Domain> domains);

}  // namespace metavib
