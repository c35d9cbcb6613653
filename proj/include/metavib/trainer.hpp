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
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "metavib/data.hpp"
#include "metavib/networks.hpp"
#include "metavib/objectives.hpp"

namespace metavib {

enum class Objective { kErm, kBaseline, kVib, kMetaVib };

std::string objective_name(Objective o);
Objective parse_objective(const std::string& name);
std::string kl_direction_name(KlDirection d);
KlDirection parse_kl_direction(const std::string& name);

struct TrainConfig {
  Objective objective = Objective::kMetaVib;
  double beta = 0.001;
  int samples_z = 10;
  int samples_psi = 1;
  KlDirection kl_direction = KlDirection::kForward;
  double learning_rate = 1e-4;
  int iterations = 25000;
  std::size_t batch_per_domain = 256;
  std::uint64_t seed = 1;
  int eval_every = 100;
  /// Empty disables checkpoint files.
  std::string checkpoint_dir;
  /// Parameter snapshots every N iterations for information-plane analysis; 0 disables.
  int snapshot_every = 0;
  NetworkSpec network;

  /// Lr 1e-4, 25000 iterations, 256 samples per domain.
  static TrainConfig paper_defaults();
  /// 2000 iterations, 32 samples per domain.
  static TrainConfig desk_defaults();
  void validate() const;
  ObjectiveOptions objective_options() const;
};

/// Adam with bias correction.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;   // per parameter, entries() order
  std::vector<std::vector<double>> second_moment;

  static AdamState for_params(const ModelParams& params);
};

/// One Adam update. `grads` follow params.entries() order. Throws
/// TrainingError naming the tensor when a gradient is not finite.
void adam_step(ModelParams& params, std::span<const Tensor> grads, AdamState& state, double learning_rate,
               int iteration = 0);

struct MetricsRow {
  int iter = 0;
  double total = 0.0;
  double cross_entropy = 0.0;
  double kl = 0.0;
  std::optional<double> val_acc;
};

/// CSV with header `iter,total,ce,kl,val_acc`.
void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);

/// Deterministic accuracy (mean classifier, mean latent) of `eval` given the
/// class priors pooled from `sources`. Percent, macro-averaged over classes.
double deterministic_accuracy(const ModelParams& params, std::span<const Domain> sources, const LabeledImages& eval);

/// Episodic optimization loop with validation-based model selection.
class Trainer {
 public:
  Trainer(TrainConfig config, std::span<const Domain> domains, const SplitPlan& split);

  /// Runs one iteration (plus validation and checkpointing when due).
  void step();
  /// Steps until the configured iteration count.
  void run();
  bool done() const { return iteration_ >= config_.iterations; }
  int iteration() const { return iteration_; }

  const TrainConfig& config() const { return config_; }
  const SplitData& data() const { return data_; }
  const ModelParams& params() const { return params_; }
  const ModelParams& best_params() const { return best_params_; }
  double best_val_acc() const { return best_val_acc_; }
  const std::vector<MetricsRow>& metrics() const { return metrics_; }

  /// Full resumable state: parameters, Adam moments, RNG, best snapshot, log.
  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  LossBreakdown compute_loss(const ModelParams& bound, const Episode& episode);
  void evaluate();

  TrainConfig config_;
  SplitData data_;
  ModelParams params_;
  ModelParams best_params_;
  double best_val_acc_ = -1.0;
  AdamState adam_;
  Rng rng_;
  int iteration_ = 0;
  std::vector<MetricsRow> metrics_;
};

struct TrainResult {
  ModelParams best_params;
  double best_val_acc = 0.0;
  std::vector<MetricsRow> metrics;
  SplitData data;
};

TrainResult train(const TrainConfig& config, std::span<const Domain> domains, const SplitPlan& split);

}  // namespace metavib
