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

#include "metavib/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iostream>
#include <mutex>
#include <numeric>
#include <thread>

#include "metavib/errors.hpp"
#include "metavib/format.hpp"
#include "metavib/ops.hpp"

namespace metavib {
namespace {

constexpr std::uint64_t kPsiStream = 11;
constexpr std::uint64_t kLatentStream = 12;
constexpr std::uint64_t kProbeStream = 13;

void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    out[c] = std::exp(logits[c] - m);
    total += out[c];
  }
  for (double& p : out) p /= total;
}

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(xs.size());
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

double entropy_of_counts(std::span<const std::size_t> counts, double n) {
  double h = 0.0;
  for (std::size_t k : counts) {
    if (k == 0) continue;
    const double p = static_cast<double>(k) / n;
    h -= p * std::log(p);
  }
  return h;
}

// Counts of equal runs in a sorted sequence.
template <typename T>
std::vector<std::size_t> run_lengths(std::vector<T> keys) {
  std::sort(keys.begin(), keys.end());
  std::vector<std::size_t> counts;
  for (std::size_t i = 0; i < keys.size();) {
    std::size_t j = i;
    while (j < keys.size() && keys[j] == keys[i]) ++j;
    counts.push_back(j - i);
    i = j;
  }
  return counts;
}

struct RunSpec {
  TrainConfig config;
  std::string target;
};

// Trains and scores every run, `jobs` at a time. Results follow `runs` order.
std::vector<double> run_grid(std::span<const Domain> domains, const std::vector<RunSpec>& runs,
                             const ExperimentOptions& options) {
  std::vector<std::string> ids;
  for (const auto& d : domains) ids.push_back(d.id);
  std::vector<double> acc(runs.size(), 0.0);
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        const SplitPlan plan = make_split(ids, runs[i].target, options.validation_fraction);
        const TrainResult result = train(runs[i].config, domains, plan);
        acc[i] = target_accuracy(result, runs[i].config, options.repeats);
        if (options.progress) {
          std::lock_guard lock(progress_mutex);
          options.progress(objective_name(runs[i].config.objective) + " target=" + runs[i].target +
                           " seed=" + std::to_string(runs[i].config.seed) + " acc=" + format_double(acc[i]));
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(runs.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return acc;
}

std::string run_dir(const ExperimentOptions& options, const std::string& tag) {
  if (options.run_root.empty()) return {};
  const auto dir = std::filesystem::path(options.run_root) / tag;
  std::filesystem::create_directories(dir);
  return dir.string();
}

std::vector<std::string> checked_targets(std::span<const Domain> domains, const ExperimentOptions& options) {
  if (options.seeds.empty()) throw ParameterError("at least one seed is required");
  if (!options.targets.empty()) return options.targets;
  std::vector<std::string> all;
  for (const auto& d : domains) all.push_back(d.id);
  return all;
}

}  // namespace

PredictOptions predict_options_for(Objective objective, const TrainConfig& config) {
  PredictOptions o;
  o.samples_z = config.samples_z;
  o.samples_psi = config.samples_psi;
  o.seed = config.seed;
  o.sample_latent = objective == Objective::kVib || objective == Objective::kMetaVib;
  if (objective == Objective::kErm) o.samples_psi = 1;
  return o;
}

Tensor pooled_class_features(const ModelParams& params, std::span<const Domain> sources) {
  const std::size_t num_classes = params.spec.num_classes;
  const std::size_t f = params.spec.feature_dim;
  std::vector<double> sums(num_classes * f, 0.0);
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& d : sources) {
    if (d.size() == 0) continue;
    const Tensor feats = feature_extract_batched(params, d.data.images);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t y = d.data.labels[i];
      if (y >= num_classes) throw DataError("label out of range in domain " + d.id);
      ++counts[y];
      for (std::size_t k = 0; k < f; ++k) sums[y * f + k] += feats.at(i * f + k);
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0) throw ProtocolError("no source sample of class " + std::to_string(c));
    for (std::size_t k = 0; k < f; ++k) sums[c * f + k] /= static_cast<double>(counts[c]);
  }
  return Tensor({num_classes, f}, std::move(sums));
}

std::vector<PredictionRecord> predict(const ModelParams& params, std::span<const Domain> sources,
                                      const LabeledImages& test, const PredictOptions& options,
                                      std::span<const std::size_t> sample_ids) {
  if (!params.all_finite()) throw EvaluationError("parameters contain non-finite values");
  if (test.size() == 0) throw EvaluationError("empty test set");
  if (options.samples_z < 1 || options.samples_psi < 1 || options.repeats < 1) {
    throw ParameterError("sample counts and repeats must be at least 1");
  }
  if (!sample_ids.empty() && sample_ids.size() != test.size()) {
    throw ParameterError("sample_ids must match the number of test images");
  }
  const ModelParams p = params.detached();
  const std::size_t n = test.size();
  const std::size_t num_classes = p.spec.num_classes;
  const std::size_t f = p.spec.feature_dim;

  const DiagGaussian posterior = infer_latent_dist(p, feature_extract_batched(p, test.images));
  auto z_mu = posterior.mu().data();
  std::vector<double> z_sd(n * f);
  for (std::size_t i = 0; i < z_sd.size(); ++i) z_sd[i] = std::exp(0.5 * posterior.log_var().at(i));

  // Classifier matrices [C x F].
  Tensor psi_mu;
  std::vector<double> psi_sd;
  if (p.dense_head) {
    psi_mu = ops::transpose(*p.dense_head);
    psi_sd.assign(num_classes * f, 0.0);
  } else {
    const DiagGaussian cls = infer_classifier_dist(p, pooled_class_features(p, sources));
    psi_mu = cls.mu();
    psi_sd.resize(num_classes * f);
    for (std::size_t i = 0; i < psi_sd.size(); ++i) psi_sd[i] = std::exp(0.5 * cls.log_var().at(i));
  }
  const int draws = options.repeats * options.samples_psi;
  std::vector<std::vector<double>> psis(static_cast<std::size_t>(draws));
  for (int d = 0; d < draws; ++d) {
    Rng rng(Rng::derive(options.seed, kPsiStream, static_cast<std::uint64_t>(d)));
    auto& w = psis[static_cast<std::size_t>(d)];
    w.resize(num_classes * f);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = psi_mu.at(i) + psi_sd[i] * rng.normal();
  }

  const int z_draws = options.sample_latent ? options.samples_z : 1;
  const std::size_t exported = std::min<std::size_t>(options.export_draws, static_cast<std::size_t>(draws));
  std::vector<PredictionRecord> out(n);
  std::vector<double> z(f), logits(num_classes), probs(num_classes), row(num_classes);
  auto project = [&](std::span<const double> w, std::span<const double> zz) {
    for (std::size_t c = 0; c < num_classes; ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < f; ++k) acc += w[c * f + k] * zz[k];
      logits[c] = acc;
    }
    softmax_into(logits, probs);
  };
  for (std::size_t i = 0; i < n; ++i) {
    PredictionRecord& rec = out[i];
    rec.sample_id = sample_ids.empty() ? i : sample_ids[i];
    rec.true_label = test.labels[i];
    rec.mean_probs.assign(num_classes, 0.0);
    const auto mu_i = z_mu.subspan(i * f, f);
    for (int d = 0; d < draws; ++d) {
      Rng rng(Rng::derive(Rng::derive(options.seed, kLatentStream, static_cast<std::uint64_t>(d)), rec.sample_id));
      std::fill(row.begin(), row.end(), 0.0);
      for (int l = 0; l < z_draws; ++l) {
        for (std::size_t k = 0; k < f; ++k) {
          z[k] = options.sample_latent ? mu_i[k] + z_sd[i * f + k] * rng.normal() : mu_i[k];
        }
        project(psis[static_cast<std::size_t>(d)], z);
        for (std::size_t c = 0; c < num_classes; ++c) row[c] += probs[c] / z_draws;
      }
      for (std::size_t c = 0; c < num_classes; ++c) rec.mean_probs[c] += row[c] / draws;
      if (static_cast<std::size_t>(d) < exported) rec.per_classifier_probs.push_back(row);
    }
    project(psi_mu.data(), mu_i);
    rec.mean_classifier_probs = probs;
    rec.predicted = argmax(rec.mean_probs);
  }
  return out;
}

double macro_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels,
                      std::size_t num_classes) {
  if (predicted.size() != labels.size()) throw ParameterError("prediction and label counts differ");
  if (labels.empty()) throw EvaluationError("accuracy of an empty set");
  std::vector<std::size_t> total(num_classes, 0), hit(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw EvaluationError("label out of range");
    ++total[labels[i]];
    if (predicted[i] == labels[i]) ++hit[labels[i]];
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (total[c] == 0) {
      std::clog << "warning: class " << c << " has no test samples; excluded from accuracy\n";
      continue;
    }
    sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  return 100.0 * sum / static_cast<double>(present);
}

double micro_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw ParameterError("prediction and label counts differ");
  if (labels.empty()) throw EvaluationError("accuracy of an empty set");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
}

double accuracy(std::span<const PredictionRecord> records, std::size_t num_classes) {
  std::vector<std::size_t> predicted, labels;
  for (const auto& r : records) {
    predicted.push_back(r.predicted);
    labels.push_back(r.true_label);
  }
  return macro_accuracy(predicted, labels, num_classes);
}

void write_uncertainty_csv(std::ostream& os, std::span<const PredictionRecord> records) {
  const std::size_t num_classes = records.empty() ? 0 : records.front().mean_probs.size();
  os << "sample_id,true_label,classifier_id";
  for (std::size_t c = 0; c < num_classes; ++c) os << ",prob_" << c;
  os << '\n';
  auto emit = [&](const PredictionRecord& r, const std::string& id, const std::vector<double>& probs) {
    os << r.sample_id << ',' << r.true_label << ',' << id;
    for (double v : probs) os << ',' << format_double(v);
    os << '\n';
  };
  for (const auto& r : records) {
    for (std::size_t d = 0; d < r.per_classifier_probs.size(); ++d) {
      emit(r, "psi_" + std::to_string(d + 1), r.per_classifier_probs[d]);
    }
    emit(r, "psi_mu", r.mean_classifier_probs);
    emit(r, "mean", r.mean_probs);
  }
}

double target_accuracy(const TrainResult& result, const TrainConfig& config, int repeats) {
  std::vector<Domain> sources = result.data.train;
  for (std::size_t i = 0; i < sources.size() && i < result.data.validation.size(); ++i) {
    const LabeledImages parts[] = {sources[i].data, result.data.validation[i].data};
    sources[i].data = LabeledImages::concat(parts);
  }
  PredictOptions options = predict_options_for(config.objective, config);
  options.repeats = repeats;
  const auto records = predict(result.best_params, sources, result.data.target.data, options);
  return accuracy(records, result.best_params.spec.num_classes);
}

std::vector<AblationRow> run_ablation(std::span<const Domain> domains, std::span<const Objective> objectives,
                                      const ExperimentOptions& options) {
  if (objectives.empty()) throw ParameterError("no objectives to compare");
  const auto targets = checked_targets(domains, options);
  std::vector<RunSpec> runs;
  for (Objective o : objectives) {
    for (const auto& t : targets) {
      for (std::uint64_t s : options.seeds) {
        TrainConfig c = options.base;
        c.objective = o;
        c.seed = s;
        c.checkpoint_dir = run_dir(options, objective_name(o) + "_" + t + "_s" + std::to_string(s));
        runs.push_back({c, t});
      }
    }
  }
  const auto acc = run_grid(domains, runs, options);
  const std::size_t ns = options.seeds.size();
  std::vector<AblationRow> rows;
  for (std::size_t oi = 0; oi < objectives.size(); ++oi) {
    std::vector<double> per_seed(ns, 0.0);
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
      const std::size_t base = (oi * targets.size() + ti) * ns;
      const std::span<const double> vals(acc.data() + base, ns);
      const auto [m, s] = mean_std(vals);
      rows.push_back({objective_name(objectives[oi]), targets[ti], m, s, ns});
      for (std::size_t k = 0; k < ns; ++k) per_seed[k] += vals[k] / static_cast<double>(targets.size());
    }
    const auto [m, s] = mean_std(per_seed);
    rows.push_back({objective_name(objectives[oi]), "mean", m, s, ns});
  }
  return rows;
}

void write_ablation_csv(std::ostream& os, std::span<const AblationRow> rows) {
  os << "objective,domain,acc_mean,acc_std,seeds\n";
  for (const auto& r : rows) {
    os << r.objective << ',' << r.domain << ',' << format_double(r.acc_mean) << ',' << format_double(r.acc_std)
       << ',' << r.seeds << '\n';
  }
}

std::string sweep_axis_name(SweepAxis axis) { return axis == SweepAxis::kBeta ? "beta" : "lz"; }

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "beta") return SweepAxis::kBeta;
  if (name == "lz") return SweepAxis::kLz;
  throw ParameterError("unknown sweep axis '" + name + "' (expected beta|lz)");
}

std::vector<SweepRow> run_sweep(std::span<const Domain> domains, SweepAxis axis, std::span<const double> values,
                                const ExperimentOptions& options) {
  if (values.size() < 2) throw ParameterError("a sweep needs at least two values");
  const auto targets = checked_targets(domains, options);
  std::vector<RunSpec> runs;
  for (double v : values) {
    TrainConfig c = options.base;
    if (axis == SweepAxis::kBeta) {
      c.beta = v;
    } else {
      if (v < 1.0 || v != std::floor(v)) throw ParameterError("lz values must be positive integers");
      c.samples_z = static_cast<int>(v);
    }
    c.validate();
    for (const auto& t : targets) {
      for (std::uint64_t s : options.seeds) {
        TrainConfig cs = c;
        cs.seed = s;
        cs.checkpoint_dir =
            run_dir(options, sweep_axis_name(axis) + "_" + format_double(v) + "_" + t + "_s" + std::to_string(s));
        runs.push_back({cs, t});
      }
    }
  }
  const auto acc = run_grid(domains, runs, options);
  const std::size_t ns = options.seeds.size();
  std::vector<SweepRow> rows;
  for (std::size_t vi = 0; vi < values.size(); ++vi) {
    for (std::size_t ti = 0; ti < targets.size(); ++ti) {
      const auto [m, s] = mean_std(std::span<const double>(acc.data() + (vi * targets.size() + ti) * ns, ns));
      rows.push_back({sweep_axis_name(axis), values[vi], targets[ti], m, s});
    }
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, std::span<const SweepRow> rows) {
  os << "axis,value,domain,acc_mean,acc_std\n";
  for (const auto& r : rows) {
    os << r.axis << ',' << format_double(r.value) << ',' << r.domain << ',' << format_double(r.acc_mean) << ','
       << format_double(r.acc_std) << '\n';
  }
}

double plugin_mutual_information(std::span<const std::size_t> a, std::span<const std::size_t> b) {
  if (a.size() != b.size()) throw ParameterError("mutual information needs paired samples");
  if (a.empty()) return 0.0;
  const double n = static_cast<double>(a.size());
  std::vector<std::pair<std::size_t, std::size_t>> joint(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) joint[i] = {a[i], b[i]};
  const double h_a = entropy_of_counts(run_lengths(std::vector<std::size_t>(a.begin(), a.end())), n);
  const double h_b = entropy_of_counts(run_lengths(std::vector<std::size_t>(b.begin(), b.end())), n);
  const double h_ab = entropy_of_counts(run_lengths(std::move(joint)), n);
  return std::max(0.0, h_a + h_b - h_ab);
}

std::vector<std::size_t> equal_width_bins(std::span<const double> values, std::size_t bins) {
  if (bins == 0) throw ParameterError("bin count must be positive");
  std::vector<std::size_t> out(values.size(), 0);
  if (values.empty()) return out;
  const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
  const double lo = *lo_it;
  const double width = *hi_it - lo;
  if (!(width > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double u = (values[i] - lo) / width;
    out[i] = std::min(bins - 1, static_cast<std::size_t>(u * static_cast<double>(bins)));
  }
  return out;
}

std::pair<double, double> layer_information(const Tensor& activations, std::span<const std::size_t> sample_ids,
                                            std::span<const std::size_t> labels, std::size_t bins) {
  if (activations.rank() != 2 || activations.dim(0) != sample_ids.size() || labels.size() != sample_ids.size()) {
    throw DimensionError("layer_information: activations " + shape_to_string(activations.shape()) +
                         " do not match the probe");
  }
  const std::size_t rows = activations.dim(0);
  const std::size_t units = activations.dim(1);
  double i_xt = 0.0, i_ty = 0.0;
  std::size_t varying = 0;
  std::vector<double> column(rows);
  for (std::size_t u = 0; u < units; ++u) {
    for (std::size_t r = 0; r < rows; ++r) column[r] = activations.at(r * units + u);
    const auto [lo, hi] = std::minmax_element(column.begin(), column.end());
    if (!(*hi > *lo)) continue;
    ++varying;
    const auto coded = equal_width_bins(column, bins);
    i_xt += plugin_mutual_information(coded, sample_ids);
    i_ty += plugin_mutual_information(coded, labels);
  }
  if (varying == 0 || units == 0) {
    std::clog << "warning: constant layer activations; information set to 0\n";
    return {0.0, 0.0};
  }
  return {i_xt / static_cast<double>(units), i_ty / static_cast<double>(units)};
}

LabeledImages info_plane_probe(const Domain& domain, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> order(domain.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::derive(seed, 13));
  shuffle(order, rng);
  order.resize(std::min(order.size(), count));
  return domain.data.select(order);
}

std::vector<InfoPlanePoint> info_plane_layers(const ModelParams& params, const LabeledImages& probe,
                                              const InfoPlaneOptions& options, int iter) {
  if (probe.size() == 0) throw EvaluationError("empty probe batch");
  if (options.z_draws < 1) throw ParameterError("z_draws must be at least 1");
  const ModelParams p = params.detached();
  const InferenceTrace trace = run_inference_net(p.phi2, feature_extract_batched(p, probe.images));
  const std::size_t n = probe.size();
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), 0);

  const std::size_t f = trace.dist.dim();
  const std::size_t d = static_cast<std::size_t>(options.z_draws);
  std::vector<double> z(n * d * f);
  std::vector<std::size_t> z_ids(n * d), z_labels(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(Rng::derive(options.seed, kProbeStream, i));
    for (std::size_t k = 0; k < d; ++k) {
      const std::size_t r = i * d + k;
      z_ids[r] = i;
      z_labels[r] = probe.labels[i];
      for (std::size_t u = 0; u < f; ++u) {
        const double sd = std::exp(0.5 * trace.dist.log_var().at(i * f + u));
        z[r * f + u] = trace.dist.mu().at(i * f + u) + sd * rng.normal();
      }
    }
  }
  const Tensor sampled({n * d, f}, std::move(z));

  std::vector<InfoPlanePoint> out;
  const auto [x1, y1] = layer_information(trace.hidden1, ids, probe.labels, options.bins);
  out.push_back({iter, 1, x1, y1});
  const auto [x2, y2] = layer_information(trace.hidden2, ids, probe.labels, options.bins);
  out.push_back({iter, 2, x2, y2});
  const auto [x3, y3] = layer_information(sampled, z_ids, z_labels, options.bins);
  out.push_back({iter, 3, x3, y3});
  return out;
}

std::vector<InfoPlanePoint> info_plane(std::span<const std::pair<int, ModelParams>> history,
                                       const LabeledImages& probe, const InfoPlaneOptions& options) {
  if (history.size() < 2) throw ParameterError("information plane needs at least two checkpoints");
  std::vector<InfoPlanePoint> out;
  for (const auto& [iter, params] : history) {
    for (const auto& pt : info_plane_layers(params, probe, options, iter)) out.push_back(pt);
  }
  return out;
}

void write_infoplane_csv(std::ostream& os, std::span<const InfoPlanePoint> points) {
  os << "iter,layer,I_XT,I_TY\n";
  for (const auto& p : points) {
    os << p.iter << ',' << p.layer << ',' << format_double(p.i_xt) << ',' << format_double(p.i_ty) << '\n';
  }
}

void export_embeddings(std::ostream& os, const ModelParams& params, std::span<const Domain> domains) {
  const ModelParams p = params.detached();
  const std::size_t f = p.spec.feature_dim;
  os << "domain,label";
  for (std::size_t k = 0; k < f; ++k) os << ",feat_" << k;
  os << '\n';
  for (const auto& d : domains) {
    if (d.size() == 0) continue;
    const Tensor mu = infer_latent_dist(p, feature_extract_batched(p, d.data.images)).mu();
    for (std::size_t i = 0; i < d.size(); ++i) {
      os << d.id << ',' << d.data.labels[i];
      for (std::size_t k = 0; k < f; ++k) os << ',' << format_double(mu.at(i * f + k));
      os << '\n';
    }
  }
}

}  // namespace metavib
