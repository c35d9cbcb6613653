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

#include "metavib/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "metavib/errors.hpp"
#include "metavib/evaluation.hpp"
#include "metavib/format.hpp"
#include "metavib/ops.hpp"

namespace metavib {
namespace {

constexpr std::uint64_t kSplitStream = 1;
constexpr std::uint64_t kInitStream = 2;
constexpr std::uint64_t kTrainStream = 3;

std::string snapshot_name(int iter) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "params_%06d.mvib", iter);
  return buf;
}

}  // namespace

std::string objective_name(Objective o) {
  switch (o) {
    case Objective::kErm:
      return "erm";
    case Objective::kBaseline:
      return "baseline";
    case Objective::kVib:
      return "vib";
    case Objective::kMetaVib:
      return "metavib";
  }
  return "?";
}

Objective parse_objective(const std::string& name) {
  if (name == "erm") return Objective::kErm;
  if (name == "baseline") return Objective::kBaseline;
  if (name == "vib") return Objective::kVib;
  if (name == "metavib") return Objective::kMetaVib;
  throw ParameterError("unknown objective '" + name + "' (expected erm|baseline|vib|metavib)");
}

std::string kl_direction_name(KlDirection d) { return d == KlDirection::kForward ? "forward" : "reverse"; }

KlDirection parse_kl_direction(const std::string& name) {
  if (name == "forward") return KlDirection::kForward;
  if (name == "reverse") return KlDirection::kReverse;
  throw ParameterError("unknown kl_direction '" + name + "' (expected forward|reverse)");
}

TrainConfig TrainConfig::paper_defaults() { return TrainConfig{}; }

TrainConfig TrainConfig::desk_defaults() {
  TrainConfig c;
  c.iterations = 2000;
  c.batch_per_domain = 32;
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
  if (iterations < 1) throw ParameterError("iterations must be at least 1");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  if (samples_z < 1 || samples_psi < 1) throw ParameterError("sample counts must be at least 1");
  if (batch_per_domain < 1) throw ParameterError("batch_per_domain must be positive");
  if (eval_every < 1) throw ParameterError("eval_every must be at least 1");
  if (snapshot_every < 0) throw ParameterError("snapshot_every must be non-negative");
}

ObjectiveOptions TrainConfig::objective_options() const {
  return {beta, samples_z, samples_psi, kl_direction};
}

AdamState AdamState::for_params(const ModelParams& params) {
  AdamState s;
  for (const auto& [name, t] : params.entries()) {
    s.first_moment.emplace_back(t->numel(), 0.0);
    s.second_moment.emplace_back(t->numel(), 0.0);
  }
  return s;
}

void adam_step(ModelParams& params, std::span<const Tensor> grads, AdamState& state, double learning_rate,
               int iteration) {
  auto entries = params.entries();
  if (grads.size() != entries.size() || state.first_moment.size() != entries.size()) {
    throw ContractError("adam_step: gradient/state count does not match parameters");
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (grads[i].shape() != entries[i].second->shape()) {
      throw DimensionError("adam_step: gradient shape mismatch for " + entries[i].first);
    }
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) {
        throw TrainingError("non-finite gradient in " + entries[i].first + " at iteration " +
                            std::to_string(iteration));
      }
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor& w = *entries[i].second;
    auto g = grads[i].data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    std::vector<double> updated(w.data().begin(), w.data().end());
    for (std::size_t j = 0; j < updated.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double m_hat = m[j] / c1;
      const double v_hat = v[j] / c2;
      updated[j] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.epsilon);
    }
    w = Tensor(w.shape(), std::move(updated));
  }
}

void write_metrics_csv(std::ostream& os, std::span<const MetricsRow> rows) {
  os << "iter,total,ce,kl,val_acc\n";
  for (const auto& r : rows) {
    os << r.iter << ',' << format_double(r.total) << ',' << format_double(r.cross_entropy) << ','
       << format_double(r.kl) << ',';
    if (r.val_acc) os << format_double(*r.val_acc);
    os << '\n';
  }
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  std::ostringstream os;
  write_metrics_csv(os, rows);
  write_text_file(path, os.str());
}

double deterministic_accuracy(const ModelParams& params, std::span<const Domain> sources, const LabeledImages& eval) {
  const std::size_t num_classes = params.spec.num_classes;
  const ModelParams p = params.detached();
  const Tensor latent = infer_latent_dist(p, feature_extract_batched(p, eval.images)).mu();
  Tensor logits;
  if (p.dense_head) {
    logits = ops::matmul(latent, *p.dense_head);
  } else {
    const Tensor class_means = pooled_class_features(p, sources);
    logits = ops::matmul(latent, ops::transpose(infer_classifier_dist(p, class_means).mu()));
  }
  std::vector<std::size_t> predicted(eval.size());
  for (std::size_t i = 0; i < eval.size(); ++i) {
    auto row = logits.data().subspan(i * num_classes, num_classes);
    predicted[i] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return macro_accuracy(predicted, eval.labels, num_classes);
}

Trainer::Trainer(TrainConfig config, std::span<const Domain> domains, const SplitPlan& split)
    : config_(std::move(config)), rng_(Rng::derive(config_.seed, kTrainStream)) {
  tune_allocator();
  config_.validate();
  if (domains.empty()) throw DataError("no domains supplied");
  if (split.source_domains.size() < 2) throw ProtocolError("training needs at least two source domains");
  Rng split_rng(Rng::derive(config_.seed, kSplitStream));
  data_ = apply_split(domains, split, split_rng);

  NetworkSpec spec = config_.network;
  const Tensor& images = domains[0].data.images;
  spec.image_size = images.dim(1);
  spec.image_channels = images.dim(3);
  spec.num_classes = domains[0].num_classes;
  spec.dense_head = config_.objective == Objective::kErm;
  config_.network = spec;
  Rng init_rng(Rng::derive(config_.seed, kInitStream));
  params_ = init_params(spec, init_rng);
  best_params_ = params_;
  adam_ = AdamState::for_params(params_);
}

LossBreakdown Trainer::compute_loss(const ModelParams& bound, const Episode& episode) {
  switch (config_.objective) {
    case Objective::kErm: {
      const LabeledImages parts[] = {episode.meta_train, episode.meta_test};
      return erm_loss(bound, LabeledImages::concat(parts));
    }
    case Objective::kBaseline:
      return baseline_loss(bound, episode, config_.samples_psi, rng_);
    case Objective::kVib:
      return vib_loss(bound, episode, config_.objective_options(), rng_);
    case Objective::kMetaVib:
      return metavib_loss(bound, episode, config_.objective_options(), rng_);
  }
  throw ContractError("unhandled objective");
}

void Trainer::step() {
  if (done()) return;
  const std::filesystem::path dir = config_.checkpoint_dir;
  if (iteration_ == 0 && config_.snapshot_every > 0 && !dir.empty()) {
    save_params(dir / snapshot_name(0), params_);
  }
  ++iteration_;
  const Episode episode = sample_episode(data_.train, config_.batch_per_domain, rng_);
  LossBreakdown loss;
  std::vector<Tensor> grads;
  {
    Tape tape;
    const ModelParams bound = params_.bind(tape);
    loss = compute_loss(bound, episode);
    if (!std::isfinite(loss.total)) {
      throw TrainingError("loss diverged (" + format_double(loss.total) + ") at iteration " +
                          std::to_string(iteration_));
    }
    tape.backward(loss.total_node);
    for (const auto& [name, t] : bound.entries()) grads.push_back(tape.grad(*t));
  }
  adam_step(params_, grads, adam_, config_.learning_rate, iteration_);
  metrics_.push_back({iteration_, loss.total, loss.cross_entropy, loss.kl, std::nullopt});

  if (iteration_ % config_.eval_every == 0 || iteration_ == config_.iterations) evaluate();
  if (config_.snapshot_every > 0 && !dir.empty() && iteration_ % config_.snapshot_every == 0) {
    save_params(dir / snapshot_name(iteration_), params_);
  }
}

void Trainer::evaluate() {
  const LabeledImages val = [&] {
    std::vector<LabeledImages> parts;
    for (const auto& d : data_.validation) parts.push_back(d.data);
    return LabeledImages::concat(parts);
  }();
  const double acc = deterministic_accuracy(params_, data_.train, val);
  metrics_.back().val_acc = acc;
  const bool improved = acc > best_val_acc_;
  if (improved) {
    best_val_acc_ = acc;
    best_params_ = params_;
  }
  if (!config_.checkpoint_dir.empty()) {
    const std::filesystem::path dir = config_.checkpoint_dir;
    save_checkpoint(dir / "state.mvib");
    if (improved) save_params(dir / "best.mvib", best_params_);
  }
}

void Trainer::run() {
  while (!done()) step();
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::vector<NamedTensor> records = params_to_records(params_, "params.");
  for (auto& r : params_to_records(best_params_, "best.")) records.push_back(std::move(r));
  const auto entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Shape& shape = entries[i].second->shape();
    records.push_back({"adam.m." + entries[i].first, Tensor(shape, adam_.first_moment[i])});
    records.push_back({"adam.v." + entries[i].first, Tensor(shape, adam_.second_moment[i])});
  }
  records.push_back({"adam.step", Tensor::scalar(static_cast<double>(adam_.step))});
  records.push_back({"adam.hyper", Tensor({3}, {adam_.beta1, adam_.beta2, adam_.epsilon})});
  const auto rng_state = rng_.state();
  records.push_back({"rng.state", Tensor({rng_state.size()}, rng_state)});
  records.push_back({"trainer.iteration", Tensor::scalar(iteration_)});
  records.push_back({"trainer.best_val", Tensor::scalar(best_val_acc_)});
  records.push_back({"trainer.objective", Tensor::scalar(static_cast<double>(config_.objective))});
  std::vector<double> log;
  for (const auto& m : metrics_) {
    log.insert(log.end(), {static_cast<double>(m.iter), m.total, m.cross_entropy, m.kl,
                           m.val_acc.value_or(std::numeric_limits<double>::quiet_NaN())});
  }
  records.push_back({"trainer.metrics", Tensor({metrics_.size(), 5}, std::move(log))});
  write_tensor_file(path, records);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  const auto records = read_tensor_file(path);
  if (find_record(records, "trainer.objective").item() != static_cast<double>(config_.objective)) {
    throw FormatError("checkpoint objective does not match the trainer configuration");
  }
  ModelParams params = params_from_records(records, "params.");
  if (!(params.spec == params_.spec)) throw FormatError("checkpoint network does not match the configuration");
  params_ = std::move(params);
  best_params_ = params_from_records(records, "best.");
  AdamState adam = AdamState::for_params(params_);
  const auto entries = params_.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const Tensor& m = find_record(records, "adam.m." + entries[i].first);
    const Tensor& v = find_record(records, "adam.v." + entries[i].first);
    if (m.shape() != entries[i].second->shape() || v.shape() != m.shape()) {
      throw FormatError("Adam moment shape mismatch for " + entries[i].first);
    }
    adam.first_moment[i].assign(m.data().begin(), m.data().end());
    adam.second_moment[i].assign(v.data().begin(), v.data().end());
  }
  adam.step = static_cast<std::int64_t>(find_record(records, "adam.step").item());
  const Tensor& hyper = find_record(records, "adam.hyper");
  if (hyper.numel() != 3) throw FormatError("adam.hyper must hold three values");
  adam.beta1 = hyper.at(0);
  adam.beta2 = hyper.at(1);
  adam.epsilon = hyper.at(2);
  adam_ = std::move(adam);
  rng_.set_state(find_record(records, "rng.state").data());
  iteration_ = static_cast<int>(find_record(records, "trainer.iteration").item());
  best_val_acc_ = find_record(records, "trainer.best_val").item();
  const Tensor& log = find_record(records, "trainer.metrics");
  metrics_.clear();
  for (std::size_t r = 0; r + 1 <= (log.rank() == 2 ? log.dim(0) : 0); ++r) {
    MetricsRow m;
    m.iter = static_cast<int>(log.at(r * 5));
    m.total = log.at(r * 5 + 1);
    m.cross_entropy = log.at(r * 5 + 2);
    m.kl = log.at(r * 5 + 3);
    const double acc = log.at(r * 5 + 4);
    if (!std::isnan(acc)) m.val_acc = acc;
    metrics_.push_back(m);
  }
}

TrainResult train(const TrainConfig& config, std::span<const Domain> domains, const SplitPlan& split) {
  Trainer trainer(config, domains, split);
  trainer.run();
  return {trainer.best_params(), trainer.best_val_acc(), trainer.metrics(), trainer.data()};
}

}  // namespace metavib
