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

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "metavib/errors.hpp"
#include "metavib/serialize.hpp"
#include "metavib/trainer.hpp"
#include "toy_domains.hpp"

namespace metavib {
namespace {

namespace fs = std::filesystem;
using testing::toy_config;
using testing::toy_domains;
using testing::toy_split;

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelParams filled_params(double value) {
  NetworkSpec spec;
  spec.image_size = 8;
  spec.conv_channels = 2;
  spec.feature_dim = 4;
  spec.hidden_dim = 4;
  spec.num_classes = 2;
  Rng rng(1);
  ModelParams p = init_params(spec, rng);
  for (auto& [name, t] : p.entries()) *t = Tensor::full(t->shape(), value);
  return p;
}

std::vector<Tensor> grads_like(const ModelParams& p, const std::function<double(double)>& g) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : p.entries()) {
    std::vector<double> v;
    for (double x : t->data()) v.push_back(g(x));
    out.emplace_back(t->shape(), std::move(v));
  }
  return out;
}

TEST(Adam, FirstStepMovesByLearningRate) {
  ModelParams p = filled_params(0.5);
  AdamState s = AdamState::for_params(p);
  adam_step(p, grads_like(p, [](double) { return 3.7; }), s, 0.01);
  EXPECT_EQ(s.step, 1);
  for (const auto& [name, t] : p.entries()) {
    for (double v : t->data()) EXPECT_NEAR(v, 0.5 - 0.01, 1e-8) << name;
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ModelParams p = filled_params(0.25);
  AdamState s = AdamState::for_params(p);
  for (int i = 0; i < 3; ++i) adam_step(p, grads_like(p, [](double) { return 0.0; }), s, 0.1);
  for (const auto& [name, t] : p.entries()) {
    for (double v : t->data()) EXPECT_EQ(v, 0.25);
  }
}

TEST(Adam, MinimizesQuadratic) {
  ModelParams p = filled_params(1.0);
  AdamState s = AdamState::for_params(p);
  for (int i = 0; i < 200; ++i) adam_step(p, grads_like(p, [](double w) { return 2.0 * w; }), s, 0.05);
  for (const auto& [name, t] : p.entries()) {
    for (double v : t->data()) EXPECT_LT(std::abs(v), 0.05);
  }
  EXPECT_EQ(s.beta1, 0.9);
  EXPECT_EQ(s.beta2, 0.999);
  EXPECT_EQ(s.epsilon, 1e-8);
}

TEST(Adam, NonFiniteGradientNamesTensor) {
  ModelParams p = filled_params(1.0);
  AdamState s = AdamState::for_params(p);
  auto grads = grads_like(p, [](double) { return 1.0; });
  std::vector<double> bad(grads[3].numel(), 0.0);
  bad[0] = std::nan("");
  grads[3] = Tensor(grads[3].shape(), bad);
  const std::string name = p.entries()[3].first;
  try {
    adam_step(p, grads, s, 0.01, 42);
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find(name), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("42"), std::string::npos);
  }
  EXPECT_THROW(adam_step(p, std::span<const Tensor>(grads.data(), 2), s, 0.01), Error);
}

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig paper = TrainConfig::paper_defaults();
  EXPECT_EQ(paper.learning_rate, 1e-4);
  EXPECT_EQ(paper.iterations, 25000);
  EXPECT_EQ(paper.batch_per_domain, 256u);
  EXPECT_EQ(paper.eval_every, 100);
  const TrainConfig desk = TrainConfig::desk_defaults();
  EXPECT_EQ(desk.iterations, 2000);
  EXPECT_EQ(desk.batch_per_domain, 32u);
  EXPECT_EQ(parse_objective("metavib"), Objective::kMetaVib);
  EXPECT_EQ(objective_name(Objective::kErm), "erm");
  EXPECT_THROW(parse_objective("maml"), ParameterError);
  EXPECT_EQ(parse_kl_direction("reverse"), KlDirection::kReverse);

  TrainConfig c;
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = TrainConfig{};
  c.iterations = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = TrainConfig{};
  c.beta = 1.01;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(Trainer, MetricsLogShape) {
  const auto domains = toy_domains(10, 1);
  for (Objective o : {Objective::kErm, Objective::kBaseline, Objective::kVib, Objective::kMetaVib}) {
    const TrainResult r = train(toy_config(o, 25), domains, toy_split());
    ASSERT_EQ(r.metrics.size(), 25u);
    for (std::size_t i = 0; i < r.metrics.size(); ++i) {
      const MetricsRow& m = r.metrics[i];
      EXPECT_EQ(m.iter, static_cast<int>(i + 1));
      EXPECT_TRUE(std::isfinite(m.total));
      EXPECT_EQ(m.val_acc.has_value(), m.iter % 10 == 0 || m.iter == 25);
      if (o == Objective::kErm || o == Objective::kBaseline) {
        EXPECT_EQ(m.kl, 0.0);
      } else {
        EXPECT_GT(m.kl, 0.0);
      }
    }
    EXPECT_GE(r.best_val_acc, 0.0);
    EXPECT_LE(r.best_val_acc, 100.0);
    EXPECT_EQ(r.best_params.dense_head.has_value(), o == Objective::kErm);
    EXPECT_EQ(r.data.target.id, "T3");
  }
}

TEST(Trainer, SeedDeterminism) {
  const auto domains = toy_domains(10, 2);
  const TrainResult a = train(toy_config(Objective::kMetaVib), domains, toy_split());
  const TrainResult b = train(toy_config(Objective::kMetaVib), domains, toy_split());
  TrainConfig other = toy_config(Objective::kMetaVib);
  other.seed = 2;
  const TrainResult c = train(other, domains, toy_split());
  std::ostringstream sa, sb, sc;
  write_metrics_csv(sa, a.metrics);
  write_metrics_csv(sb, b.metrics);
  write_metrics_csv(sc, c.metrics);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_NE(sa.str(), sc.str());
}

TEST(Trainer, ResumeReproducesTrajectory) {
  const auto domains = toy_domains(10, 3);
  const fs::path dir = fresh_dir("mv-resume");
  TrainConfig config = toy_config(Objective::kMetaVib, 40);

  Trainer full(config, domains, toy_split());
  full.run();

  Trainer first(config, domains, toy_split());
  for (int i = 0; i < 17; ++i) first.step();
  first.save_checkpoint(dir / "mid.mvib");

  Trainer resumed(config, domains, toy_split());
  resumed.load_checkpoint(dir / "mid.mvib");
  EXPECT_EQ(resumed.iteration(), 17);
  resumed.run();

  ASSERT_EQ(resumed.metrics().size(), full.metrics().size());
  for (std::size_t i = 0; i < full.metrics().size(); ++i) {
    EXPECT_EQ(resumed.metrics()[i].total, full.metrics()[i].total) << i;
    EXPECT_EQ(resumed.metrics()[i].kl, full.metrics()[i].kl) << i;
    EXPECT_EQ(resumed.metrics()[i].val_acc, full.metrics()[i].val_acc) << i;
  }
  EXPECT_EQ(resumed.best_val_acc(), full.best_val_acc());
  const auto pa = resumed.params().entries();
  const auto pb = full.params().entries();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i].second->numel(); ++k) ASSERT_EQ(pa[i].second->at(k), pb[i].second->at(k));
  }
  fs::remove_all(dir);
}

TEST(Trainer, CheckpointFilesAndRejection) {
  const auto domains = toy_domains(10, 4);
  const fs::path dir = fresh_dir("mv-ckpt");
  TrainConfig config = toy_config(Objective::kBaseline, 20);
  config.checkpoint_dir = dir.string();
  config.snapshot_every = 10;
  Trainer t(config, domains, toy_split());
  t.run();
  EXPECT_TRUE(fs::exists(dir / "state.mvib"));
  EXPECT_TRUE(fs::exists(dir / "best.mvib"));
  for (const char* snap : {"params_000000.mvib", "params_000010.mvib", "params_000020.mvib"}) {
    EXPECT_TRUE(fs::exists(dir / snap)) << snap;
  }
  const ModelParams best = load_params(dir / "best.mvib");
  const auto eb = best.entries();
  const auto et = t.best_params().entries();
  for (std::size_t i = 0; i < eb.size(); ++i) EXPECT_EQ(eb[i].second->at(0), et[i].second->at(0));

  // A different objective cannot resume this state.
  Trainer other(toy_config(Objective::kMetaVib, 20), domains, toy_split());
  EXPECT_THROW(other.load_checkpoint(dir / "state.mvib"), FormatError);

  auto bytes = read_file_bytes(dir / "state.mvib");
  bytes[1] = 'X';
  write_file_bytes(dir / "corrupt.mvib", bytes);
  Trainer same(config, domains, toy_split());
  EXPECT_THROW(same.load_checkpoint(dir / "corrupt.mvib"), FormatError);
  fs::remove_all(dir);
}

TEST(Trainer, DivergenceKeepsLastCheckpoint) {
  const auto domains = toy_domains(10, 5);
  const fs::path dir = fresh_dir("mv-diverge");
  TrainConfig config = toy_config(Objective::kMetaVib, 30);
  config.checkpoint_dir = dir.string();
  Trainer t(config, domains, toy_split());
  for (int i = 0; i < 10; ++i) t.step();
  const auto saved = read_file_bytes(dir / "state.mvib");

  // Poison the parameters through a checkpoint and resume.
  auto records = read_tensor_file(dir / "state.mvib");
  for (auto& r : records) {
    if (r.name == "params.phi2.out.bias") r.value = Tensor::full(r.value.shape(), std::nan(""));
  }
  write_tensor_file(dir / "poison.mvib", records);
  Trainer poisoned(config, domains, toy_split());
  poisoned.load_checkpoint(dir / "poison.mvib");
  EXPECT_THROW(poisoned.step(), TrainingError);
  EXPECT_EQ(read_file_bytes(dir / "state.mvib"), saved);
  fs::remove_all(dir);
}

TEST(Trainer, RequiresTwoSources) {
  const auto domains = toy_domains(10, 6);
  SplitPlan plan;
  plan.source_domains = {"T0"};
  plan.target_domain = "T3";
  EXPECT_THROW(Trainer(toy_config(Objective::kMetaVib), domains, plan), ProtocolError);
}

TEST(Trainer, LossDecreases) {
  const auto domains = toy_domains(20, 7);
  for (Objective o : {Objective::kErm, Objective::kBaseline, Objective::kVib, Objective::kMetaVib}) {
    const TrainResult r = train(toy_config(o, 300), domains, toy_split());
    auto window = [&](std::size_t end) {
      double s = 0.0;
      for (std::size_t i = end - 50; i < end; ++i) s += r.metrics[i].total;
      return s / 50.0;
    };
    EXPECT_LT(window(300), window(50)) << objective_name(o);
  }
}

TEST(MetricsCsv, HeaderAndEmptyValidation) {
  const std::vector<MetricsRow> rows = {{1, 2.5, 2.0, 0.5, std::nullopt}, {2, 1.25, 1.0, 0.25, 87.5}};
  std::ostringstream os;
  write_metrics_csv(os, rows);
  EXPECT_EQ(os.str(), "iter,total,ce,kl,val_acc\n1,2.5,2,0.5,\n2,1.25,1,0.25,87.5\n");
  const fs::path path = fs::temp_directory_path() / "mv-metrics.csv";
  write_metrics_csv(path, rows);
  std::ifstream in(path);
  std::stringstream back;
  back << in.rdbuf();
  EXPECT_EQ(back.str(), os.str());
  fs::remove(path);
}

}  // namespace
}  // namespace metavib
