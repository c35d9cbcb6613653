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
#include <numbers>

#include "gradcheck.hpp"
#include "metavib/errors.hpp"
#include "metavib/objectives.hpp"

namespace metavib {
namespace {

using testing::gradient_error;
using testing::uniform_tensor;

// 8x8 images, two classes, 8-dimensional features.
NetworkSpec toy_spec(bool head = false) {
  NetworkSpec spec;
  spec.image_size = 8;
  spec.conv_channels = 2;
  spec.feature_dim = 8;
  spec.hidden_dim = 8;
  spec.num_classes = 2;
  spec.dense_head = head;
  return spec;
}

ModelParams toy_params(std::uint64_t seed, bool head = false) {
  Rng rng(seed);
  return init_params(toy_spec(head), rng);
}

LabeledImages toy_images(std::vector<std::size_t> labels, Rng& rng) {
  LabeledImages out;
  out.images = uniform_tensor({labels.size(), 8, 8, 1}, 0, 1, rng);
  out.labels = std::move(labels);
  return out;
}

Episode toy_episode(std::uint64_t seed) {
  Rng rng(seed);
  Episode ep;
  ep.class_count = 2;
  ep.meta_train = toy_images({0, 1, 0, 1, 1}, rng);
  ep.meta_test = toy_images({1, 0, 1}, rng);
  ep.class_groups = {{0, 2}, {1, 3, 4}};
  return ep;
}

Tensor& entry(ModelParams& p, const std::string& name) {
  for (auto& [n, t] : p.entries()) {
    if (n == name) return *t;
  }
  throw std::out_of_range(name);
}

ObjectiveOptions opts(double beta, int lz = 10, int lpsi = 1) {
  ObjectiveOptions o;
  o.beta = beta;
  o.samples_z = lz;
  o.samples_psi = lpsi;
  return o;
}

TEST(MetaVibLoss, BetaZeroIsCrossEntropy) {
  const ModelParams p = toy_params(1);
  Rng rng(2);
  const LossBreakdown l = metavib_loss(p, toy_episode(3), opts(0.0), rng);
  EXPECT_EQ(l.total, l.cross_entropy);
  EXPECT_GT(l.kl, 0.0);
  EXPECT_EQ(l.samples_z, 10);
  EXPECT_EQ(l.samples_psi, 1);
}

TEST(MetaVibLoss, Defaults) {
  const ObjectiveOptions o;
  EXPECT_EQ(o.beta, 0.001);
  EXPECT_EQ(o.samples_z, 10);
  EXPECT_EQ(o.samples_psi, 1);
  EXPECT_EQ(o.kl_direction, KlDirection::kForward);
}

TEST(MetaVibLoss, TotalDecomposes) {
  const ModelParams p = toy_params(4);
  for (double beta : {0.0, 0.001, 0.3, 1.0}) {
    Rng rng(5);
    const LossBreakdown l = metavib_loss(p, toy_episode(6), opts(beta), rng);
    EXPECT_NEAR(l.total, l.cross_entropy + beta * l.kl, 1e-12);
    EXPECT_GE(l.kl, 0.0);
    EXPECT_EQ(l.beta, beta);
    EXPECT_EQ(l.total_node.item(), l.total);
  }
}

TEST(MetaVibLoss, MonotoneInBeta) {
  const ModelParams p = toy_params(7);
  double previous = -1.0;
  for (double beta : {0.0, 0.01, 0.1, 0.5, 1.0}) {
    Rng rng(8);
    const double total = metavib_loss(p, toy_episode(9), opts(beta), rng).total;
    EXPECT_GE(total, previous);
    previous = total;
  }
}

TEST(MetaVibLoss, IdenticalInputsGiveZeroKl) {
  const ModelParams p = toy_params(10);
  Rng rng(11);
  Episode ep;
  ep.class_count = 2;
  ep.meta_train = toy_images({0, 1}, rng);
  ep.meta_test = ep.meta_train;
  ep.class_groups = {{0}, {1}};
  for (KlDirection dir : {KlDirection::kForward, KlDirection::kReverse}) {
    ObjectiveOptions o = opts(1.0);
    o.kl_direction = dir;
    EXPECT_NEAR(metavib_loss(p, ep, o, rng).kl, 0.0, 1e-12);
  }
}

TEST(MetaVibLoss, KlDirectionsDiffer) {
  const ModelParams p = toy_params(12);
  ObjectiveOptions fwd = opts(1.0);
  ObjectiveOptions rev = fwd;
  rev.kl_direction = KlDirection::kReverse;
  Rng a(13), b(13);
  const LossBreakdown lf = metavib_loss(p, toy_episode(14), fwd, a);
  const LossBreakdown lr = metavib_loss(p, toy_episode(14), rev, b);
  EXPECT_EQ(lf.cross_entropy, lr.cross_entropy);
  EXPECT_GE(lr.kl, 0.0);
  EXPECT_NE(lf.kl, lr.kl);
}

TEST(MetaVibLoss, DeterministicGivenSeed) {
  const ModelParams p = toy_params(15);
  Rng a(16), b(16), c(17);
  const double x = metavib_loss(p, toy_episode(18), opts(0.001), a).total;
  EXPECT_EQ(x, metavib_loss(p, toy_episode(18), opts(0.001), b).total);
  EXPECT_NE(x, metavib_loss(p, toy_episode(18), opts(0.001), c).total);
}

TEST(MetaVibLoss, CrossEntropyMatchesDirectSum) {
  // Oracle: replay the draw order by hand, one psi draw then its z draws.
  const ModelParams p = toy_params(19);
  const Episode ep = toy_episode(20);
  const int lz = 3, lpsi = 2;
  Rng rng(21);
  const LossBreakdown l = metavib_loss(p, ep, opts(0.0, lz, lpsi), rng);

  Rng replay(21);
  const Tensor pooled = class_pool(feature_extract(p, ep.meta_train.images), ep.meta_train.labels, 2);
  const DiagGaussian psi_dist = infer_classifier_dist(p, pooled);
  const DiagGaussian post = infer_latent_dist(p, feature_extract(p, ep.meta_test.images));
  double acc = 0.0;
  for (int a = 0; a < lpsi; ++a) {
    const Tensor psi = sample(psi_dist, replay);
    for (int b = 0; b < lz; ++b) {
      const Tensor z = sample(post, replay);
      for (std::size_t n = 0; n < ep.meta_test.size(); ++n) {
        double logits[2];
        for (std::size_t c = 0; c < 2; ++c) {
          logits[c] = 0.0;
          for (std::size_t f = 0; f < 8; ++f) logits[c] += z.at(n * 8 + f) * psi.at(c * 8 + f);
        }
        const double m = std::max(logits[0], logits[1]);
        const double lse = m + std::log(std::exp(logits[0] - m) + std::exp(logits[1] - m));
        acc += logits[ep.meta_test.labels[n]] - lse;
      }
    }
  }
  EXPECT_NEAR(l.cross_entropy, -acc / (3.0 * lz * lpsi), 1e-12);
}

TEST(MetaVibLoss, FiniteDifferenceGradients) {
  const ModelParams p = toy_params(22);
  const Episode ep = toy_episode(23);
  for (const std::string name : {"theta.conv1.kernel", "theta.fc.weight", "phi1.hidden1.weight", "phi1.out.bias",
                                 "phi2.hidden2.weight", "phi2.out.weight"}) {
    ModelParams q = p;
    const Tensor x = entry(q, name);
    auto f = [&](const Tensor& t) {
      ModelParams r = q;
      entry(r, name) = t;
      Rng rng(24);  // same reparameterization noise for every evaluation
      return metavib_loss(r, ep, opts(0.5, 3, 2), rng).total_node;
    };
    EXPECT_LT(gradient_error(f, x), 1e-4) << name;
  }
}

TEST(MetaVibLoss, EveryParameterReceivesGradient) {
  const ModelParams p = toy_params(25);
  Tape tape;
  const ModelParams b = p.bind(tape);
  Rng rng(26);
  tape.backward(metavib_loss(b, toy_episode(27), opts(0.1), rng).total_node);
  for (const auto& [name, t] : b.entries()) {
    double norm = 0.0;
    const Tensor g = tape.grad(*t);
    for (double v : g.data()) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  }
}

double variance_of_ce(const ModelParams& p, const Episode& ep, int lz) {
  std::vector<double> v;
  for (std::uint64_t s = 0; s < 50; ++s) {
    Rng rng(1000 + s);
    v.push_back(metavib_loss(p, ep, opts(0.0, lz), rng).cross_entropy);
  }
  double m = 0.0, var = 0.0;
  for (double x : v) m += x;
  m /= 50.0;
  for (double x : v) var += (x - m) * (x - m);
  return var / 49.0;
}

TEST(MetaVibLoss, MoreLatentSamplesReduceVariance) {
  ModelParams p = toy_params(28);
  // Wide posteriors make the latent noise dominate the estimator.
  Tensor& out_bias = entry(p, "phi2.out.bias");
  std::vector<double> b(out_bias.data().begin(), out_bias.data().end());
  for (std::size_t i = 8; i < 16; ++i) b[i] = 1.0;
  out_bias = Tensor(out_bias.shape(), b);
  // Fixed classifiers isolate the z draws.
  Tensor& psi_bias = entry(p, "phi1.out.bias");
  std::vector<double> pb(psi_bias.data().begin(), psi_bias.data().end());
  for (std::size_t i = 8; i < 16; ++i) pb[i] = -1e3;
  psi_bias = Tensor(psi_bias.shape(), pb);
  const Episode ep = toy_episode(29);
  const double v1 = variance_of_ce(p, ep, 1);
  const double v10 = variance_of_ce(p, ep, 10);
  const double v100 = variance_of_ce(p, ep, 100);
  EXPECT_LT(v10, v1);
  EXPECT_LT(v100, v10);
  EXPECT_LT(v100, v1);
}

TEST(MetaVibLoss, ProtocolErrors) {
  const ModelParams p = toy_params(30);
  Rng rng(31);
  Episode missing = toy_episode(32);
  missing.meta_train = missing.meta_train.select(std::vector<std::size_t>{1, 3});
  EXPECT_THROW(metavib_loss(p, missing, opts(0.1), rng), ProtocolError);

  Episode wrong_count = toy_episode(32);
  wrong_count.class_count = 3;
  EXPECT_THROW(metavib_loss(p, wrong_count, opts(0.1), rng), ProtocolError);

  Episode empty_test = toy_episode(32);
  empty_test.meta_test = empty_test.meta_test.select(std::vector<std::size_t>{});
  EXPECT_THROW(metavib_loss(p, empty_test, opts(0.1), rng), ProtocolError);

  EXPECT_THROW(metavib_loss(p, toy_episode(32), opts(1.5), rng), ParameterError);
  EXPECT_THROW(metavib_loss(p, toy_episode(32), opts(0.1, 0), rng), ParameterError);
  EXPECT_THROW(vib_loss(p, missing, opts(0.1), rng), ProtocolError);
  EXPECT_THROW(baseline_loss(p, missing, 1, rng), ProtocolError);
}

TEST(VibLoss, StandardPriorKlExamples) {
  ModelParams p = toy_params(33);
  Tensor& w = entry(p, "phi2.out.weight");
  w = Tensor::zeros(w.shape());
  Rng rng(34);
  // Posterior N(0, I).
  EXPECT_NEAR(vib_loss(p, toy_episode(35), opts(1.0), rng).kl, 0.0, 1e-15);
  // Posterior N(1, 1) along one coordinate.
  Tensor& b = entry(p, "phi2.out.bias");
  std::vector<double> bias(16, 0.0);
  bias[0] = 1.0;
  b = Tensor({16}, bias);
  EXPECT_NEAR(vib_loss(p, toy_episode(35), opts(1.0), rng).kl, 0.5, 1e-12);
}

TEST(VibLoss, MatchesMetaVibWhenBetaIsZero) {
  const ModelParams p = toy_params(36);
  Rng a(37), b(37);
  const LossBreakdown v = vib_loss(p, toy_episode(38), opts(0.0), a);
  const LossBreakdown m = metavib_loss(p, toy_episode(38), opts(0.0), b);
  EXPECT_EQ(v.total, m.total);
  EXPECT_NE(v.kl, m.kl);
}

TEST(VibLoss, GradientMatchesFiniteDifferences) {
  const ModelParams p = toy_params(39);
  const Episode ep = toy_episode(40);
  ModelParams q = p;
  auto f = [&](const Tensor& t) {
    ModelParams r = q;
    entry(r, "phi2.hidden1.weight") = t;
    Rng rng(41);
    return vib_loss(r, ep, opts(0.7, 2), rng).total_node;
  };
  EXPECT_LT(gradient_error(f, entry(q, "phi2.hidden1.weight")), 1e-4);
}

TEST(BaselineLoss, NoKlAndFinite) {
  NetworkSpec spec;
  Rng init(42);
  const ModelParams p = init_params(spec, init);
  Rng rng(43);
  Episode ep;
  ep.class_count = 10;
  ep.meta_train.images = uniform_tensor({20, 28, 28, 1}, 0, 1, rng);
  ep.meta_test.images = uniform_tensor({10, 28, 28, 1}, 0, 1, rng);
  for (std::size_t i = 0; i < 20; ++i) ep.meta_train.labels.push_back(i % 10);
  for (std::size_t i = 0; i < 10; ++i) ep.meta_test.labels.push_back(i);
  const LossBreakdown l = baseline_loss(p, ep, 1, rng);
  EXPECT_EQ(l.kl, 0.0);
  EXPECT_EQ(l.samples_z, 1);
  EXPECT_TRUE(std::isfinite(l.total));
  EXPECT_EQ(l.total, l.cross_entropy);
}

TEST(BaselineLoss, ApproachesErmForNearDegenerateClassifiers) {
  ModelParams p = toy_params(44, true);
  Tensor& w = entry(p, "phi1.out.weight");
  std::vector<double> wv(w.data().begin(), w.data().end());
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 8; c < 16; ++c) wv[r * 16 + c] = 0.0;
  }
  w = Tensor(w.shape(), wv);
  Tensor& b = entry(p, "phi1.out.bias");
  std::vector<double> bv(16, 0.0);
  for (std::size_t c = 8; c < 16; ++c) bv[c] = -1e3;  // clamps to the minimum log-variance
  b = Tensor({16}, bv);

  const Episode ep = toy_episode(45);
  const Tensor pooled = class_pool(feature_extract(p, ep.meta_train.images), ep.meta_train.labels, 2);
  const DiagGaussian psi = infer_classifier_dist(p, pooled);
  for (double lv : psi.log_var().data()) EXPECT_EQ(lv, kMinLogVar);
  p.dense_head = ops::transpose(psi.mu());

  Rng rng(46);
  const double base = baseline_loss(p, ep, 1, rng).total;
  const double erm = erm_loss(p, ep.meta_test).total;
  EXPECT_NEAR(base, erm, 1e-3);
}

TEST(ErmLoss, UniformLogits) {
  const Tensor logits = Tensor::zeros({4, 10});
  const std::vector<std::size_t> labels = {0, 3, 9, 5};
  EXPECT_NEAR(softmax_cross_entropy(logits, labels).item(), std::log(10.0), 1e-15);

  ModelParams p = toy_params(47, true);
  p.dense_head = Tensor::zeros({8, 2});
  Rng rng(48);
  const LabeledImages batch = toy_images({0, 1, 1}, rng);
  const LossBreakdown l = erm_loss(p, batch);
  EXPECT_NEAR(l.total, std::numbers::ln2, 1e-15);
  EXPECT_EQ(l.kl, 0.0);
}

TEST(ErmLoss, ConfidentOneHot) {
  std::vector<double> v(3 * 10, 0.0);
  const std::vector<std::size_t> labels = {2, 7, 0};
  for (std::size_t i = 0; i < 3; ++i) v[i * 10 + labels[i]] = 100.0;
  EXPECT_LT(softmax_cross_entropy(Tensor({3, 10}, v), labels).item(), 1e-6);
}

TEST(ErmLoss, ShiftInvariance) {
  Rng rng(49);
  const Tensor logits = uniform_tensor({5, 4}, -3, 3, rng);
  const std::vector<std::size_t> labels = {0, 1, 2, 3, 0};
  const double a = softmax_cross_entropy(logits, labels).item();
  const double b = softmax_cross_entropy(ops::add_scalar(logits, 123.0), labels).item();
  EXPECT_NEAR(a, b, 1e-12);
}

TEST(ErmLoss, GradientMatchesFiniteDifferences) {
  const ModelParams p = toy_params(50, true);
  Rng rng(51);
  const LabeledImages batch = toy_images({0, 1, 1, 0}, rng);
  for (const std::string name : {"head.weight", "theta.fc.weight", "phi2.hidden1.weight"}) {
    ModelParams q = p;
    auto f = [&](const Tensor& t) {
      ModelParams r = q;
      entry(r, name) = t;
      return erm_loss(r, batch).total_node;
    };
    EXPECT_LT(gradient_error(f, entry(q, name)), 1e-4) << name;
  }
}

TEST(ErmLoss, ShapeChecks) {
  EXPECT_THROW(erm_loss(toy_params(52), LabeledImages{}), ParameterError);
  const std::vector<std::size_t> two = {0, 1};
  EXPECT_THROW(softmax_cross_entropy(Tensor::zeros({3, 4}), two), DimensionError);
  EXPECT_THROW(softmax_cross_entropy(Tensor::zeros({4}), two), DimensionError);
}

}  // namespace
}  // namespace metavib
