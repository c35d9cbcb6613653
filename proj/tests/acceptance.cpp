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

// Acceptance gate: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "gradcheck.hpp"
#include "json.hpp"
#include "metavib/cli.hpp"
#include "metavib/evaluation.hpp"
#include "metavib/format.hpp"
#include "metavib/objectives.hpp"
#include "metavib/trainer.hpp"

namespace metavib {
namespace {

namespace fs = std::filesystem;
using testing::gradient_error;
using testing::uniform_tensor;
using testing::weighted_sum;
using Clock = std::chrono::steady_clock;

struct Outcome {
  enum Status { kPass, kFail, kSkip } status = kFail;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / "metavib-acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

int cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::cerr << "metavib " << args.front() << " exited " << code << ": " << err.str();
  return code;
}

// Synthetic rotation domains, produced and read back through the tool.
const fs::path& synthetic_dir() {
  static const fs::path dir = [] {
    const fs::path d = work_dir() / "synthetic";
    if (cli({"gen-data", "--synthetic", "--seed", "7", "--out", d.string()}) != 0) {
      throw std::runtime_error("gen-data failed");
    }
    return d;
  }();
  return dir;
}

const std::vector<Domain>& synthetic_domains() {
  static const std::vector<Domain> domains = [] {
    const auto index = nlohmann::json::parse(read_text_file(synthetic_dir() / "index.json"));
    std::vector<Domain> out;
    for (const auto& d : index["domains"]) out.push_back(load_domain(synthetic_dir() / d["file"].get<std::string>()));
    return out;
  }();
  return domains;
}

std::vector<std::string> ids_of(const std::vector<Domain>& domains) {
  std::vector<std::string> ids;
  for (const auto& d : domains) ids.push_back(d.id);
  return ids;
}

// 1. Gradients ----------------------------------------------------------------

struct GradCase {
  std::string name;
  testing::ScalarFn f;
  Tensor x;
};

// Values with |v| >= 0.1, away from the kinks of relu, clamp and max pooling ties.
Tensor off_kink(const Shape& shape, Rng& rng) {
  Tensor t = uniform_tensor(shape, 0.1, 1.0, rng);
  std::vector<double> v(t.data().begin(), t.data().end());
  for (double& e : v) {
    if (rng.uniform() < 0.5) e = -e;
  }
  return Tensor(shape, std::move(v));
}

std::vector<GradCase> primitive_cases() {
  using namespace ops;
  Rng rng(101);
  const Tensor a = off_kink({3, 4}, rng), b = off_kink({4, 5}, rng), row = off_kink({4}, rng);
  const Tensor img = off_kink({2, 5, 5, 2}, rng), kernel = off_kink({3, 3, 2, 3}, rng), bias = off_kink({3}, rng);
  const Tensor pos = uniform_tensor({3, 4}, 0.5, 2.0, rng);
  const std::vector<std::size_t> rows = {2, 0, 2};
  const std::vector<std::size_t> cols = {1, 3, 0};
  const Tensor mu = off_kink({3, 4}, rng), lv = off_kink({3, 4}, rng), mu2 = off_kink({3, 4}, rng),
               lv2 = off_kink({3, 4}, rng);
  auto noise = [](const DiagGaussian& d) {
    Rng r(7);
    return sample(d, r);
  };
  return {
      {"matmul(a)", [=](const Tensor& x) { return weighted_sum(matmul(x, b)); }, a},
      {"matmul(b)", [=](const Tensor& x) { return weighted_sum(matmul(a, x)); }, b},
      {"transpose", [](const Tensor& x) { return weighted_sum(transpose(x)); }, a},
      {"conv2d same", [=](const Tensor& x) { return weighted_sum(conv2d(x, kernel, 1, Padding::kSame)); }, img},
      {"conv2d valid s2 kernel", [=](const Tensor& k) { return weighted_sum(conv2d(img, k, 2, Padding::kValid)); },
       kernel},
      {"conv2d+bias input",
       [=](const Tensor& x) { return weighted_sum(conv2d(x, kernel, bias, 2, Padding::kSame)); }, img},
      {"conv2d+bias kernel",
       [=](const Tensor& k) { return weighted_sum(conv2d(img, k, bias, 1, Padding::kValid)); }, kernel},
      {"conv2d+bias bias", [=](const Tensor& c) { return weighted_sum(conv2d(img, kernel, c, 1, Padding::kSame)); },
       bias},
      {"maxpool2d valid", [](const Tensor& x) { return weighted_sum(maxpool2d(x, 3, 3, 2, Padding::kValid)); }, img},
      {"maxpool2d same", [](const Tensor& x) { return weighted_sum(maxpool2d(x, 2, 2, 2, Padding::kSame)); }, img},
      {"relu", [](const Tensor& x) { return weighted_sum(relu(x)); }, a},
      {"elu", [](const Tensor& x) { return weighted_sum(elu(x)); }, a},
      {"exp", [](const Tensor& x) { return weighted_sum(exp(x)); }, a},
      {"log", [](const Tensor& x) { return weighted_sum(log(x)); }, pos},
      {"neg", [](const Tensor& x) { return weighted_sum(neg(x)); }, a},
      {"scale", [](const Tensor& x) { return weighted_sum(scale(x, -2.5)); }, a},
      {"add_scalar", [](const Tensor& x) { return weighted_sum(add_scalar(x, 0.7)); }, a},
      {"clamp", [](const Tensor& x) { return weighted_sum(clamp(x, -0.5, 0.5)); }, a},
      {"add", [=](const Tensor& x) { return weighted_sum(add(x, pos)); }, a},
      {"add broadcast", [=](const Tensor& x) { return weighted_sum(add(a, x)); }, row},
      {"sub", [=](const Tensor& x) { return weighted_sum(sub(pos, x)); }, a},
      {"sub broadcast", [=](const Tensor& x) { return weighted_sum(sub(a, x)); }, row},
      {"mul", [=](const Tensor& x) { return weighted_sum(mul(x, x)); }, a},
      {"mul broadcast", [=](const Tensor& x) { return weighted_sum(mul(a, x)); }, row},
      {"logsumexp", [](const Tensor& x) { return weighted_sum(logsumexp(x)); }, a},
      {"sum", [](const Tensor& x) { return sum(mul(x, x)); }, a},
      {"sum axis 0", [](const Tensor& x) { return weighted_sum(sum(x, 0)); }, a},
      {"sum axis 1", [](const Tensor& x) { return weighted_sum(sum(x, 1)); }, a},
      {"mean", [](const Tensor& x) { return mean(mul(x, x)); }, a},
      {"mean axis 0", [](const Tensor& x) { return weighted_sum(mean(x, 0)); }, a},
      {"reshape", [](const Tensor& x) { return weighted_sum(reshape(x, {2, 6})); }, a},
      {"slice_last", [](const Tensor& x) { return weighted_sum(slice_last(x, 1, 3)); }, a},
      {"gather_rows", [=](const Tensor& x) { return weighted_sum(gather_rows(x, rows)); }, a},
      {"pick", [=](const Tensor& x) { return weighted_sum(pick(x, cols)); }, a},
      {"sample mu", [=](const Tensor& x) { return weighted_sum(noise(DiagGaussian(x, lv))); }, mu},
      {"sample log_var", [=](const Tensor& x) { return weighted_sum(noise(DiagGaussian(mu, x))); }, lv},
      {"kl p.mu", [=](const Tensor& x) { return weighted_sum(kl_divergence_rows({x, lv}, {mu2, lv2})); }, mu},
      {"kl p.log_var", [=](const Tensor& x) { return weighted_sum(kl_divergence_rows({mu, x}, {mu2, lv2})); }, lv},
      {"kl q.mu", [=](const Tensor& x) { return weighted_sum(kl_divergence_rows({mu, lv}, {x, lv2})); }, mu2},
      {"kl q.log_var", [=](const Tensor& x) { return weighted_sum(kl_divergence_rows({mu, lv}, {mu2, x})); }, lv2},
  };
}

Outcome gradients() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  auto record = [&](const std::string& name, double err) {
    ++checks;
    if (!(err <= worst)) {
      worst = err;
      worst_name = name;
    }
  };
  for (const auto& c : primitive_cases()) record(c.name, gradient_error(c.f, c.x));

  // Full metavib_loss on a 2-class model with 8-dimensional features.
  NetworkSpec spec;
  spec.image_size = 8;
  spec.conv_channels = 2;
  spec.feature_dim = 8;
  spec.hidden_dim = 8;
  spec.num_classes = 2;
  Rng rng(102);
  const ModelParams params = init_params(spec, rng);
  Episode ep;
  ep.class_count = 2;
  ep.meta_train.images = uniform_tensor({5, 8, 8, 1}, 0, 1, rng);
  ep.meta_train.labels = {0, 1, 0, 1, 1};
  ep.meta_test.images = uniform_tensor({3, 8, 8, 1}, 0, 1, rng);
  ep.meta_test.labels = {1, 0, 1};
  ep.class_groups = {{0, 2}, {1, 3, 4}};
  ObjectiveOptions options;
  options.beta = 0.5;
  options.samples_z = 3;
  options.samples_psi = 2;
  ModelParams names = params;
  for (const auto& [name, tensor] : names.entries()) {
    const std::string entry = name;
    auto f = [&](const Tensor& t) {
      ModelParams q = params;
      for (auto& [n, p] : q.entries()) {
        if (n == entry) *p = t;
      }
      Rng noise(103);
      return metavib_loss(q, ep, options, noise).total_node;
    };
    record("metavib_loss " + entry, gradient_error(f, *tensor));
  }
  const bool ok = worst < 1e-4;
  return {ok ? Outcome::kPass : Outcome::kFail,
          std::to_string(checks) + " checks, max relative error " + fmt(worst, 3) + " (" + worst_name + ")"};
}

// 2. KL oracle ----------------------------------------------------------------

Outcome kl_oracle() {
  std::mt19937_64 engine(202);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), half(-0.5, 0.5);
  std::normal_distribution<double> normal;
  double worst = 0.0, worst_z = 0.0, worst_se = 0.0;
  for (int pair = 0; pair < 100; ++pair) {
    const std::size_t d = 4;
    std::vector<double> mp(d), lp(d), mq(d), lq(d);
    for (std::size_t i = 0; i < d; ++i) {
      mp[i] = unit(engine);
      lp[i] = half(engine);
      mq[i] = unit(engine);
      lq[i] = half(engine);
    }
    const double closed = kl_divergence(DiagGaussian(Tensor({d}, mp), Tensor({d}, lp)),
                                        DiagGaussian(Tensor({d}, mq), Tensor({d}, lq)))
                              .item();
    // E_p[log p(x) - log q(x)] over antithetic pairs x = mu +- sigma * eps;
    // the 2*pi terms cancel.
    auto log_ratio = [&](const std::vector<double>& eps, double sign) {
      double r = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double x = mp[i] + sign * std::exp(0.5 * lp[i]) * eps[i];
        const double zp = (x - mp[i]) * (x - mp[i]) / std::exp(lp[i]);
        const double zq = (x - mq[i]) * (x - mq[i]) / std::exp(lq[i]);
        r += -0.5 * (lp[i] + zp) + 0.5 * (lq[i] + zq);
      }
      return r;
    };
    const int n = 100000;  // pairs, 200000 draws
    double acc = 0.0, acc_sq = 0.0;
    std::vector<double> eps(d);
    for (int s = 0; s < n; ++s) {
      for (double& e : eps) e = normal(engine);
      const double ratio = 0.5 * (log_ratio(eps, 1.0) + log_ratio(eps, -1.0));
      acc += ratio;
      acc_sq += ratio * ratio;
    }
    const double mc = acc / n;
    const double std_error = std::sqrt((acc_sq / n - mc * mc) / n);
    worst = std::max(worst, std::abs(closed - mc));
    worst_z = std::max(worst_z, std::abs(closed - mc) / std_error);
    worst_se = std::max(worst_se, std_error);
  }
  return {worst <= 1e-2 ? Outcome::kPass : Outcome::kFail,
          "100 pairs x 200000 draws, max |closed - MC| " + fmt(worst, 3) + " (max MC standard error " +
              fmt(worst_se, 3) + ", max z " + fmt(worst_z, 3) + ")"};
}

// 3. Sampler --------------------------------------------------------------------

Outcome sampler() {
  const std::size_t n = 100000;
  bool ok = true;
  std::string detail;
  for (const auto& [m, var] : std::vector<std::pair<double, double>>{{5.0, 1.0}, {-3.0, 4.0}, {1.0, 0.25}}) {
    const DiagGaussian dist(Tensor::full({n, 1}, m), Tensor::full({n, 1}, std::log(var)));
    Rng rng(303);
    const Tensor draws = sample(dist, rng);
    double mean = 0.0, sq = 0.0;
    for (double v : draws.data()) mean += v;
    mean /= n;
    for (double v : draws.data()) sq += (v - mean) * (v - mean);
    const double sample_var = sq / (n - 1);
    const double mean_err = std::abs(mean - m) / std::abs(m);
    const double var_err = std::abs(sample_var - var) / var;
    ok = ok && mean_err <= 0.01 && var_err <= 0.02;
    detail += "N(" + fmt(m) + "," + fmt(var) + "): mean err " + fmt(100 * mean_err, 2) + "%, var err " +
              fmt(100 * var_err, 2) + "%; ";
    Rng same(303), other(304);
    const Tensor again = sample(dist, same);
    const Tensor different = sample(dist, other);
    const bool identical = std::equal(draws.data().begin(), draws.data().end(), again.data().begin());
    const bool distinct = !std::equal(draws.data().begin(), draws.data().end(), different.data().begin());
    ok = ok && identical && distinct;
    if (!identical) detail += "same seed gave different draws; ";
    if (!distinct) detail += "different seeds gave identical draws; ";
  }
  return {ok ? Outcome::kPass : Outcome::kFail, detail + "same seed reproduces draws"};
}

// Training runs shared by criteria 4, 5 and 7 ---------------------------------

struct RunRecord {
  std::vector<MetricsRow> metrics;
  ModelParams final_params;
  double target_acc = 0.0;
  double seconds = 0.0;
};

constexpr const char* kTarget = "M75";
constexpr int kIterations = 2000;

const RunRecord& synthetic_run(Objective objective, double beta, std::uint64_t seed) {
  static std::map<std::tuple<int, double, std::uint64_t>, RunRecord> cache;
  const auto key = std::make_tuple(static_cast<int>(objective), beta, seed);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  const auto& domains = synthetic_domains();
  const auto start = Clock::now();
  TrainConfig config = TrainConfig::desk_defaults();
  config.objective = objective;
  config.beta = beta;
  config.seed = seed;
  config.iterations = kIterations;
  const SplitPlan plan = make_split(ids_of(domains), kTarget, 0.1);
  Trainer trainer(config, domains, plan);
  trainer.run();
  const TrainResult result{trainer.best_params(), trainer.best_val_acc(), trainer.metrics(), trainer.data()};
  RunRecord run;
  run.metrics = trainer.metrics();
  run.final_params = trainer.params();
  run.target_acc = target_accuracy(result, config, 20);
  run.seconds = seconds_since(start);
  std::cerr << "  trained " << objective_name(objective) << " beta=" << beta << " seed=" << seed << ": target "
            << fmt(run.target_acc) << "% in " << fmt(run.seconds, 3) << "s\n";
  return cache[key] = std::move(run);
}

// 4. Optimization ---------------------------------------------------------------

// Centered moving average with half-width 50, clipped at the ends of the log.
double smoothed_loss(const std::vector<MetricsRow>& rows, int iter) {
  double sum = 0.0;
  int count = 0;
  for (const auto& r : rows) {
    if (std::abs(r.iter - iter) <= 50) {
      sum += r.total;
      ++count;
    }
  }
  return sum / count;
}

Outcome optimization() {
  const RunRecord& run = synthetic_run(Objective::kMetaVib, 0.001, 1);
  const double early = smoothed_loss(run.metrics, 100), late = smoothed_loss(run.metrics, kIterations);
  const double drop = 1.0 - late / early;
  const bool ok = drop >= 0.5 && run.seconds < 600.0;
  return {ok ? Outcome::kPass : Outcome::kFail, "metavib on " + std::string(kTarget) + ", smoothed loss " +
                                                    fmt(early) + " at 100 -> " + fmt(late) + " at 2000 (" +
                                                    fmt(100 * drop, 3) + "% drop), " + fmt(run.seconds, 3) + "s"};
}

// 5. Ablation ordering ----------------------------------------------------------

Outcome ablation() {
  const std::vector<std::pair<Objective, const char*>> objectives = {
      {Objective::kErm, "erm"}, {Objective::kBaseline, "baseline"}, {Objective::kMetaVib, "metavib"}};
  std::map<std::string, double> mean;
  double seconds = 0.0;
  std::string detail;
  for (const auto& [objective, name] : objectives) {
    std::string per_seed;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      const RunRecord& run = synthetic_run(objective, 0.001, seed);
      mean[name] += run.target_acc / 3.0;
      seconds += run.seconds;
      per_seed += (seed > 1 ? "/" : "") + fmt(run.target_acc);
    }
    detail += std::string(name) + " " + fmt(mean[name]) + " (" + per_seed + "); ";
  }
  const bool ok = mean["metavib"] >= mean["baseline"] && mean["baseline"] >= mean["erm"] &&
                  mean["metavib"] - mean["erm"] >= 2.0 && seconds < 3600.0;
  return {ok ? Outcome::kPass : Outcome::kFail,
          "target " + std::string(kTarget) + " accuracy over 3 seeds: " + detail + fmt(seconds, 4) + "s"};
}

// 6. Rotated MNIST --------------------------------------------------------------

Outcome rotated_mnist() {
  const char* root = std::getenv("METAVIB_DATA_DIR");
  const fs::path dir = root ? fs::path(root) : fs::path("data");
  const fs::path images = dir / "train-images-idx3-ubyte", labels = dir / "train-labels-idx1-ubyte";
  if (!fs::exists(images) || !fs::exists(labels)) {
    return {Outcome::kSkip, "no MNIST IDX files (train-images-idx3-ubyte, train-labels-idx1-ubyte) in " +
                                dir.string() + "; set METAVIB_DATA_DIR"};
  }
  const auto start = Clock::now();
  const LabeledImages base = load_idx(images, labels);
  Rng rng(7);
  const std::vector<double> angles(std::begin(kRotationAngles), std::end(kRotationAngles));
  const auto domains = build_rotation_domains(base, angles, 1000, 10, rng);
  double total = 0.0;
  std::string detail;
  for (const auto& target : domains) {
    TrainConfig config = TrainConfig::paper_defaults();
    config.iterations = 10000;
    config.objective = Objective::kMetaVib;
    const TrainResult result = train(config, domains, make_split(ids_of(domains), target.id, 0.1));
    const double acc = target_accuracy(result, config, 20);
    total += acc / static_cast<double>(domains.size());
    detail += target.id + " " + fmt(acc) + "; ";
  }
  const double secs = seconds_since(start);
  const bool ok = total >= 90.0 && secs <= 6 * 3600.0;
  return {ok ? Outcome::kPass : Outcome::kFail, "mean " + fmt(total) + "% (" + detail + fmt(secs, 5) + "s)"};
}

// 7. Compression ----------------------------------------------------------------

double final_layer_information(const RunRecord& run, std::uint64_t seed) {
  const auto& domains = synthetic_domains();
  const Domain& target = *std::find_if(domains.begin(), domains.end(), [](const Domain& d) { return d.id == kTarget; });
  InfoPlaneOptions options;
  options.seed = seed;
  const auto points = info_plane_layers(run.final_params, info_plane_probe(target, 500, seed), options);
  return points.back().i_xt;
}

Outcome compression() {
  double low = 0.0, high = 0.0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const double a = final_layer_information(synthetic_run(Objective::kMetaVib, 0.001, seed), seed);
    const double b = final_layer_information(synthetic_run(Objective::kMetaVib, 1.0, seed), seed);
    low += a / 3.0;
    high += b / 3.0;
    detail += "seed " + std::to_string(seed) + ": " + fmt(a) + " vs " + fmt(b) + "; ";
  }
  const double margin = low - high;
  return {margin >= 0.1 ? Outcome::kPass : Outcome::kFail,
          "I(X;z) beta=0.001 " + fmt(low) + " vs beta=1 " + fmt(high) + " nats, margin " + fmt(margin, 3) + " (" +
              detail.substr(0, detail.size() - 2) + ")"};
}

// 8. Determinism and persistence --------------------------------------------------

Outcome determinism() {
  const std::string data = synthetic_dir().string();
  const fs::path root = work_dir() / "determinism";
  auto train_run = [&](const std::string& name, int iters, bool resume) {
    std::vector<std::string> args = {"train", "--data", data, "--out", (root / name).string(), "--iters",
                                     std::to_string(iters), "--eval-every", "20", "--seed", "4"};
    if (resume) args.push_back("--resume");
    return cli(args);
  };
  if (train_run("a", 60, false) != 0 || train_run("b", 60, false) != 0 || train_run("resumed", 40, false) != 0 ||
      train_run("resumed", 60, true) != 0) {
    return {Outcome::kFail, "a training command failed"};
  }
  const auto a = read_file_bytes(root / "a" / "metrics.csv");
  const bool same_seed = a == read_file_bytes(root / "b" / "metrics.csv");
  const bool resumed = a == read_file_bytes(root / "resumed" / "metrics.csv");
  const bool params = read_file_bytes(root / "a" / "final.mvib") == read_file_bytes(root / "resumed" / "final.mvib");
  const bool ok = same_seed && resumed && params;
  return {ok ? Outcome::kPass : Outcome::kFail,
          std::string("metrics.csv byte-identical across seeded reruns: ") + (same_seed ? "yes" : "no") +
              "; checkpoint at 40 then resume to 60 matches uninterrupted trajectory: " + (resumed ? "yes" : "no") +
              "; final parameters identical: " + (params ? "yes" : "no")};
}

// 9. Probability validity -----------------------------------------------------------

Outcome probabilities() {
  const std::string data = synthetic_dir().string();
  const fs::path run = work_dir() / "uncertainty-run", out = work_dir() / "uncertainty-eval";
  if (cli({"train", "--data", data, "--out", run.string(), "--iters", "200"}) != 0 ||
      cli({"eval", "--checkpoint", run.string(), "--data", data, "--out", out.string()}) != 0) {
    return {Outcome::kFail, "train or eval failed"};
  }
  std::ifstream in(out / "uncertainty.csv");
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0, bad = 0;
  double worst = 0.0;
  while (std::getline(in, line)) {
    ++rows;
    std::istringstream cells(line);
    std::string cell;
    double sum = 0.0;
    bool negative = false;
    for (int col = 0; std::getline(cells, cell, ','); ++col) {
      if (col < 3) continue;
      const double p = std::stod(cell);
      negative = negative || !(p >= 0.0);
      sum += p;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
    if (negative || !(std::abs(sum - 1.0) <= 1e-9)) ++bad;
  }
  const bool ok = rows > 0 && bad == 0;
  return {ok ? Outcome::kPass : Outcome::kFail, std::to_string(rows) + " probability rows, " + std::to_string(bad) +
                                                    " invalid, max |sum - 1| " + fmt(worst, 3)};
}

}  // namespace
}  // namespace metavib

int main(int argc, char** argv) {
  using namespace metavib;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradients},
      {"KL divergence against Monte Carlo", kl_oracle},
      {"sampler statistics", sampler},
      {"optimization sanity", optimization},
      {"ablation ordering", ablation},
      {"rotated MNIST", rotated_mnist},
      {"compression grows with beta", compression},
      {"determinism and persistence", determinism},
      {"probability validity", probabilities},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(number)) continue;
    const auto start = Clock::now();
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {Outcome::kFail, std::string("exception: ") + e.what()};
    }
    const char* status = outcome.status == Outcome::kPass ? "PASS" : outcome.status == Outcome::kSkip ? "SKIP" : "FAIL";
    if (outcome.status == Outcome::kFail) ++failures;
    std::cout << status << " " << number << " " << criteria[i].first << ": " << outcome.detail << " ["
              << fmt(seconds_since(start), 3) << "s]" << std::endl;
  }
  fs::remove_all(fs::temp_directory_path() / "metavib-acceptance");
  return failures == 0 ? 0 : 1;
}
