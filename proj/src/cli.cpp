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

#include "metavib/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "metavib/errors.hpp"
#include "metavib/evaluation.hpp"
#include "metavib/format.hpp"
#include "metavib/serialize.hpp"
#include "metavib/trainer.hpp"

namespace metavib {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Configuration ---------------------------------------------------------------

json default_config() {
  const char* env = std::getenv("METAVIB_DATA_DIR");
  return json{
      {"data.dir", env != nullptr && *env != '\0' ? env : "data"},
      {"data.source", "synthetic"},
      {"data.images", ""},
      {"data.labels", ""},
      {"data.seed", 7},
      {"data.per_domain", 1000},
      {"data.classes", 10},
      {"data.pool_per_class", 200},
      {"data.noise", 0.1},
      {"train.objective", "metavib"},
      {"train.target", "M75"},
      {"train.beta", 0.001},
      {"train.lz", 10},
      {"train.lpsi", 1},
      {"train.kl_direction", "forward"},
      {"train.lr", 1e-4},
      {"train.iters", 2000},
      {"train.batch", 32},
      {"train.eval_every", 100},
      {"train.seed", 1},
      {"train.validation_fraction", 0.1},
      {"train.snapshot_every", 0},
      {"eval.repeats", 20},
      {"eval.export_draws", 5},
      {"experiment.seeds", 3},
      {"experiment.targets", ""},
      {"experiment.jobs", 1},
      {"ablate.objectives", "erm,baseline,vib,metavib"},
      {"sweep.axis", "beta"},
      {"sweep.values", "1,0.1,0.01,0.001"},
      {"infoplane.bins", 30},
      {"infoplane.z_draws", 10},
      {"infoplane.probe", 500},
      {"infoplane.domain", ""},
  };
}

void set_value(json& config, const std::string& key, const json& value, const std::string& origin) {
  const json defaults = default_config();
  if (!defaults.contains(key)) throw ParameterError("unknown config key '" + key + "' in " + origin);
  const json& like = defaults.at(key);
  const bool ok = like.is_string()            ? value.is_string()
                  : like.is_number_integer()  ? value.is_number_integer()
                  : like.is_number()          ? value.is_number()
                                              : false;
  if (!ok) throw ParameterError("config key '" + key + "' in " + origin + " expects a " + like.type_name());
  config[key] = value;
}

json parse_flag_value(const json& like, const std::string& key, const std::string& text) {
  if (like.is_string()) return text;
  if (like.is_number_integer()) {
    long long v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size()) {
      throw ParameterError("--" + key + " expects an integer, got '" + text + "'");
    }
    return v;
  }
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size()) {
    throw ParameterError("--" + key + " expects a number, got '" + text + "'");
  }
  return v;
}

void apply_file(json& config, const fs::path& path) {
  if (!fs::exists(path)) throw DataError("config file " + path.string() + " does not exist");
  const json file = json::parse(read_text_file(path));
  if (!file.is_object()) throw ParameterError("config file must hold a flat JSON object");
  for (const auto& [key, value] : file.items()) set_value(config, key, value, path.string());
}

std::string str(const json& c, const std::string& key) { return c.at(key).get<std::string>(); }
double num(const json& c, const std::string& key) { return c.at(key).get<double>(); }

long long integer(const json& c, const std::string& key, long long min) {
  const long long v = c.at(key).get<long long>();
  if (v < min) throw ParameterError(key + " must be at least " + std::to_string(min));
  return v;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

TrainConfig train_config(const json& c) {
  TrainConfig t = TrainConfig::desk_defaults();
  t.objective = parse_objective(str(c, "train.objective"));
  t.beta = num(c, "train.beta");
  t.samples_z = static_cast<int>(integer(c, "train.lz", 1));
  t.samples_psi = static_cast<int>(integer(c, "train.lpsi", 1));
  t.kl_direction = parse_kl_direction(str(c, "train.kl_direction"));
  t.learning_rate = num(c, "train.lr");
  t.iterations = static_cast<int>(integer(c, "train.iters", 1));
  t.batch_per_domain = static_cast<std::size_t>(integer(c, "train.batch", 1));
  t.eval_every = static_cast<int>(integer(c, "train.eval_every", 1));
  t.seed = static_cast<std::uint64_t>(integer(c, "train.seed", 0));
  t.snapshot_every = static_cast<int>(integer(c, "train.snapshot_every", 0));
  t.validate();
  return t;
}

// Inputs and manifests --------------------------------------------------------

struct DataSet {
  std::vector<Domain> domains;
  std::vector<std::pair<std::string, std::string>> blobs;  // file name, blob hash
};

std::string bytes_to_string(std::span<const std::uint8_t> b) { return {b.begin(), b.end()}; }

DataSet load_data(const fs::path& dir) {
  const fs::path index_path = dir / "index.json";
  if (!fs::exists(index_path)) {
    throw DataError("no data index at " + index_path.string() + "; run gen-data first");
  }
  const std::string text = read_text_file(index_path);
  const json index = json::parse(text);
  DataSet out;
  out.blobs.emplace_back("index.json", git_blob_hash(text));
  for (const auto& entry : index.at("domains")) {
    const std::string file = entry.at("file").get<std::string>();
    out.blobs.emplace_back(file, git_blob_hash(bytes_to_string(read_file_bytes(dir / file))));
    Domain d = load_domain(dir / file);
    if (d.id != entry.at("id").get<std::string>() || d.size() != entry.at("count").get<std::size_t>()) {
      throw DataError("domain file " + file + " does not match the index");
    }
    out.domains.push_back(std::move(d));
  }
  if (out.domains.empty()) throw DataError("data index lists no domains");
  return out;
}

std::vector<std::string> domain_ids(std::span<const Domain> domains) {
  std::vector<std::string> ids;
  for (const auto& d : domains) ids.push_back(d.id);
  return ids;
}

const Domain& find_domain(std::span<const Domain> domains, const std::string& id) {
  for (const auto& d : domains) {
    if (d.id == id) return d;
  }
  throw ParameterError("unknown domain '" + id + "'");
}

// Hash of the resolved configuration plus every input blob.
std::string input_hash(const json& config, const DataSet& data) {
  std::string tree = config.dump() + "\n";
  for (const auto& [file, blob] : data.blobs) tree += blob + " " + file + "\n";
  return git_blob_hash(tree);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) { write_text_file(path, j.dump(2) + "\n"); }

void write_manifest(const fs::path& out, const std::string& command, const json& config, const DataSet& data) {
  json inputs = json::array();
  for (const auto& [file, blob] : data.blobs) inputs.push_back({{"file", file}, {"blob", blob}});
  write_json(out / "manifest.json", {{"command", command},
                                     {"config", config},
                                     {"seed", config.at("train.seed")},
                                     {"input_hash", input_hash(config, data)},
                                     {"inputs", inputs},
                                     {"out", out.string()},
                                     {"created_at", utc_now()}});
}

json read_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("manifest " + path.string() + " does not exist");
  const json m = json::parse(read_text_file(path));
  if (!m.contains("config") || !m.at("config").is_object()) throw FormatError("manifest has no config object");
  return m;
}

void write_csv(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  std::ostringstream os;
  body(os);
  write_text_file(path, os.str());
}

// Checkpoint argument: a run directory or a parameter file.
struct CheckpointRef {
  fs::path params;
  fs::path manifest;
};

CheckpointRef resolve_checkpoint(const std::string& arg) {
  if (arg.empty()) throw ParameterError("--checkpoint is required");
  const fs::path p = arg;
  CheckpointRef ref;
  if (fs::is_directory(p)) {
    ref.params = p / "best.mvib";
    ref.manifest = p / "manifest.json";
  } else {
    ref.params = p;
    ref.manifest = p.parent_path() / "manifest.json";
  }
  if (!fs::exists(ref.params)) throw DataError("missing checkpoint " + ref.params.string());
  return ref;
}

// Commands ------------------------------------------------------------------

struct Context {
  json config;
  std::map<std::string, std::string> flags;  // explicitly given flags
  std::ostream& out;
  std::ostream& err;

  bool given(const std::string& name) const { return flags.contains(name); }
  std::string flag(const std::string& name) const {
    auto it = flags.find(name);
    return it == flags.end() ? std::string() : it->second;
  }
  fs::path out_dir() const {
    const std::string o = flag("out");
    if (o.empty()) throw ParameterError("--out is required");
    fs::create_directories(o);
    return o;
  }
};

int cmd_gen_data(Context& ctx) {
  json& c = ctx.config;
  if (ctx.given("synthetic") && (ctx.given("images") || ctx.given("labels"))) {
    throw ParameterError("--synthetic conflicts with --images/--labels");
  }
  if (ctx.given("synthetic")) c["data.source"] = "synthetic";
  if (ctx.given("images") || ctx.given("labels")) c["data.source"] = "idx";
  const fs::path dir = ctx.given("out") ? fs::path(ctx.flag("out")) : fs::path(str(c, "data.dir"));
  const auto classes = static_cast<std::size_t>(integer(c, "data.classes", 1));
  const auto per_domain = static_cast<std::size_t>(integer(c, "data.per_domain", 1));
  Rng rng(static_cast<std::uint64_t>(integer(c, "data.seed", 0)));

  LabeledImages base;
  const std::string source = str(c, "data.source");
  if (source == "synthetic") {
    base = synth_glyphs(classes, static_cast<std::size_t>(integer(c, "data.pool_per_class", 1)), num(c, "data.noise"),
                        rng);
  } else if (source == "idx") {
    if (str(c, "data.images").empty() || str(c, "data.labels").empty()) {
      throw ParameterError("idx data needs both --images and --labels");
    }
    base = load_idx(str(c, "data.images"), str(c, "data.labels"));
  } else {
    throw ParameterError("data.source must be synthetic or idx");
  }

  const std::vector<double> angles(std::begin(kRotationAngles), std::end(kRotationAngles));
  const auto domains = build_rotation_domains(base, angles, per_domain, classes, rng);
  fs::create_directories(dir);
  json index = {{"source", source}, {"seed", c.at("data.seed")}, {"classes", classes}, {"domains", json::array()}};
  for (const auto& d : domains) {
    const std::string file = d.id + ".mvib";
    save_domain(dir / file, d);
    index["domains"].push_back({{"id", d.id}, {"angle", d.angle_deg}, {"count", d.size()}, {"file", file}});
    ctx.out << "wrote " << (dir / file).string() << " (" << d.size() << " samples)\n";
  }
  write_json(dir / "index.json", index);
  return kExitOk;
}

int cmd_train(Context& ctx) {
  json& c = ctx.config;
  json manifest;
  if (ctx.given("replay")) {
    manifest = read_manifest(ctx.flag("replay"));
    c = default_config();
    for (const auto& [key, value] : manifest.at("config").items()) set_value(c, key, value, "manifest");
    if (ctx.given("data")) c["data.dir"] = ctx.flag("data");
  }
  const fs::path out = ctx.out_dir();
  const TrainConfig base = train_config(c);
  const DataSet data = load_data(str(c, "data.dir"));
  if (ctx.given("replay") && manifest.at("input_hash").get<std::string>() != input_hash(c, data)) {
    throw DataError("inputs differ from the replayed manifest");
  }
  const auto ids = domain_ids(data.domains);
  const SplitPlan split = make_split(ids, str(c, "train.target"), num(c, "train.validation_fraction"));
  TrainConfig config = base;
  config.checkpoint_dir = out.string();
  write_manifest(out, "train", c, data);

  Trainer trainer(config, data.domains, split);
  if (ctx.given("resume") && fs::exists(out / "state.mvib")) {
    trainer.load_checkpoint(out / "state.mvib");
    ctx.out << "resumed at iteration " << trainer.iteration() << "\n";
  }
  try {
    while (!trainer.done()) {
      trainer.step();
      const MetricsRow& m = trainer.metrics().back();
      if (m.val_acc) {
        ctx.out << "iter " << m.iter << " total " << format_double(m.total) << " val_acc "
                << format_double(*m.val_acc) << "\n";
      }
    }
  } catch (const TrainingError&) {
    write_metrics_csv(out / "metrics.csv", trainer.metrics());
    throw;
  }
  write_metrics_csv(out / "metrics.csv", trainer.metrics());
  save_params(out / "final.mvib", trainer.params());
  write_json(out / "result.json", {{"best_val_acc", trainer.best_val_acc()},
                                   {"iterations", trainer.iteration()},
                                   {"objective", str(c, "train.objective")},
                                   {"target", str(c, "train.target")}});
  ctx.out << "best validation accuracy " << format_double(trainer.best_val_acc()) << "\n";
  return kExitOk;
}

// Layers the run manifest under explicit file and flag settings.
void layer_manifest(Context& ctx, const CheckpointRef& ref, const json& file_and_flags_only) {
  if (!fs::exists(ref.manifest)) return;
  json merged = default_config();
  const json manifest = read_manifest(ref.manifest);
  for (const auto& [key, value] : manifest.at("config").items()) {
    set_value(merged, key, value, "manifest");
  }
  for (const auto& [key, value] : file_and_flags_only.items()) merged[key] = value;
  ctx.config = merged;
}

int cmd_eval(Context& ctx, const json& overrides) {
  const CheckpointRef ref = resolve_checkpoint(ctx.flag("checkpoint"));
  layer_manifest(ctx, ref, overrides);
  const json& c = ctx.config;
  const fs::path out = ctx.out_dir();
  const ModelParams params = load_params(ref.params);
  const TrainConfig config = train_config(c);
  const DataSet data = load_data(str(c, "data.dir"));
  const std::string target = str(c, "train.target");
  const Domain& test = find_domain(data.domains, target);
  std::vector<Domain> sources;
  for (const auto& d : data.domains) {
    if (d.id != target) sources.push_back(d);
  }
  const Objective objective = params.dense_head ? Objective::kErm : config.objective;
  PredictOptions options = predict_options_for(objective, config);
  options.repeats = static_cast<int>(integer(c, "eval.repeats", 1));
  options.export_draws = static_cast<std::size_t>(integer(c, "eval.export_draws", 0));
  options.seed = config.seed;
  const auto records = predict(params, sources, test.data, options);
  write_csv(out / "uncertainty.csv", [&](std::ostream& os) { write_uncertainty_csv(os, records); });
  std::vector<std::size_t> predicted, labels;
  for (const auto& r : records) {
    predicted.push_back(r.predicted);
    labels.push_back(r.true_label);
  }
  const double acc = accuracy(records, test.num_classes);
  write_json(out / "eval.json", {{"objective", objective_name(objective)},
                                 {"target", target},
                                 {"accuracy", acc},
                                 {"micro_accuracy", micro_accuracy(predicted, labels)},
                                 {"samples", records.size()},
                                 {"repeats", options.repeats}});
  ctx.out << target << " accuracy " << format_double(acc) << "\n";
  return kExitOk;
}

ExperimentOptions experiment_options(Context& ctx, const DataSet& data) {
  const json& c = ctx.config;
  ExperimentOptions o;
  o.base = train_config(c);
  o.seeds.clear();
  const long long n = integer(c, "experiment.seeds", 1);
  for (long long s = 1; s <= n; ++s) o.seeds.push_back(static_cast<std::uint64_t>(s));
  o.targets = split_list(str(c, "experiment.targets"));
  if (o.targets.empty()) o.targets = domain_ids(data.domains);
  o.validation_fraction = num(c, "train.validation_fraction");
  o.repeats = static_cast<int>(integer(c, "eval.repeats", 1));
  o.jobs = static_cast<int>(integer(c, "experiment.jobs", 1));
  o.progress = [&ctx](const std::string& msg) { ctx.out << msg << "\n" << std::flush; };
  return o;
}

int cmd_ablate(Context& ctx) {
  const fs::path out = ctx.out_dir();
  const DataSet data = load_data(str(ctx.config, "data.dir"));
  const ExperimentOptions options = experiment_options(ctx, data);
  std::vector<Objective> objectives;
  for (const auto& name : split_list(str(ctx.config, "ablate.objectives"))) objectives.push_back(parse_objective(name));
  write_manifest(out, "ablate", ctx.config, data);
  const auto rows = run_ablation(data.domains, objectives, options);
  write_csv(out / "ablation.csv", [&](std::ostream& os) { write_ablation_csv(os, rows); });
  return kExitOk;
}

int cmd_sweep(Context& ctx) {
  const fs::path out = ctx.out_dir();
  const DataSet data = load_data(str(ctx.config, "data.dir"));
  const ExperimentOptions options = experiment_options(ctx, data);
  const SweepAxis axis = parse_sweep_axis(str(ctx.config, "sweep.axis"));
  std::vector<double> values;
  for (const auto& v : split_list(str(ctx.config, "sweep.values"))) {
    values.push_back(parse_flag_value(json(0.0), "values", v).get<double>());
  }
  write_manifest(out, "sweep", ctx.config, data);
  const auto rows = run_sweep(data.domains, axis, values, options);
  write_csv(out / "sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, rows); });
  return kExitOk;
}

int cmd_infoplane(Context& ctx, const json& overrides) {
  const fs::path dir = ctx.flag("checkpoints");
  if (dir.empty() || !fs::is_directory(dir)) throw DataError("missing checkpoint directory '" + dir.string() + "'");
  CheckpointRef ref{dir / "best.mvib", dir / "manifest.json"};
  layer_manifest(ctx, ref, overrides);
  const json& c = ctx.config;
  const fs::path out = ctx.out_dir();

  std::vector<std::pair<int, fs::path>> snapshots;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("params_") && name.ends_with(".mvib")) {
      snapshots.emplace_back(std::stoi(name.substr(7, name.size() - 12)), entry.path());
    }
  }
  std::sort(snapshots.begin(), snapshots.end());
  if (snapshots.size() < 2) {
    throw DataError("need at least two params_*.mvib snapshots in " + dir.string() + " (train --snapshot-every)");
  }
  std::vector<std::pair<int, ModelParams>> history;
  for (const auto& [iter, path] : snapshots) history.emplace_back(iter, load_params(path));

  const DataSet data = load_data(str(c, "data.dir"));
  std::string probe_id = str(c, "infoplane.domain");
  if (probe_id.empty()) probe_id = str(c, "train.target");
  const Domain& probe_domain = find_domain(data.domains, probe_id);
  const auto seed = static_cast<std::uint64_t>(integer(c, "train.seed", 0));
  const LabeledImages probe =
      info_plane_probe(probe_domain, static_cast<std::size_t>(integer(c, "infoplane.probe", 2)), seed);

  InfoPlaneOptions options;
  options.bins = static_cast<std::size_t>(integer(c, "infoplane.bins", 2));
  options.z_draws = static_cast<int>(integer(c, "infoplane.z_draws", 1));
  options.seed = seed;
  const auto points = info_plane(history, probe, options);
  write_csv(out / "infoplane.csv", [&](std::ostream& os) { write_infoplane_csv(os, points); });
  ctx.out << "wrote " << points.size() << " information-plane points\n";
  return kExitOk;
}

int cmd_export_embeddings(Context& ctx, const json& overrides) {
  const CheckpointRef ref = resolve_checkpoint(ctx.flag("checkpoint"));
  layer_manifest(ctx, ref, overrides);
  const fs::path out = ctx.out_dir();
  const ModelParams params = load_params(ref.params);
  const DataSet data = load_data(str(ctx.config, "data.dir"));
  write_csv(out / "embeddings.csv", [&](std::ostream& os) { export_embeddings(os, params, data.domains); });
  return kExitOk;
}

// Flag registration -------------------------------------------------------------

struct Registry {
  // flag name -> config key ("" for command-local flags)
  std::vector<std::tuple<CLI::Option*, std::string, std::string>> options;
  std::map<std::string, std::string> values;
  std::map<std::string, bool> switches;
};

void keyed(CLI::App* cmd, Registry& r, const std::string& flag, const std::string& key, const std::string& help) {
  auto& slot = r.values[flag];
  r.options.emplace_back(cmd->add_option("--" + flag, slot, help), flag, key);
}

void local(CLI::App* cmd, Registry& r, const std::string& flag, const std::string& help) { keyed(cmd, r, flag, "", help); }

void toggle(CLI::App* cmd, Registry& r, const std::string& flag, const std::string& help) {
  bool& slot = r.switches[flag];
  r.options.emplace_back(cmd->add_flag("--" + flag, slot, help), flag, "");
}

void common(CLI::App* cmd, Registry& r) {
  local(cmd, r, "config", "JSON file of flat dotted keys");
  local(cmd, r, "out", "output directory");
  keyed(cmd, r, "data", "data.dir", "directory holding index.json and domain files");
}

void train_flags(CLI::App* cmd, Registry& r) {
  keyed(cmd, r, "objective", "train.objective", "erm|baseline|vib|metavib");
  keyed(cmd, r, "target", "train.target", "held-out domain id");
  keyed(cmd, r, "beta", "train.beta", "bottleneck weight in [0, 1]");
  keyed(cmd, r, "lz", "train.lz", "latent samples per input");
  keyed(cmd, r, "lpsi", "train.lpsi", "classifier samples per class");
  keyed(cmd, r, "kl-direction", "train.kl_direction", "forward|reverse");
  keyed(cmd, r, "lr", "train.lr", "Adam learning rate");
  keyed(cmd, r, "iters", "train.iters", "training iterations");
  keyed(cmd, r, "batch", "train.batch", "samples per domain per episode");
  keyed(cmd, r, "eval-every", "train.eval_every", "validation interval");
  keyed(cmd, r, "seed", "train.seed", "run seed");
  keyed(cmd, r, "validation-fraction", "train.validation_fraction", "share of each source held for validation");
  keyed(cmd, r, "snapshot-every", "train.snapshot_every", "parameter snapshot interval (0 = off)");
}

void experiment_flags(CLI::App* cmd, Registry& r) {
  train_flags(cmd, r);
  keyed(cmd, r, "seeds", "experiment.seeds", "number of seeds (1..N)");
  keyed(cmd, r, "targets", "experiment.targets", "comma-separated target ids (default: all)");
  keyed(cmd, r, "jobs", "experiment.jobs", "concurrent runs");
  keyed(cmd, r, "repeats", "eval.repeats", "prediction repeats");
}

}  // namespace

std::string git_blob_hash(const std::string& content) {
  std::string header = "blob " + std::to_string(content.size());
  header.push_back('\0');
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, header.data(), header.size());
  EVP_DigestUpdate(ctx, content.data(), content.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[md[i] >> 4]);
    out.push_back(kHex[md[i] & 15]);
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta variational information bottleneck for domain generalization", "metavib"};
  app.require_subcommand(1);
  std::map<std::string, Registry> registries;

  auto* gen = app.add_subcommand("gen-data", "build rotation domains from IDX files or synthetic glyphs");
  auto& rg = registries["gen-data"];
  local(gen, rg, "config", "JSON file of flat dotted keys");
  local(gen, rg, "out", "output directory (default: data.dir)");
  toggle(gen, rg, "synthetic", "use procedural glyphs instead of IDX files");
  keyed(gen, rg, "images", "data.images", "IDX image file");
  keyed(gen, rg, "labels", "data.labels", "IDX label file");
  keyed(gen, rg, "seed", "data.seed", "sampling seed");
  keyed(gen, rg, "per-domain", "data.per_domain", "samples per domain");
  keyed(gen, rg, "classes", "data.classes", "class count");
  keyed(gen, rg, "noise", "data.noise", "glyph pixel noise");

  auto* train = app.add_subcommand("train", "train one model on a leave-one-domain-out split");
  auto& rt = registries["train"];
  common(train, rt);
  train_flags(train, rt);
  local(train, rt, "replay", "re-run the configuration of a manifest.json");
  toggle(train, rt, "resume", "continue from <out>/state.mvib when present");

  auto* eval = app.add_subcommand("eval", "predict the held-out domain and export uncertainty.csv");
  auto& re = registries["eval"];
  common(eval, re);
  local(eval, re, "checkpoint", "run directory or parameter file");
  keyed(eval, re, "target", "train.target", "held-out domain id");
  keyed(eval, re, "objective", "train.objective", "objective the checkpoint was trained with");
  keyed(eval, re, "lz", "train.lz", "latent samples per input");
  keyed(eval, re, "lpsi", "train.lpsi", "classifier samples per class");
  keyed(eval, re, "seed", "train.seed", "prediction seed");
  keyed(eval, re, "repeats", "eval.repeats", "prediction repeats");

  auto* ablate = app.add_subcommand("ablate", "compare objectives across seeds and targets");
  auto& ra = registries["ablate"];
  common(ablate, ra);
  experiment_flags(ablate, ra);
  keyed(ablate, ra, "objectives", "ablate.objectives", "comma-separated objectives");

  auto* sweep = app.add_subcommand("sweep", "accuracy as a function of beta or lz");
  auto& rs = registries["sweep"];
  common(sweep, rs);
  experiment_flags(sweep, rs);
  keyed(sweep, rs, "axis", "sweep.axis", "beta|lz");
  keyed(sweep, rs, "values", "sweep.values", "comma-separated axis values");

  auto* info = app.add_subcommand("infoplane", "information-plane estimates over parameter snapshots");
  auto& ri = registries["infoplane"];
  common(info, ri);
  local(info, ri, "checkpoints", "run directory with params_*.mvib snapshots");
  keyed(info, ri, "bins", "infoplane.bins", "equal-width bins per unit");
  keyed(info, ri, "z-draws", "infoplane.z_draws", "latent draws per probe sample");
  keyed(info, ri, "probe", "infoplane.probe", "probe batch size");
  keyed(info, ri, "domain", "infoplane.domain", "probe domain (default: the run's target)");

  auto* embed = app.add_subcommand("export-embeddings", "latent means of every sample as CSV");
  auto& rx = registries["export-embeddings"];
  common(embed, rx);
  local(embed, rx, "checkpoint", "run directory or parameter file");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    Registry& reg = registries.at(cmd->get_name());
    Context ctx{default_config(), {}, out, err};
    // Settings from --config and flags only, so run manifests can sit underneath.
    json overrides = json::object();
    for (const auto& [opt, flag, key] : reg.options) {
      if (opt->count() == 0) continue;
      ctx.flags[flag] = reg.switches.contains(flag) ? "true" : reg.values.at(flag);
    }
    if (ctx.given("config")) apply_file(overrides, ctx.flag("config"));
    for (const auto& [opt, flag, key] : reg.options) {
      if (key.empty() || opt->count() == 0) continue;
      overrides[key] = parse_flag_value(default_config().at(key), flag, reg.values.at(flag));
    }
    for (const auto& [key, value] : overrides.items()) ctx.config[key] = value;

    const std::string name = cmd->get_name();
    if (name == "gen-data") return cmd_gen_data(ctx);
    if (name == "train") return cmd_train(ctx);
    if (name == "eval") return cmd_eval(ctx, overrides);
    if (name == "ablate") return cmd_ablate(ctx);
    if (name == "sweep") return cmd_sweep(ctx);
    if (name == "infoplane") return cmd_infoplane(ctx, overrides);
    return cmd_export_embeddings(ctx, overrides);
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const EvaluationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace metavib
