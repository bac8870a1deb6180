#include "tlab/experiment.hpp"

#include "tlab/csv.hpp"
#include "tlab/serialize.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

namespace fs = std::filesystem;
using nlohmann::json;

namespace tlab {

namespace {

constexpr const char* kVersion = "0.1.0";

[[noreturn]] void bad(const std::string& msg) { throw ConfigError(msg); }

// --- json plumbing ----------------------------------------------------------

void check_keys(const json& obj, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) bad(ctx + ": expected a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) bad(ctx + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
T get_or(const json& obj, const std::string& ctx, const char* key, T fallback) {
  if (!obj.contains(key) || obj.at(key).is_null()) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    bad(ctx + "." + key + ": " + e.what());
  }
}

const json& require(const json& obj, const std::string& ctx, const char* key) {
  if (!obj.contains(key)) bad(ctx + ": missing required key '" + key + "'");
  return obj.at(key);
}

// --- enum names -------------------------------------------------------------

const char* loss_kind_name(LossKind k) {
  return k == LossKind::hinge ? "hinge" : "cross_entropy";
}

LossKind parse_loss_kind(const std::string& id) {
  if (id == "cross_entropy") return LossKind::cross_entropy;
  if (id == "hinge") return LossKind::hinge;
  bad("unknown training loss: '" + id + "' (expected cross_entropy or hinge)");
}

const char* family_name(ModelFamily f) {
  switch (f) {
    case ModelFamily::linear: return "linear";
    case ModelFamily::mlp: return "mlp";
    case ModelFamily::cnn: return "cnn";
  }
  return "?";
}

// --- member specs -----------------------------------------------------------

json member_to_json(const ZooMemberSpec& m) {
  json j;
  j["arch"] = m.arch;
  j["weight_decay"] = m.weight_decay;
  j["transform"] = to_string(m.transform);
  j["max_norm"] = m.max_norm ? json(*m.max_norm) : json(nullptr);
  return j;
}

void parse_members(const json& arr, const std::string& ctx, std::vector<ZooMemberSpec>* out) {
  if (!arr.is_array()) bad(ctx + ": expected an array of member specs");
  for (size_t i = 0; i < arr.size(); ++i) {
    const std::string mctx = ctx + "[" + std::to_string(i) + "]";
    const json& jm = arr[i];
    check_keys(jm, mctx, {"arch", "weight_decay", "transform", "max_norm", "count"});
    ZooMemberSpec m;
    const json& aj = require(jm, mctx, "arch");
    if (!aj.is_string()) bad(mctx + ".arch: expected a string");
    m.arch = aj.get<std::string>();
    if (m.arch.empty()) bad(mctx + ".arch: empty");
    m.weight_decay = get_or<double>(jm, mctx, "weight_decay", 0.0);
    if (m.weight_decay < 0) bad(mctx + ".weight_decay: negative");
    m.transform = parse_transform(get_or<std::string>(jm, mctx, "transform", "none"));
    if (jm.contains("max_norm") && !jm.at("max_norm").is_null()) {
      double cap = get_or<double>(jm, mctx, "max_norm", 0.0);
      if (cap <= 0) bad(mctx + ".max_norm: must be positive");
      m.max_norm = cap;
    }
    int count = get_or<int>(jm, mctx, "count", 1);
    if (count < 1) bad(mctx + ".count: must be >= 1");
    for (int c = 0; c < count; ++c) out->push_back(m);
  }
}

// --- sweep ------------------------------------------------------------------

bool integral(double v) { return v == std::floor(v); }

}  // namespace

SweepAxis parse_sweep_axis(const std::string& id) {
  if (id == "steps") return SweepAxis::steps;
  if (id == "n_models") return SweepAxis::n_models;
  if (id == "weight_decay") return SweepAxis::weight_decay;
  if (id == "max_norm") return SweepAxis::max_norm;
  if (id == "epsilon") return SweepAxis::epsilon;
  bad("unknown sweep axis: '" + id +
      "' (expected steps, n_models, weight_decay, max_norm or epsilon)");
}

const char* to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::steps: return "steps";
    case SweepAxis::n_models: return "n_models";
    case SweepAxis::weight_decay: return "weight_decay";
    case SweepAxis::max_norm: return "max_norm";
    case SweepAxis::epsilon: return "epsilon";
  }
  return "?";
}

// --- config validation ------------------------------------------------------

void ExperimentConfig::validate() const {
  (void)parse_dataset_format(dataset.id);
  if (dataset.pool_size < 1) bad("dataset.pool_size: must be >= 1");
  if (dataset.train_subsample < 0) bad("dataset.train_subsample: must be >= 0");
  if (!dataset.keep_classes.empty()) {
    std::set<int> seen;
    for (int c : dataset.keep_classes) {
      if (c < 0) bad("dataset.keep_classes: negative class id");
      if (!seen.insert(c).second) bad("dataset.keep_classes: duplicate class id");
    }
    if (dataset.keep_classes.size() < 2) bad("dataset.keep_classes: need at least two classes");
  }
  if (dataset.synthesize) {
    const SynthConfig& s = *dataset.synthesize;
    if (s.n_train < 1 || s.n_test < 1) bad("dataset.synthesize: sample counts must be >= 1");
    if (s.noise < 0) bad("dataset.synthesize.noise: negative");
    if (s.max_shift < 0) bad("dataset.synthesize.max_shift: negative");
  }
  if (train.epochs < 0) bad("train.epochs: negative");
  if (train.lr <= 0) bad("train.lr: must be positive");
  if (train.batch < 1) bad("train.batch: must be >= 1");
  if (train.loss == LossKind::hinge && dataset.keep_classes.size() != 2)
    bad("train.loss=hinge needs dataset.keep_classes with exactly two classes");
  if (surrogate.empty()) bad("surrogate: need at least one member spec");
  if (target.empty()) bad("target: need at least one member spec");
  attack.validate();
  if (attack.steps < 1) bad("attack.steps: must be >= 1 for an experiment run");
  if (smoothing < 0 || smoothing >= 1) bad("metrics.smoothing: must be in [0, 1)");

  if (sweep.values.empty()) bad("sweep.values: must be non-empty");
  for (size_t i = 1; i < sweep.values.size(); ++i)
    if (sweep.values[i] <= sweep.values[i - 1])
      bad("sweep.values: must be strictly ascending");
  for (double v : sweep.values) {
    switch (sweep.axis) {
      case SweepAxis::steps:
        if (!integral(v) || v < 1) bad("sweep.values: steps must be integers >= 1");
        break;
      case SweepAxis::n_models:
        if (!integral(v) || v < 1) bad("sweep.values: n_models must be integers >= 1");
        if (v > double(surrogate.size()))
          bad("sweep.values: n_models exceeds the surrogate zoo size");
        break;
      case SweepAxis::weight_decay:
        if (v < 0) bad("sweep.values: weight_decay must be >= 0");
        break;
      case SweepAxis::max_norm:
        if (v <= 0) bad("sweep.values: max_norm caps must be positive");
        break;
      case SweepAxis::epsilon:
        if (v < 0) bad("sweep.values: epsilon must be >= 0");
        break;
    }
  }

  if (rademacher.enabled) {
    if (rademacher.zoo != "surrogate" && rademacher.zoo != "target")
      bad("rademacher.zoo: expected 'surrogate' or 'target'");
    if (rademacher.draws < 1) bad("rademacher.draws: must be >= 1");
    if (rademacher.restarts < 1) bad("rademacher.restarts: must be >= 1");
    if (rademacher.inner_steps < 0) bad("rademacher.inner_steps: negative");
    if (rademacher.max_anchors < 1) bad("rademacher.max_anchors: must be >= 1");
    size_t n = rademacher.zoo == "target" ? target.size() : surrogate.size();
    if (rademacher.exhaustive && n > 20)
      bad("rademacher.exhaustive: zoo too large for 2^N sign enumeration (N > 20)");
  }
  if (out.empty()) bad("out: empty output directory");
  if (jobs < 1) bad("jobs: must be >= 1");
}

// --- config echo / parse ----------------------------------------------------

json experiment_config_json(const ExperimentConfig& c) {
  json j;
  json d;
  d["id"] = c.dataset.id;
  d["dir"] = c.dataset.dir;
  if (c.dataset.synthesize) {
    const SynthConfig& s = *c.dataset.synthesize;
    d["synthesize"] = json{{"n_train", s.n_train},
                           {"n_test", s.n_test},
                           {"noise", s.noise},
                           {"max_shift", s.max_shift},
                           {"seed", s.seed}};
  } else {
    d["synthesize"] = nullptr;
  }
  d["train_subsample"] = c.dataset.train_subsample;
  d["pool_size"] = c.dataset.pool_size;
  d["keep_classes"] = c.dataset.keep_classes;
  j["dataset"] = d;

  j["seed"] = c.seed;
  j["train"] = json{{"epochs", c.train.epochs},
                    {"lr", c.train.lr},
                    {"batch", c.train.batch},
                    {"loss", loss_kind_name(c.train.loss)}};
  json sur = json::array(), tgt = json::array();
  for (const ZooMemberSpec& m : c.surrogate) sur.push_back(member_to_json(m));
  for (const ZooMemberSpec& m : c.target) tgt.push_back(member_to_json(m));
  j["surrogate"] = sur;
  j["target"] = tgt;

  j["attack"] = json{{"norm", to_string(c.attack.norm)},
                     {"epsilon", c.attack.epsilon},
                     {"alpha", c.attack.alpha},
                     {"steps", c.attack.steps},
                     {"momentum", c.attack.momentum},
                     {"fusion", to_string(c.attack.fusion)},
                     {"craft", to_string(c.attack.craft)}};
  j["metrics"] = json{{"smoothing", c.smoothing}};
  j["sweep"] = json{{"axis", to_string(c.sweep.axis)}, {"values", c.sweep.values}};
  j["rademacher"] = json{{"enabled", c.rademacher.enabled},
                         {"zoo", c.rademacher.zoo},
                         {"draws", c.rademacher.draws},
                         {"restarts", c.rademacher.restarts},
                         {"inner_steps", c.rademacher.inner_steps},
                         {"exhaustive", c.rademacher.exhaustive},
                         {"max_anchors", c.rademacher.max_anchors}};
  j["out"] = c.out;
  j["cache"] = c.cache;
  j["jobs"] = c.jobs;
  return j;
}

ExperimentConfig parse_experiment_config(const json& j) {
  ExperimentConfig c = ExperimentConfig{};
  c.dataset.dir.clear();
  check_keys(j, "config",
             {"dataset", "seed", "train", "surrogate", "target", "attack", "metrics", "sweep",
              "rademacher", "out", "cache", "jobs"});

  if (j.contains("dataset")) {
    const json& d = j.at("dataset");
    check_keys(d, "dataset",
               {"id", "dir", "synthesize", "train_subsample", "pool_size", "keep_classes"});
    c.dataset.id = get_or<std::string>(d, "dataset", "id", c.dataset.id);
    c.dataset.dir = get_or<std::string>(d, "dataset", "dir", "");
    if (d.contains("synthesize") && !d.at("synthesize").is_null()) {
      const json& s = d.at("synthesize");
      check_keys(s, "dataset.synthesize", {"n_train", "n_test", "noise", "max_shift", "seed"});
      SynthConfig sc;
      sc.n_train = get_or<long>(s, "dataset.synthesize", "n_train", sc.n_train);
      sc.n_test = get_or<long>(s, "dataset.synthesize", "n_test", sc.n_test);
      sc.noise = get_or<double>(s, "dataset.synthesize", "noise", sc.noise);
      sc.max_shift = get_or<int>(s, "dataset.synthesize", "max_shift", sc.max_shift);
      sc.seed = get_or<uint64_t>(s, "dataset.synthesize", "seed", sc.seed);
      c.dataset.synthesize = sc;
    }
    c.dataset.train_subsample =
        get_or<long>(d, "dataset", "train_subsample", c.dataset.train_subsample);
    c.dataset.pool_size = get_or<long>(d, "dataset", "pool_size", c.dataset.pool_size);
    c.dataset.keep_classes =
        get_or<std::vector<int>>(d, "dataset", "keep_classes", {});
  }

  c.seed = get_or<uint64_t>(j, "config", "seed", c.seed);

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "train", {"epochs", "lr", "batch", "loss"});
    c.train.epochs = get_or<int>(t, "train", "epochs", c.train.epochs);
    c.train.lr = get_or<double>(t, "train", "lr", c.train.lr);
    c.train.batch = get_or<int>(t, "train", "batch", c.train.batch);
    c.train.loss = parse_loss_kind(get_or<std::string>(t, "train", "loss", "cross_entropy"));
  }

  c.surrogate.clear();
  c.target.clear();
  parse_members(require(j, "config", "surrogate"), "surrogate", &c.surrogate);
  parse_members(require(j, "config", "target"), "target", &c.target);

  if (j.contains("attack")) {
    const json& a = j.at("attack");
    check_keys(a, "attack",
               {"norm", "epsilon", "alpha", "steps", "momentum", "fusion", "craft"});
    c.attack.norm = parse_ball_norm(get_or<std::string>(a, "attack", "norm", "linf"));
    c.attack.epsilon = get_or<double>(a, "attack", "epsilon", c.attack.epsilon);
    c.attack.alpha = get_or<double>(a, "attack", "alpha", c.attack.alpha);
    c.attack.steps = get_or<int>(a, "attack", "steps", c.attack.steps);
    c.attack.momentum = get_or<double>(a, "attack", "momentum", c.attack.momentum);
    c.attack.fusion = parse_fusion(get_or<std::string>(a, "attack", "fusion", "loss_avg"));
    c.attack.craft =
        parse_craft_loss(get_or<std::string>(a, "attack", "craft", "cross_entropy"));
  }

  if (j.contains("metrics")) {
    const json& mj = j.at("metrics");
    check_keys(mj, "metrics", {"smoothing"});
    c.smoothing = get_or<double>(mj, "metrics", "smoothing", c.smoothing);
  }

  if (j.contains("sweep")) {
    const json& s = j.at("sweep");
    check_keys(s, "sweep", {"axis", "values"});
    c.sweep.axis = parse_sweep_axis(get_or<std::string>(s, "sweep", "axis", "steps"));
    c.sweep.values = get_or<std::vector<double>>(s, "sweep", "values", {});
  } else {
    c.sweep.axis = SweepAxis::steps;
    c.sweep.values.clear();
    for (int v = 1; v <= c.attack.steps; ++v) c.sweep.values.push_back(v);
  }

  if (j.contains("rademacher")) {
    const json& r = j.at("rademacher");
    check_keys(r, "rademacher",
               {"enabled", "zoo", "draws", "restarts", "inner_steps", "exhaustive",
                "max_anchors"});
    c.rademacher.enabled = get_or<bool>(r, "rademacher", "enabled", false);
    c.rademacher.zoo = get_or<std::string>(r, "rademacher", "zoo", "surrogate");
    c.rademacher.draws = get_or<int>(r, "rademacher", "draws", c.rademacher.draws);
    c.rademacher.restarts = get_or<int>(r, "rademacher", "restarts", c.rademacher.restarts);
    c.rademacher.inner_steps =
        get_or<int>(r, "rademacher", "inner_steps", c.rademacher.inner_steps);
    c.rademacher.exhaustive = get_or<bool>(r, "rademacher", "exhaustive", false);
    c.rademacher.max_anchors =
        get_or<int>(r, "rademacher", "max_anchors", c.rademacher.max_anchors);
  }

  c.out = get_or<std::string>(j, "config", "out", c.out);
  c.cache = get_or<std::string>(j, "config", "cache", "");
  c.jobs = get_or<int>(j, "config", "jobs", c.jobs);

  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) bad("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    bad("config file " + path + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

ExperimentConfig default_experiment_config() {
  ExperimentConfig c;
  c.dataset.id = "mnist";
  c.dataset.dir = "data/synthetic-mnist";
  c.dataset.synthesize = SynthConfig{};
  c.dataset.train_subsample = 10000;
  c.dataset.pool_size = 1000;
  c.seed = 1;
  c.train.epochs = 10;
  c.train.lr = 1e-3;
  c.train.batch = 64;
  const char* archs[6] = {"mlp-d1-h128",  "mlp-d2-h128",     "mlp-d3-h128",
                          "cnn-d1-c16", "cnn-d2-c16.32", "cnn-d3-c16.32.64"};
  for (const char* a : archs) {
    ZooMemberSpec m;
    m.arch = a;
    m.weight_decay = 1e-4;
    c.surrogate.push_back(m);
    c.target.push_back(m);
  }
  c.sweep.axis = SweepAxis::steps;
  for (int v = 1; v <= c.attack.steps; ++v) c.sweep.values.push_back(v);
  c.out = "runs/default";
  c.validate();
  return c;
}

// --- hashing ----------------------------------------------------------------

namespace {

/// Execution-locality knobs (paths, parallelism) stay out of the hash so one
/// experiment keeps its identity across machines and output directories.
json hashable_config(const ExperimentConfig& c) {
  json j = experiment_config_json(c);
  j.erase("out");
  j.erase("cache");
  j.erase("jobs");
  return j;
}

}  // namespace

std::string config_hash(const ExperimentConfig& c) {
  return hex64(fnv1a64(hashable_config(c).dump()));
}

std::string zoo_cache_key(const ExperimentConfig& c, ZooRole role,
                          const std::vector<ZooMemberSpec>& specs) {
  json j;
  json full = experiment_config_json(c);
  j["dataset"] = full.at("dataset");
  j["dataset"].erase("pool_size");  // the pool never feeds training
  j["train"] = full.at("train");
  j["seed"] = c.seed;
  j["role"] = to_string(role);
  json arr = json::array();
  for (const ZooMemberSpec& m : specs) arr.push_back(member_to_json(m));
  j["members"] = arr;
  return hex64(fnv1a64(j.dump()));
}

// --- manifest ---------------------------------------------------------------

bool RunManifest::ok() const {
  for (const StageStatus& s : stages)
    if (s.status == "failed") return false;
  return true;
}

const StageStatus* RunManifest::find(const std::string& name) const {
  for (const StageStatus& s : stages)
    if (s.name == name) return &s;
  return nullptr;
}

int manifest_exit_code(const RunManifest& m) {
  for (const StageStatus& s : m.stages) {
    if (s.status != "failed") continue;
    if (s.error_kind == "config") return 2;
    if (s.error_kind == "data") return 3;
    return 4;
  }
  return 0;
}

json manifest_json(const RunManifest& m) {
  json j;
  j["config_hash"] = m.config_hash;
  j["config"] = m.config;
  j["dataset"] = m.dataset;
  j["zoos"] = m.zoos;
  json stages = json::array();
  for (const StageStatus& s : m.stages) {
    stages.push_back(json{{"name", s.name},
                          {"status", s.status},
                          {"note", s.note},
                          {"error", s.error},
                          {"error_kind", s.error_kind},
                          {"seconds", s.seconds}});
  }
  j["stages"] = stages;
  j["artifacts"] = m.artifacts;
  j["versions"] = m.versions;
  j["wall_clock_sec"] = m.wall_clock_sec;
  return j;
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  try {
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    m.dataset = j.value("dataset", json());
    m.zoos = j.value("zoos", json());
    for (const json& js : j.at("stages")) {
      StageStatus s;
      s.name = js.at("name").get<std::string>();
      s.status = js.at("status").get<std::string>();
      s.note = js.value("note", "");
      s.error = js.value("error", "");
      s.error_kind = js.value("error_kind", "");
      s.seconds = js.value("seconds", 0.0);
      m.stages.push_back(s);
    }
    m.artifacts = j.value("artifacts", std::vector<std::string>{});
    m.versions = j.value("versions", std::map<std::string, std::string>{});
    m.wall_clock_sec = j.value("wall_clock_sec", 0.0);
  } catch (const json::exception& e) {
    throw DataError(ParseErrc::bad_magic, std::string("not a run manifest: ") + e.what());
  }
  return m;
}

RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError(ParseErrc::missing_file, "cannot open manifest: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(ParseErrc::bad_magic,
                    "manifest " + path + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j);
}

// --- ingest -----------------------------------------------------------------

namespace {

std::string resolve_data_dir(const DatasetSection& d) {
  if (!d.dir.empty()) return d.dir;
  const char* root = std::getenv(kDataRootEnv);
  if (root != nullptr && *root != '\0') return std::string(root) + "/" + d.id;
  bad("dataset.dir is empty and $" + std::string(kDataRootEnv) + " is unset");
}

bool archives_present(const std::string& dir, DatasetFormat f) {
  switch (f) {
    case DatasetFormat::mnist:
    case DatasetFormat::fashion_mnist:
      return fs::exists(fs::path(dir) / "train-images-idx3-ubyte");
    case DatasetFormat::cifar10: return fs::exists(fs::path(dir) / "data_batch_1.bin");
    case DatasetFormat::cifar100: return fs::exists(fs::path(dir) / "train.bin");
  }
  return false;
}

BlobSpec blob_spec_for(DatasetFormat f, const SynthConfig& s) {
  BlobSpec b;
  switch (f) {
    case DatasetFormat::mnist:
    case DatasetFormat::fashion_mnist:
      b.num_classes = 10;
      b.channels = 1;
      b.height = b.width = 28;
      break;
    case DatasetFormat::cifar10:
      b.num_classes = 10;
      b.channels = 3;
      b.height = b.width = 32;
      break;
    case DatasetFormat::cifar100:
      b.num_classes = 100;
      b.channels = 3;
      b.height = b.width = 32;
      break;
  }
  b.noise = s.noise;
  b.max_shift = s.max_shift;
  return b;
}

LabeledDataset filter_classes(const LabeledDataset& ds, const std::vector<int>& keep) {
  if (keep.empty()) return ds;
  std::vector<int> idx;
  std::vector<int> new_label(static_cast<size_t>(ds.num_classes), -1);
  for (size_t k = 0; k < keep.size(); ++k) {
    if (keep[k] >= ds.num_classes)
      throw DataError(ParseErrc::label_out_of_range,
                      "keep_classes names class " + std::to_string(keep[k]) + " but " +
                          ds.name + " has " + std::to_string(ds.num_classes));
    new_label[size_t(keep[k])] = int(k);
  }
  for (long i = 0; i < ds.size(); ++i)
    if (new_label[size_t(ds.labels[size_t(i)])] >= 0) idx.push_back(int(i));
  LabeledDataset out = subset(ds, idx);
  for (int& l : out.labels) l = new_label[size_t(l)];
  out.num_classes = int(keep.size());
  return out;
}

}  // namespace

IngestedData ingest_dataset(const ExperimentConfig& cfg) {
  IngestedData r;
  r.dir = resolve_data_dir(cfg.dataset);
  DatasetFormat f = parse_dataset_format(cfg.dataset.id);
  if (cfg.dataset.synthesize && !archives_present(r.dir, f)) {
    const SynthConfig& s = *cfg.dataset.synthesize;
    write_blob_dataset_dir(r.dir, f, blob_spec_for(f, s), s.n_train, s.n_test, s.seed);
    r.synthesized = true;
  }
  TrainTestPair raw = load_dataset_dir(r.dir, f);
  LabeledDataset train = filter_classes(raw.train, cfg.dataset.keep_classes);
  LabeledDataset test = filter_classes(raw.test, cfg.dataset.keep_classes);

  if (cfg.dataset.pool_size > test.size())
    throw DataError(ParseErrc::count_mismatch,
                    "attack pool of " + std::to_string(cfg.dataset.pool_size) +
                        " exceeds the test split (" + std::to_string(test.size()) + ")");
  SplitIndices sp = partition_indices(test.size(), 0, cfg.dataset.pool_size, cfg.seed);
  r.pool = subset(test, sp.attack);

  if (cfg.dataset.train_subsample > 0 && cfg.dataset.train_subsample < train.size()) {
    SplitIndices st = partition_indices(train.size(), cfg.dataset.train_subsample, 0, cfg.seed);
    r.train = subset(train, st.train);
  } else {
    r.train = train;
  }
  r.test = test;
  return r;
}

namespace {

json dataset_summary(const IngestedData& r, const ExperimentConfig& cfg) {
  return json{{"id", cfg.dataset.id},
              {"dir", r.dir},
              {"synthesized_now", r.synthesized},
              {"image_shape", r.train.image_shape},
              {"num_classes", r.train.num_classes},
              {"n_train_used", r.train.size()},
              {"n_test", r.test.size()},
              {"n_pool", r.pool.size()}};
}

// --- zoos -------------------------------------------------------------------

json zoo_summary(const Zoo& z) {
  json members = json::array();
  for (const ModelRecord& m : z.members) {
    members.push_back(json{{"arch", m.arch.describe()},
                           {"weight_decay", m.meta.weight_decay},
                           {"transform", m.meta.transform},
                           {"max_norm", m.meta.max_norm ? json(*m.meta.max_norm) : json(nullptr)},
                           {"seed", m.meta.seed},
                           {"clean_accuracy", m.clean_accuracy},
                           {"provenance", hex64(m.provenance)}});
  }
  return json{{"role", to_string(z.role)}, {"members", members}};
}

Zoo obtain_zoo(const ExperimentConfig& cfg, ZooRole role,
               const std::vector<ZooMemberSpec>& specs, const LabeledDataset& train,
               const LabeledDataset& test, const std::string& cache_dir, std::string* note) {
  const std::string key = zoo_cache_key(cfg, role, specs);
  const fs::path zdir = fs::path(cache_dir) / ("zoo-" + key);
  Zoo z;
  if (fs::exists(zdir / "zoo.json")) {
    z = load_zoo(zdir.string());
    if (note) *note += std::string(to_string(role)) + "=cached:" + key + " ";
  } else {
    z = build_zoo(role, specs, train, test, cfg.train, cfg.seed, cfg.jobs);
    fs::create_directories(zdir);
    save_zoo(z, zdir.string());
    if (note) *note += std::string(to_string(role)) + "=trained:" + key + " ";
  }
  for (ModelRecord& m : z.members) set_trainable(m, false);
  return z;
}

Zoo subzoo(const Zoo& z, const std::vector<int>& idx) {
  Zoo s;
  s.role = z.role;
  for (int i : idx) s.members.push_back(z.members[size_t(i)]);
  return s;
}

int transform_rank(const std::string& id) {
  if (id == "none") return 0;
  if (id == "flip") return 1;
  return 2;
}

}  // namespace

std::vector<int> ensemble_size_order(const Zoo& zoo) {
  std::vector<int> idx(static_cast<size_t>(zoo.size()));
  std::iota(idx.begin(), idx.end(), 0);
  auto key = [&](int i) {
    const ModelRecord& m = zoo.members[size_t(i)];
    int fam = m.arch.family == ModelFamily::cnn ? 1 : 0;
    int depth = m.arch.family == ModelFamily::linear ? 0 : m.arch.depth;
    return std::make_tuple(fam, depth, m.meta.weight_decay, transform_rank(m.meta.transform), i);
  };
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return key(a) < key(b); });
  return idx;
}

// --- bounds -----------------------------------------------------------------

BoundsReport bounds_report(const Zoo& zoo, const RMat& pool_X, BallNorm norm, double eps,
                           LossKind loss) {
  BoundsReport r;
  r.inputs = derive_bound_inputs(zoo, pool_X, norm, eps, loss);
  const BoundInputs& in = r.inputs;
  if (in.family == ModelFamily::linear) {
    r.linear = bound_linear(in.B, in.C_linear, in.N);
    r.mlp = bound_mlp(1, in.B, in.T, in.N);
  } else if (in.family == ModelFamily::mlp) {
    if (in.depth_l == 2)
      r.two_layer = bound_two_layer(in.B, in.head_norm, in.unit_cap, in.hidden_m, in.N);
    r.mlp = bound_mlp(in.depth_l, in.B, in.T, in.N);
  }
  return r;
}

json bounds_report_json(const BoundsReport& r) {
  const BoundInputs& in = r.inputs;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return json{{"N", in.N},
              {"family", family_name(in.family)},
              {"depth_l", in.depth_l},
              {"B", in.B},
              {"C_linear", in.C_linear},
              {"head_norm", in.head_norm},
              {"unit_cap", in.unit_cap},
              {"hidden_m", in.hidden_m},
              {"T", in.T},
              {"bias_free", in.bias_free},
              {"num_classes", in.num_classes},
              {"loss", loss_kind_name(in.loss)},
              {"bounds", json{{"linear", opt(r.linear)},
                              {"two_layer", opt(r.two_layer)},
                              {"mlp", opt(r.mlp)}}}};
}

// --- metric computations ----------------------------------------------------

namespace {

Array softmax_of(const Eigen::RowVectorXd& logits) {
  Array z = logits.transpose().array();
  Array e = (z - z.maxCoeff()).exp();
  return e / e.sum();
}

/// [members, examples] correct-class predictions read back from recorded
/// traces (step clamped per trace, mirroring points_at_step).  Predictions
/// are softmax probabilities, the paper's [0,1] member outputs; single-score
/// zoos fall back to the raw margin score.
RMat trace_prob_table(const std::vector<AttackTrace>& traces, int step) {
  if (traces.empty()) return RMat(0, 0);
  long n = traces[0].steps.at(0).correct_logit.size();
  RMat t(n, long(traces.size()));
  for (size_t e = 0; e < traces.size(); ++e) {
    const std::vector<AttackStep>& st = traces[e].steps;
    int s = std::min<int>(step, int(st.size()) - 1);
    const AttackStep& at = st[size_t(s)];
    if (at.logits.cols() < 2) {
      t.col(long(e)) = at.correct_logit;
      continue;
    }
    int label = traces[e].label;
    for (long i = 0; i < at.logits.rows(); ++i)
      t(i, long(e)) = softmax_of(at.logits.row(i))[label];
  }
  return t;
}

struct StepMetrics {
  AsrResult asr;
  double mse_loss = 0;
  double variance = 0;
};

StepMetrics step_metrics(const std::vector<AttackTrace>& traces, int step, const Zoo& target,
                         const LabeledDataset& pool,
                         const std::vector<std::vector<char>>& eligible) {
  StepMetrics r;
  RMat X = points_at_step(traces, step);
  r.asr = attack_success(target, X, pool.labels, eligible);
  RMat tab = trace_prob_table(traces, step);
  r.mse_loss = mse_margin_loss(tab, 1.0);
  r.variance = prediction_variance(tab);
  return r;
}

/// Distinct surrogate weight-decay values in first-seen order, with the member
/// indices of each group (the per-lambda curves of the dynamics figures).
std::vector<std::pair<double, std::vector<int>>> lambda_groups(const Zoo& zoo) {
  std::vector<std::pair<double, std::vector<int>>> groups;
  for (int i = 0; i < zoo.size(); ++i) {
    double wd = zoo.members[size_t(i)].meta.weight_decay;
    auto it = std::find_if(groups.begin(), groups.end(),
                           [&](const auto& g) { return g.first == wd; });
    if (it == groups.end())
      groups.push_back({wd, {i}});
    else
      it->second.push_back(i);
  }
  return groups;
}

double mean_clean_accuracy(const Zoo& z) {
  double s = 0;
  for (const ModelRecord& m : z.members) s += m.clean_accuracy;
  return z.members.empty() ? 0.0 : s / double(z.members.size());
}

// --- run state and stage driver ---------------------------------------------

struct RunState {
  IngestedData data;
  Zoo surrogate, target;
  std::vector<std::vector<char>> eligible;  ///< target clean-correct mask
  AttackConfig base_attack;                 ///< steps widened for a steps sweep
  std::vector<AttackTrace> base_traces;
  std::string cache_dir;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class F>
bool run_stage(RunManifest& m, const std::string& name, bool enabled, bool deps_ok, F&& body,
               const std::string& skip_note = "not selected") {
  StageStatus s;
  s.name = name;
  if (!enabled) {
    s.status = "skipped";
    s.note = skip_note;
    m.stages.push_back(s);
    return false;
  }
  if (!deps_ok) {
    s.status = "skipped";
    s.note = "blocked by an earlier failure";
    m.stages.push_back(s);
    return false;
  }
  auto t0 = Clock::now();
  bool ok = false;
  try {
    body(s);
    s.status = "ok";
    ok = true;
  } catch (const ConfigError& e) {
    s.status = "failed";
    s.error = e.what();
    s.error_kind = "config";
  } catch (const DataError& e) {
    s.status = "failed";
    s.error = e.what();
    s.error_kind = "data";
  } catch (const std::exception& e) {
    s.status = "failed";
    s.error = e.what();
    s.error_kind = "other";
  }
  s.seconds = seconds_since(t0);
  m.stages.push_back(s);
  return ok;
}

void add_artifact(RunManifest& m, const std::string& rel) {
  if (std::find(m.artifacts.begin(), m.artifacts.end(), rel) == m.artifacts.end())
    m.artifacts.push_back(rel);
}

std::map<std::string, std::string> versions_map() {
  std::map<std::string, std::string> v;
  v["transferlab"] = kVersion;
  v["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
               "." + std::to_string(EIGEN_MINOR_VERSION);
  v["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_PATCH);
#ifdef __VERSION__
  v["compiler"] = __VERSION__;
#endif
  return v;
}

void write_manifest_file(const RunManifest& m, const std::string& out_dir) {
  std::ofstream out(fs::path(out_dir) / "run_manifest.json");
  out << manifest_json(m).dump(2) << '\n';
}

// --- stage bodies -----------------------------------------------------------

void stage_attack(const ExperimentConfig& cfg, RunState& st, RunManifest& m, StageStatus& s) {
  AttackConfig acfg = cfg.attack;
  if (cfg.sweep.axis == SweepAxis::steps)
    acfg.steps = int(cfg.sweep.values.back());
  acfg.validate();
  st.base_attack = acfg;
  st.base_traces = attack_pool(st.surrogate, st.data.pool, acfg, cfg.jobs);
  const std::string rel = "traces.csv";
  write_trace_csv(st.base_traces, acfg, (fs::path(cfg.out) / rel).string());
  add_artifact(m, rel);
  s.note = std::to_string(st.base_traces.size()) + " traces x " +
           std::to_string(acfg.steps + 1) + " records";
}

void write_dynamics_rows(CsvWriter& w, const std::vector<AttackTrace>& traces,
                         const std::vector<int>& steps, const Zoo& target,
                         const LabeledDataset& pool,
                         const std::vector<std::vector<char>>& eligible,
                         const std::string& tag) {
  for (int v : steps) {
    StepMetrics sm = step_metrics(traces, v, target, pool, eligible);
    w.row() << v << sm.asr.asr << sm.mse_loss << sm.variance << tag;
  }
}

std::vector<int> all_steps(int steps) {
  std::vector<int> v(static_cast<size_t>(steps) + 1);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

void stage_metrics(const ExperimentConfig& cfg, RunState& st, RunManifest& m, StageStatus& s) {
  const LabeledDataset& pool = st.data.pool;
  const std::vector<std::vector<char>>& eligible = st.eligible;
  long rows = 0;

  {  // dynamics.csv
    CsvWriter dyn((fs::path(cfg.out) / "dynamics.csv").string(),
                  {"step", "asr", "mse_loss", "variance", "config_tag"});
    switch (cfg.sweep.axis) {
      case SweepAxis::steps: {
        std::vector<int> report_steps;
        for (double v : cfg.sweep.values) report_steps.push_back(int(v));
        auto groups = lambda_groups(st.surrogate);
        for (const auto& [wd, idx] : groups) {
          const std::string tag = "wd=" + format_g10(wd);
          if (groups.size() == 1) {
            write_dynamics_rows(dyn, st.base_traces, report_steps, st.target, pool, eligible, tag);
          } else {
            Zoo sub = subzoo(st.surrogate, idx);
            std::vector<AttackTrace> traces = attack_pool(sub, pool, st.base_attack, cfg.jobs);
            write_dynamics_rows(dyn, traces, report_steps, st.target, pool, eligible, tag);
          }
          rows += long(report_steps.size());
        }
        break;
      }
      case SweepAxis::weight_decay: {
        for (double wd : cfg.sweep.values) {
          std::vector<ZooMemberSpec> specs = cfg.surrogate;
          for (ZooMemberSpec& sp : specs) sp.weight_decay = wd;
          Zoo zoo = obtain_zoo(cfg, ZooRole::surrogate, specs, st.data.train, st.data.test,
                               st.cache_dir, &s.note);
          std::vector<AttackTrace> traces = attack_pool(zoo, pool, st.base_attack, cfg.jobs);
          write_dynamics_rows(dyn, traces, all_steps(st.base_attack.steps), st.target, pool,
                              eligible, "wd=" + format_g10(wd));
          rows += st.base_attack.steps + 1;
        }
        break;
      }
      case SweepAxis::epsilon: {
        for (double eps : cfg.sweep.values) {
          AttackConfig acfg = st.base_attack;
          acfg.epsilon = eps;
          acfg.validate();
          std::vector<AttackTrace> traces = attack_pool(st.surrogate, pool, acfg, cfg.jobs);
          write_dynamics_rows(dyn, traces, all_steps(acfg.steps), st.target, pool, eligible,
                              "eps=" + format_g10(eps));
          rows += acfg.steps + 1;
        }
        break;
      }
      case SweepAxis::n_models:
      case SweepAxis::max_norm: {
        write_dynamics_rows(dyn, st.base_traces, all_steps(st.base_attack.steps), st.target,
                            pool, eligible, "base");
        rows += st.base_attack.steps + 1;
        break;
      }
    }
    add_artifact(m, "dynamics.csv");
  }

  if (cfg.sweep.axis == SweepAxis::n_models) {
    CsvWriter esz((fs::path(cfg.out) / "ensemble_size.csv").string(),
                  {"n_models", "asr", "vulnerability", "diversity"});
    Zoo ordered = subzoo(st.surrogate, ensemble_size_order(st.surrogate));
    for (double vv : cfg.sweep.values) {
      int n = int(vv);
      std::vector<AttackTrace> traces =
          attack_pool(ordered, pool, st.base_attack, cfg.jobs, n);
      RMat X = points_at_step(traces, st.base_attack.steps);
      AsrResult asr = attack_success(st.target, X, pool.labels, eligible);
      RMat tab = trace_prob_table(traces, st.base_attack.steps);
      double vuln = 0, div = 0;
      for (long e = 0; e < tab.cols(); ++e) {
        MseDecomposition d = mse_decompose(tab.col(e), 1.0);
        vuln += d.vulnerability;
        div += d.diversity;
      }
      long ne = std::max<long>(tab.cols(), 1);
      esz.row() << n << asr.asr << vuln / double(ne) << div / double(ne);
      ++rows;
    }
    add_artifact(m, "ensemble_size.csv");
  }

  if (cfg.sweep.axis == SweepAxis::max_norm) {
    CsvWriter mn((fs::path(cfg.out) / "max_norm.csv").string(),
                 {"max_norm", "asr", "accuracy", "surrogate_clean_accuracy", "T"});
    for (double cap : cfg.sweep.values) {
      std::vector<ZooMemberSpec> specs = cfg.surrogate;
      for (ZooMemberSpec& sp : specs) sp.max_norm = cap;
      Zoo zoo = obtain_zoo(cfg, ZooRole::surrogate, specs, st.data.train, st.data.test,
                           st.cache_dir, &s.note);
      std::vector<AttackTrace> traces = attack_pool(zoo, pool, st.base_attack, cfg.jobs);
      RMat X = points_at_step(traces, st.base_attack.steps);
      AsrResult asr = attack_success(st.target, X, pool.labels, eligible);
      std::string T;
      try {
        BoundInputs in = derive_bound_inputs(zoo, pool.images, st.base_attack.norm,
                                             st.base_attack.epsilon, cfg.train.loss);
        T = format_g10(in.T);
      } catch (const SettingMismatch&) {
        // heterogeneous zoo: the layer-wise product is undefined, leave blank
      }
      mn.row() << cap << asr.asr << asr.accuracy << mean_clean_accuracy(zoo) << T;
      ++rows;
    }
    add_artifact(m, "max_norm.csv");
  }

  {  // decomposition.csv at the final step of the base run
    std::vector<DecompositionRow> rows_out;
    RMat tab = trace_prob_table(st.base_traces, st.base_attack.steps);
    int K = st.data.pool.num_classes;
    for (size_t e = 0; e < st.base_traces.size(); ++e) {
      const AttackTrace& tr = st.base_traces[e];
      DecompositionRow r;
      r.example_id = tr.example_id;
      r.kind = "mse";
      MseDecomposition md = mse_decompose(tab.col(long(e)), 1.0);
      r.total = md.total;
      r.vulnerability = md.vulnerability;
      r.diversity = md.diversity;
      r.residual = md.residual;
      rows_out.push_back(r);
      if (K >= 2) {
        const RMat& logits = tr.steps.back().logits;
        RMat probs(logits.rows(), logits.cols());
        for (long i = 0; i < logits.rows(); ++i)
          probs.row(i) = softmax_of(logits.row(i)).matrix().transpose();
        KlDecomposition kd = kl_decompose(smooth_onehot(K, tr.label, cfg.smoothing), probs);
        DecompositionRow rk;
        rk.example_id = tr.example_id;
        rk.kind = "kl";
        rk.total = kd.total;
        rk.vulnerability = kd.vulnerability;
        rk.diversity = kd.diversity;
        rk.residual = kd.residual;
        rows_out.push_back(rk);
      }
    }
    write_decomposition_csv(rows_out, (fs::path(cfg.out) / "decomposition.csv").string());
    add_artifact(m, "decomposition.csv");
    rows += long(rows_out.size());
  }
  std::string head = std::to_string(rows) + " metric rows";
  s.note = s.note.empty() ? head : head + "; " + s.note;
  while (!s.note.empty() && s.note.back() == ' ') s.note.pop_back();
}

void stage_rademacher(const ExperimentConfig& cfg, RunState& st, RunManifest& m,
                      StageStatus& s) {
  const Zoo& zoo = cfg.rademacher.zoo == "target" ? st.target : st.surrogate;
  long na = std::min<long>(cfg.rademacher.max_anchors, st.data.pool.size());
  std::vector<int> idx(static_cast<size_t>(na));
  std::iota(idx.begin(), idx.end(), 0);
  LabeledDataset anchors = subset(st.data.pool, idx);

  std::vector<const ModelRecord*> members = member_ptrs(zoo);
  ZooSignedLoss obj(members, anchors, cfg.train.loss);
  RademacherConfig rc;
  rc.draws = cfg.rademacher.draws;
  rc.restarts = cfg.rademacher.restarts;
  rc.inner_steps = cfg.rademacher.inner_steps;
  rc.norm = cfg.attack.norm;
  rc.epsilon = cfg.attack.epsilon;
  rc.exhaustive = cfg.rademacher.exhaustive;
  rc.seed = cfg.seed;
  RademacherEstimate est = estimate_rademacher(obj, rc);

  std::optional<BoundsReport> bounds;
  std::optional<DominanceReport> dom;
  std::string why;
  try {
    bounds = bounds_report(zoo, anchors.images, rc.norm, rc.epsilon, cfg.train.loss);
    dom = check_dominance(est, bounds->inputs);
  } catch (const SettingMismatch& e) {
    why = e.what();
  }

  CsvWriter w((fs::path(cfg.out) / "rademacher.csv").string(),
              {"M", "R", "inner_steps", "epsilon", "estimate", "stderr", "bound_linear",
               "bound_two_layer", "bound_mlp", "dominance_margin"});
  auto opt = [](const std::optional<double>& v) { return v ? format_g10(*v) : std::string(); };
  w.row() << long(est.per_draw.size()) << rc.restarts << rc.inner_steps << rc.epsilon
          << est.estimate << est.std_error << (bounds ? opt(bounds->linear) : std::string())
          << (bounds ? opt(bounds->two_layer) : std::string())
          << (bounds ? opt(bounds->mlp) : std::string())
          << (dom ? format_g10(dom->margin) : std::string());
  add_artifact(m, "rademacher.csv");

  s.note = "estimate " + format_g10(est.estimate) + " +- " + format_g10(est.std_error);
  if (dom)
    s.note += dom->holds ? "; dominance holds" : "; DOMINANCE VIOLATED";
  else
    s.note += "; closed form n/a: " + why;
  if (dom && !dom->holds)
    throw TrainError(0, "Rademacher estimate exceeds the closed-form bound (margin " +
                            format_g10(dom->margin) + ")");
}

}  // namespace

// --- pipeline ---------------------------------------------------------------

RunManifest run_experiment(const ExperimentConfig& cfg, const StageSelect& select) {
  cfg.validate();
  RunManifest m;
  m.config = experiment_config_json(cfg);
  m.config_hash = config_hash(cfg);
  m.versions = versions_map();

  fs::create_directories(cfg.out);
  RunState st;
  st.cache_dir = cfg.cache.empty() ? (fs::path(cfg.out) / "cache").string() : cfg.cache;
  fs::create_directories(st.cache_dir);

  auto t0 = Clock::now();

  bool ingest_ok = run_stage(m, "ingest", true, true, [&](StageStatus& s) {
    st.data = ingest_dataset(cfg);
    m.dataset = dataset_summary(st.data, cfg);
    s.note = std::to_string(st.data.train.size()) + " train / " +
             std::to_string(st.data.test.size()) + " test / " +
             std::to_string(st.data.pool.size()) + " pool";
  });

  bool zoos_ok = run_stage(m, "zoos", true, ingest_ok, [&](StageStatus& s) {
    st.surrogate = obtain_zoo(cfg, ZooRole::surrogate, cfg.surrogate, st.data.train,
                              st.data.test, st.cache_dir, &s.note);
    st.target = obtain_zoo(cfg, ZooRole::target, cfg.target, st.data.train, st.data.test,
                           st.cache_dir, &s.note);
    st.eligible = clean_correct_mask(st.target, st.data.pool);
    m.zoos = json{{"surrogate", zoo_summary(st.surrogate)}, {"target", zoo_summary(st.target)}};
    while (!s.note.empty() && s.note.back() == ' ') s.note.pop_back();
  });

  bool attack_ok = run_stage(m, "attack", select.attack || select.metrics, zoos_ok,
                             [&](StageStatus& s) { stage_attack(cfg, st, m, s); });

  run_stage(m, "metrics", select.metrics, attack_ok,
            [&](StageStatus& s) { stage_metrics(cfg, st, m, s); });

  run_stage(
      m, "rademacher", select.rademacher && cfg.rademacher.enabled, zoos_ok,
      [&](StageStatus& s) { stage_rademacher(cfg, st, m, s); },
      cfg.rademacher.enabled ? "not selected" : "disabled in config");

  run_stage(m, "report", select.report, true, [&](StageStatus& s) {
    // Register the two artifacts this stage is about to produce before
    // rendering, so the in-run report lists the same artifact set a later
    // `report` regeneration sees in the final manifest.
    add_artifact(m, "report.md");
    add_artifact(m, "run_manifest.json");
    std::string body = render_report(m, cfg.out);
    std::ofstream out(fs::path(cfg.out) / "report.md");
    if (!out) throw std::runtime_error("cannot write report.md under " + cfg.out);
    out << body;
    s.note = std::to_string(body.size()) + " bytes";
  });

  add_artifact(m, "run_manifest.json");
  m.wall_clock_sec = seconds_since(t0);
  write_manifest_file(m, cfg.out);
  return m;
}

// --- report -----------------------------------------------------------------

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int col(const std::string& name) const {
    for (size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return int(i);
    return -1;
  }
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::optional<CsvTable> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  CsvTable t;
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split_csv_line(line));
  }
  return t;
}

std::string g4(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

void md_table(std::ostringstream& os, const CsvTable& t) {
  os << "|";
  for (const std::string& h : t.header) os << " " << h << " |";
  os << "\n|";
  for (size_t i = 0; i < t.header.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& r : t.rows) {
    os << "|";
    for (size_t i = 0; i < t.header.size(); ++i)
      os << " " << (i < r.size() ? r[i] : "") << " |";
    os << "\n";
  }
}

double cell(const std::vector<std::string>& row, int c) {
  if (c < 0 || c >= int(row.size()) || row[size_t(c)].empty()) return std::nan("");
  return std::strtod(row[size_t(c)].c_str(), nullptr);
}

void report_setup(std::ostringstream& os, const RunManifest& m) {
  const json& c = m.config;
  os << "## Setup\n\n";
  if (c.contains("dataset")) {
    const json& d = c.at("dataset");
    os << "- dataset: `" << d.value("id", "?") << "`";
    if (!m.dataset.is_null() && m.dataset.is_object()) {
      // No synthesized-now note here: whether archives were found or written
      // is run-local provenance (manifest only), and the report must come out
      // byte-identical when one config is rerun.
      os << " — " << m.dataset.value("n_train_used", 0L) << " train / "
         << m.dataset.value("n_test", 0L) << " test, attack pool "
         << m.dataset.value("n_pool", 0L) << ", " << m.dataset.value("num_classes", 0)
         << " classes";
    }
    os << "\n";
  }
  os << "- seed: " << c.value("seed", uint64_t(0)) << "\n";
  if (c.contains("attack")) {
    const json& a = c.at("attack");
    double eps = a.value("epsilon", 0.0);
    double alpha = a.value("alpha", 0.0);
    int steps = a.value("steps", 0);
    os << "- attack: MI-FGSM, norm `" << a.value("norm", "?") << "`, eps " << format_g10(eps)
       << ", alpha " << format_g10(alpha);
    if (alpha <= 0 && steps > 0)
      os << " (effective eps/steps = " << format_g10(eps / steps) << ")";
    os << ", steps " << steps << ", momentum " << format_g10(a.value("momentum", 0.0))
       << ", fusion `" << a.value("fusion", "?") << "`, craft `" << a.value("craft", "?")
       << "`\n";
  }
  if (c.contains("train")) {
    const json& t = c.at("train");
    os << "- training: " << t.value("epochs", 0) << " epochs, lr "
       << format_g10(t.value("lr", 0.0)) << ", batch " << t.value("batch", 0) << ", loss `"
       << t.value("loss", "?") << "`\n";
  }
  if (c.contains("metrics"))
    os << "- KL label smoothing s = " << format_g10(c.at("metrics").value("smoothing", 0.0))
       << "\n";
  if (c.contains("sweep")) {
    const json& s = c.at("sweep");
    os << "- sweep: axis `" << s.value("axis", "?") << "`, values [";
    bool first = true;
    if (s.contains("values"))
      for (const json& v : s.at("values")) {
        if (!first) os << ", ";
        os << format_g10(v.get<double>());
        first = false;
      }
    os << "]\n";
  }
  os << "\n";

  if (!m.zoos.is_null() && m.zoos.is_object()) {
    os << "### Zoos\n\n";
    os << "| role | arch | weight_decay | transform | max_norm | clean accuracy |\n";
    os << "|---|---|---|---|---|---|\n";
    for (const char* role : {"surrogate", "target"}) {
      if (!m.zoos.contains(role)) continue;
      const json& z = m.zoos.at(role);
      for (const json& mem : z.value("members", json::array())) {
        os << "| " << role << " | " << mem.value("arch", "?") << " | "
           << format_g10(mem.value("weight_decay", 0.0)) << " | "
           << mem.value("transform", "?") << " | ";
        if (mem.contains("max_norm") && !mem.at("max_norm").is_null())
          os << format_g10(mem.at("max_norm").get<double>());
        else
          os << "-";
        os << " | " << g4(mem.value("clean_accuracy", 0.0)) << " |\n";
      }
    }
    os << "\n";
  }
}

void report_stages(std::ostringstream& os, const RunManifest& m) {
  os << "## Stages\n\n| stage | status |\n|---|---|\n";
  for (const StageStatus& s : m.stages) {
    if (s.name == "report") continue;  // cannot know its own outcome
    os << "| " << s.name << " | ";
    if (s.status == "failed")
      os << "**FAILED** — " << s.error;
    else
      os << s.status;
    os << " |\n";
  }
  os << "\n";
}

void report_dynamics(std::ostringstream& os, const CsvTable& t) {
  os << "## Attack dynamics\n\n"
     << "Per-step pool aggregates: `asr` is the attack success rate over "
        "clean-correct (target model, example) pairs, `mse_loss` the mean squared "
        "margin loss (correct-class logit vs 1) over surrogate members, `variance` "
        "the population variance of those logits across members.\n\n";
  md_table(os, t);
  os << "\n";
  int cs = t.col("step"), ca = t.col("asr"), cm = t.col("mse_loss"), cv = t.col("variance"),
      ct = t.col("config_tag");
  std::vector<std::string> tags;
  for (const auto& r : t.rows) {
    std::string tag = ct >= 0 && ct < int(r.size()) ? r[size_t(ct)] : "";
    if (std::find(tags.begin(), tags.end(), tag) == tags.end()) tags.push_back(tag);
  }
  for (const std::string& tag : tags) {
    const std::vector<std::string>* last = nullptr;
    double best = -1;
    for (const auto& r : t.rows) {
      if (ct >= 0 && r[size_t(ct)] != tag) continue;
      double step = cell(r, cs);
      if (step > best) {
        best = step;
        last = &r;
      }
    }
    if (!last) continue;
    double loss = cell(*last, cm), var = cell(*last, cv);
    os << "- `" << tag << "`: final step " << format_g10(best) << ", ASR "
       << g4(cell(*last, ca)) << ", loss " << g4(loss) << ", variance " << g4(var)
       << ", variance/loss ratio "
       << (loss > 0 ? g4(var / loss) : std::string("n/a")) << "\n";
  }
  os << "\n";
}

void report_ensemble_size(std::ostringstream& os, const CsvTable& t) {
  os << "## Ensemble-size sweep\n\n"
     << "Final-step target ASR and the MSE vulnerability/diversity split of the "
        "crafting ensemble, per surrogate count (members added MLP-family first, "
        "then conv, by depth and weight decay).\n\n";
  md_table(os, t);
  int ca = t.col("asr");
  int up = 0, total = 0;
  for (size_t i = 1; i < t.rows.size(); ++i) {
    ++total;
    if (cell(t.rows[i], ca) >= cell(t.rows[i - 1], ca)) ++up;
  }
  if (total > 0)
    os << "\n- ASR non-decreasing in " << up << " of " << total << " adjacent pairs\n";
  os << "\n";
}

void report_max_norm(std::ostringstream& os, const CsvTable& t) {
  os << "## Max-norm sweep\n\n"
     << "Surrogate zoos retrained with each per-unit L2 weight cap; the target "
        "zoo is fixed. `accuracy` is plain target accuracy on the attacked pool "
        "(lower = stronger transfer).\n\n";
  md_table(os, t);
  int cc = t.col("max_norm"), ca = t.col("accuracy");
  int arg = -1;
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < t.rows.size(); ++i) {
    double a = cell(t.rows[i], ca);
    if (a < best) {
      best = a;
      arg = int(i);
    }
  }
  if (arg >= 0) {
    os << "\n- attack strongest (lowest target accuracy " << g4(best) << ") at cap "
       << format_g10(cell(t.rows[size_t(arg)], cc));
    bool interior = arg != 0 && arg != int(t.rows.size()) - 1;
    os << (interior ? " (interior minimum)" : " (minimum at the range edge)") << "\n";
  }
  os << "\n";
}

void report_decomposition(std::ostringstream& os, const CsvTable& t) {
  os << "## Risk decomposition at the final step\n\n"
     << "Per-example splits of the average member loss into ensemble "
        "vulnerability plus diversity (`mse`: squared margin of correct-class "
        "logits; `kl`: KL against the normalized geometric-mean centroid).\n\n";
  int ck = t.col("kind"), ct = t.col("total"), cv = t.col("vulnerability"),
      cd = t.col("diversity"), cr = t.col("residual");
  std::vector<std::string> kinds;
  for (const auto& r : t.rows) {
    std::string k = ck >= 0 ? r[size_t(ck)] : "";
    if (std::find(kinds.begin(), kinds.end(), k) == kinds.end()) kinds.push_back(k);
  }
  os << "| kind | examples | mean total | mean vulnerability | mean diversity | max "
        "abs residual |\n|---|---|---|---|---|---|\n";
  for (const std::string& k : kinds) {
    long n = 0;
    double st = 0, sv = 0, sd = 0, mr = 0;
    for (const auto& r : t.rows) {
      if (ck >= 0 && r[size_t(ck)] != k) continue;
      ++n;
      st += cell(r, ct);
      sv += cell(r, cv);
      sd += cell(r, cd);
      mr = std::max(mr, std::abs(cell(r, cr)));
    }
    if (n == 0) continue;
    os << "| " << k << " | " << n << " | " << g4(st / double(n)) << " | "
       << g4(sv / double(n)) << " | " << g4(sd / double(n)) << " | " << g4(mr) << " |\n";
  }
  os << "\n";
}

void report_rademacher(std::ostringstream& os, const CsvTable& t) {
  os << "## Empirical ensemble Rademacher complexity\n\n"
     << "Estimate over the union of epsilon-balls around the anchor pool; "
        "closed-form bound columns are blank when the zoo is outside a bound's "
        "hypotheses.\n\n";
  md_table(os, t);
  if (!t.rows.empty()) {
    const auto& r = t.rows[0];
    int cm = t.col("dominance_margin");
    if (cm >= 0 && cm < int(r.size()) && !r[size_t(cm)].empty()) {
      double margin = cell(r, cm);
      if (margin >= 0)
        os << "\n- dominance holds: estimate <= bound + 2*stderr (margin " << g4(margin)
           << ")\n";
      else
        os << "\n- **dominance violated** (margin " << g4(margin) << ")\n";
    } else {
      os << "\n- closed-form dominance check not applicable to this zoo "
            "(requires a bias-free single-score fully-connected family with "
            "hinge loss)\n";
    }
  }
  os << "\n";
}

}  // namespace

std::string render_report(const RunManifest& m, const std::string& out_dir) {
  std::ostringstream os;
  os << "# Transfer attack run `" << m.config_hash << "`\n\n";
  report_setup(os, m);
  report_stages(os, m);

  auto failed = [&](const char* stage) {
    const StageStatus* s = m.find(stage);
    return s != nullptr && s->status == "failed";
  };

  if (!failed("metrics")) {
    if (auto t = read_csv(fs::path(out_dir) / "dynamics.csv")) report_dynamics(os, *t);
    if (auto t = read_csv(fs::path(out_dir) / "ensemble_size.csv"))
      report_ensemble_size(os, *t);
    if (auto t = read_csv(fs::path(out_dir) / "max_norm.csv")) report_max_norm(os, *t);
    if (auto t = read_csv(fs::path(out_dir) / "decomposition.csv"))
      report_decomposition(os, *t);
  }
  if (!failed("rademacher")) {
    if (auto t = read_csv(fs::path(out_dir) / "rademacher.csv")) report_rademacher(os, *t);
  }

  os << "## Artifacts\n\n";
  std::vector<std::string> arts = m.artifacts;
  std::sort(arts.begin(), arts.end());
  for (const std::string& a : arts) os << "- `" << a << "`\n";
  os << "\n## Versions\n\n";
  for (const auto& [k, v] : m.versions) os << "- " << k << ": " << v << "\n";
  return os.str();
}

}  // namespace tlab
