// tlab: config-driven laboratory for transferable ensemble attacks.
//
// Subcommands cover the pipeline stages individually (train-zoo, attack,
// metrics, rademacher, bounds) plus the full run, report regeneration, and
// synthetic archive generation.  Exit codes: 0 success, 2 configuration
// error, 3 data error, 4 any other stage failure.

#include "tlab/experiment.hpp"
#include "tlab/serialize.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonOpts {
  std::string config_path;
  std::string dump_config;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> cache;
  std::optional<int> jobs;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path,
                  "experiment config JSON (defaults are used when omitted)");
  cmd->add_option("--seed", o.seed, "override the config's global seed");
  cmd->add_option("--out", o.out, "override the output directory");
  cmd->add_option("--cache", o.cache, "override the zoo cache directory");
  cmd->add_option("--jobs", o.jobs, "override the worker thread count");
  cmd->add_option("--dump-config", o.dump_config,
                  "write the effective config (all defaults applied) to this path and exit");
}

tlab::ExperimentConfig resolve_config(const CommonOpts& o) {
  tlab::ExperimentConfig cfg = o.config_path.empty()
                                   ? tlab::default_experiment_config()
                                   : tlab::load_experiment_config(o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out = *o.out;
  if (o.cache) cfg.cache = *o.cache;
  if (o.jobs) cfg.jobs = *o.jobs;
  cfg.validate();
  return cfg;
}

/// Handles --dump-config; returns true when the command should exit early.
bool maybe_dump(const CommonOpts& o, const tlab::ExperimentConfig& cfg) {
  if (o.dump_config.empty()) return false;
  std::ofstream out(o.dump_config);
  if (!out) throw tlab::ConfigError("cannot write config to " + o.dump_config);
  out << tlab::experiment_config_json(cfg).dump(2) << '\n';
  std::cout << "wrote effective config to " << o.dump_config << "\n";
  return true;
}

int finish(const tlab::RunManifest& m) {
  for (const tlab::StageStatus& s : m.stages) {
    std::cout << s.name << ": " << s.status;
    if (!s.note.empty()) std::cout << " (" << s.note << ")";
    if (!s.error.empty()) std::cout << " -- " << s.error;
    std::cout << "\n";
  }
  for (const std::string& a : m.artifacts) std::cout << "artifact: " << a << "\n";
  int code = tlab::manifest_exit_code(m);
  std::cout << (code == 0 ? "run ok" : "run FAILED") << " (config " << m.config_hash << ")\n";
  return code;
}

int run_pipeline(const CommonOpts& o, const tlab::StageSelect& sel, bool force_rademacher) {
  tlab::ExperimentConfig cfg = resolve_config(o);
  if (force_rademacher) cfg.rademacher.enabled = true;
  if (maybe_dump(o, cfg)) return 0;
  return finish(tlab::run_experiment(cfg, sel));
}

int cmd_bounds(const CommonOpts& o, const std::string& which_zoo) {
  tlab::ExperimentConfig cfg = resolve_config(o);
  if (maybe_dump(o, cfg)) return 0;
  tlab::StageSelect none;
  none.attack = none.metrics = none.rademacher = none.report = false;
  tlab::RunManifest m = tlab::run_experiment(cfg, none);
  int code = tlab::manifest_exit_code(m);
  if (code != 0) return finish(m);

  const std::string cache_dir =
      cfg.cache.empty() ? (fs::path(cfg.out) / "cache").string() : cfg.cache;
  tlab::ZooRole role = which_zoo == "target" ? tlab::ZooRole::target : tlab::ZooRole::surrogate;
  const auto& specs = role == tlab::ZooRole::target ? cfg.target : cfg.surrogate;
  tlab::Zoo zoo = tlab::load_zoo(
      (fs::path(cache_dir) / ("zoo-" + tlab::zoo_cache_key(cfg, role, specs))).string());

  tlab::IngestedData data = tlab::ingest_dataset(cfg);
  tlab::BoundsReport r = tlab::bounds_report(zoo, data.pool.images, cfg.attack.norm,
                                             cfg.attack.epsilon, cfg.train.loss);
  json j = tlab::bounds_report_json(r);
  fs::create_directories(cfg.out);
  std::ofstream f_out(fs::path(cfg.out) / "bounds.json");
  f_out << j.dump(2) << '\n';
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_report(const std::string& out_dir) {
  tlab::RunManifest m =
      tlab::load_manifest((fs::path(out_dir) / "run_manifest.json").string());
  std::string body = tlab::render_report(m, out_dir);
  std::ofstream out(fs::path(out_dir) / "report.md");
  if (!out) throw tlab::ConfigError("cannot write report.md under " + out_dir);
  out << body;
  std::cout << "wrote " << (fs::path(out_dir) / "report.md").string() << " (" << body.size()
            << " bytes)\n";
  return 0;
}

struct SynthOpts {
  std::string format = "mnist";
  std::string dir;
  long n_train = 12000;
  long n_test = 2000;
  double noise = 0.10;
  int max_shift = 2;
  uint64_t seed = 7;
  bool force = false;
};

int cmd_synth(const SynthOpts& o) {
  tlab::DatasetFormat f = tlab::parse_dataset_format(o.format);
  const char* probe = nullptr;
  switch (f) {
    case tlab::DatasetFormat::mnist:
    case tlab::DatasetFormat::fashion_mnist: probe = "train-images-idx3-ubyte"; break;
    case tlab::DatasetFormat::cifar10: probe = "data_batch_1.bin"; break;
    case tlab::DatasetFormat::cifar100: probe = "train.bin"; break;
  }
  if (!o.force && probe && fs::exists(fs::path(o.dir) / probe))
    throw tlab::ConfigError("refusing to overwrite existing archives in " + o.dir +
                            " (pass --force to regenerate)");
  tlab::BlobSpec spec;
  switch (f) {
    case tlab::DatasetFormat::mnist:
    case tlab::DatasetFormat::fashion_mnist:
      spec.num_classes = 10;
      spec.channels = 1;
      spec.height = spec.width = 28;
      break;
    case tlab::DatasetFormat::cifar10:
      spec.num_classes = 10;
      spec.channels = 3;
      spec.height = spec.width = 32;
      break;
    case tlab::DatasetFormat::cifar100:
      spec.num_classes = 100;
      spec.channels = 3;
      spec.height = spec.width = 32;
      break;
  }
  spec.noise = o.noise;
  spec.max_shift = o.max_shift;
  tlab::write_blob_dataset_dir(o.dir, f, spec, o.n_train, o.n_test, o.seed);
  std::cout << "wrote " << o.format << " archives (" << o.n_train << " train, " << o.n_test
            << " test) to " << o.dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "tlab: train classifier zoos, craft ensemble adversarial examples, and "
      "measure transferability, risk decompositions and Rademacher bounds.\n"
      "Dataset directories default to $TLAB_DATA_ROOT/<id> when the config "
      "leaves dataset.dir empty."};
  app.require_subcommand(1);

  CommonOpts run_o, zoo_o, atk_o, met_o, rad_o, bnd_o;
  std::string bounds_zoo = "surrogate";
  std::string report_dir;
  SynthOpts synth_o;

  CLI::App* c_run = app.add_subcommand("run", "full pipeline: ingest, zoos, attack, metrics, report");
  add_common(c_run, run_o);
  CLI::App* c_zoo = app.add_subcommand("train-zoo", "train (or load cached) surrogate and target zoos");
  add_common(c_zoo, zoo_o);
  CLI::App* c_atk = app.add_subcommand("attack", "craft the attack pool and export traces.csv");
  add_common(c_atk, atk_o);
  CLI::App* c_met = app.add_subcommand("metrics", "attack plus dynamics/decomposition/sweep CSVs");
  add_common(c_met, met_o);
  CLI::App* c_rad = app.add_subcommand("rademacher", "estimate ensemble Rademacher complexity and bounds");
  add_common(c_rad, rad_o);
  CLI::App* c_bnd = app.add_subcommand("bounds", "derive closed-form bound inputs from a trained zoo");
  add_common(c_bnd, bnd_o);
  c_bnd->add_option("--zoo", bounds_zoo, "which zoo to analyze: surrogate | target")
      ->check(CLI::IsMember({"surrogate", "target"}));
  CLI::App* c_rep = app.add_subcommand("report", "regenerate report.md from a run directory");
  c_rep->add_option("--out", report_dir, "run directory containing run_manifest.json")
      ->required();
  CLI::App* c_syn = app.add_subcommand("synth-data", "write synthetic archives in MNIST/CIFAR layout");
  c_syn->add_option("--format", synth_o.format, "mnist | fashion_mnist | cifar10 | cifar100");
  c_syn->add_option("--dir", synth_o.dir, "output directory")->required();
  c_syn->add_option("--n-train", synth_o.n_train, "training examples");
  c_syn->add_option("--n-test", synth_o.n_test, "test examples");
  c_syn->add_option("--noise", synth_o.noise, "per-pixel Gaussian noise sigma");
  c_syn->add_option("--max-shift", synth_o.max_shift, "per-sample integer jitter");
  c_syn->add_option("--seed", synth_o.seed, "generation seed");
  c_syn->add_flag("--force", synth_o.force, "overwrite existing archives");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    // CLI11 returns 0 for --help/--version; anything else is a usage error.
    return rc == 0 ? 0 : 2;
  }

  try {
    tlab::StageSelect sel;
    if (c_run->parsed()) return run_pipeline(run_o, sel, false);
    if (c_zoo->parsed()) {
      sel.attack = sel.metrics = sel.rademacher = sel.report = false;
      return run_pipeline(zoo_o, sel, false);
    }
    if (c_atk->parsed()) {
      sel.metrics = sel.rademacher = sel.report = false;
      return run_pipeline(atk_o, sel, false);
    }
    if (c_met->parsed()) {
      sel.rademacher = sel.report = false;
      return run_pipeline(met_o, sel, false);
    }
    if (c_rad->parsed()) {
      sel.attack = sel.metrics = sel.report = false;
      return run_pipeline(rad_o, sel, true);
    }
    if (c_bnd->parsed()) return cmd_bounds(bnd_o, bounds_zoo);
    if (c_rep->parsed()) return cmd_report(report_dir);
    if (c_syn->parsed()) return cmd_synth(synth_o);
  } catch (const tlab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const tlab::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
