#pragma once

#include "tlab/attack.hpp"
#include "tlab/dataset.hpp"
#include "tlab/metrics.hpp"
#include "tlab/rademacher.hpp"
#include "tlab/train.hpp"

#include <json.hpp>

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tlab {

// ---------------------------------------------------------------------------
// Experiment orchestration.
//
// One JSON config drives the whole pipeline:
//   ingest -> zoos (cached) -> attack -> metrics -> rademacher -> report
// Every stage is deterministic given the config, so rerunning a config
// reproduces each CSV byte for byte; the manifest records wall-clock and
// cache notes, which are the only nondeterministic outputs.  Stage failures
// are recorded (with partial outputs preserved) instead of aborting the run.
// ---------------------------------------------------------------------------

/// Fallback data root when the config leaves dataset.dir empty: the dataset
/// directory becomes $TLAB_DATA_ROOT/<dataset id>.
inline constexpr const char* kDataRootEnv = "TLAB_DATA_ROOT";

// --- config ----------------------------------------------------------------

enum class SweepAxis { steps, n_models, weight_decay, max_norm, epsilon };

SweepAxis parse_sweep_axis(const std::string& id);
const char* to_string(SweepAxis a);

struct SweepConfig {
  SweepAxis axis = SweepAxis::steps;
  std::vector<double> values;  ///< ascending; integral for steps / n_models
};

/// Synthetic stand-in archives: written into dataset.dir (in the exact IDX /
/// CIFAR binary layout of the format) when the expected files are absent, so
/// the run exercises the real parsers end to end.
struct SynthConfig {
  long n_train = 12000;
  long n_test = 2000;
  double noise = 0.10;   ///< per-pixel Gaussian sigma of the blob fixture
  int max_shift = 2;     ///< per-sample integer jitter
  uint64_t seed = 7;     ///< generation seed, independent of the run seed
};

struct DatasetSection {
  std::string id = "mnist";  ///< archive format family (see DatasetFormat)
  std::string dir;           ///< empty -> $TLAB_DATA_ROOT/<id>
  std::optional<SynthConfig> synthesize;
  long train_subsample = 10000;  ///< 0 keeps the full train split
  long pool_size = 1000;         ///< attack pool, drawn from the test split
  std::vector<int> keep_classes; ///< optional filter; labels renumbered 0..k-1
};

struct RademacherSection {
  bool enabled = false;
  std::string zoo = "surrogate";  ///< "surrogate" | "target"
  int draws = 64;
  int restarts = 5;
  int inner_steps = 50;
  bool exhaustive = false;        ///< enumerate all 2^N sign patterns
  int max_anchors = 16;           ///< anchors taken from the front of the pool
};

struct ExperimentConfig {
  DatasetSection dataset;
  uint64_t seed = 1;
  TrainConfig train;  ///< base knobs (epochs/lr/batch/loss); seed field unused
  std::vector<ZooMemberSpec> surrogate;
  std::vector<ZooMemberSpec> target;
  AttackConfig attack;
  double smoothing = 1e-3;  ///< label smoothing of KL decomposition targets
  SweepConfig sweep;
  RademacherSection rademacher;
  std::string out = "runs/out";
  std::string cache;  ///< empty -> <out>/cache
  int jobs = 1;

  void validate() const;  ///< throws ConfigError
};

/// The desk-scale default protocol: synthetic MNIST-format data, 6-member
/// surrogate/target zoos (3 MLP + 3 CNN depths), 20-step linf attack at
/// eps 8/255, steps sweep 1..20.
ExperimentConfig default_experiment_config();

/// Strict parse: unknown keys anywhere are ConfigErrors, as are type or range
/// violations.  Absent keys take the documented defaults.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

/// Full echo including every applied default; parse(echo(c)) == c.
nlohmann::json experiment_config_json(const ExperimentConfig& c);

/// FNV-1a over the canonical (sorted-key) echo; names the run and its caches.
std::string config_hash(const ExperimentConfig& c);

/// Cache key of one zoo: hashes exactly the config subset that determines the
/// trained weights (dataset identity, train base, role, specs, seed).
std::string zoo_cache_key(const ExperimentConfig& c, ZooRole role,
                          const std::vector<ZooMemberSpec>& specs);

// --- ingest -----------------------------------------------------------------

struct IngestedData {
  LabeledDataset train;  ///< filtered + subsampled training split
  LabeledDataset test;   ///< filtered test split
  LabeledDataset pool;   ///< attack pool, drawn from the test split
  std::string dir;       ///< resolved dataset directory
  bool synthesized = false;  ///< archives were generated during this call
};

/// Resolves the dataset directory (config, then $TLAB_DATA_ROOT), writes the
/// synthetic archives if configured and absent, loads through the binary
/// parsers, applies the class filter, and carves the train subsample and the
/// attack pool with seed-keyed disjoint index partitions.
IngestedData ingest_dataset(const ExperimentConfig& cfg);

// --- manifest ---------------------------------------------------------------

struct StageStatus {
  std::string name;
  std::string status = "ok";  ///< "ok" | "failed" | "skipped"
  std::string note;           ///< row counts, cache hits, skip reason
  std::string error;          ///< failure message (empty otherwise)
  std::string error_kind;     ///< "config" | "data" | "other" (failed only)
  double seconds = 0;         ///< wall clock, excluded from determinism
};

struct RunManifest {
  std::string config_hash;
  nlohmann::json config;   ///< echoed config with defaults applied
  nlohmann::json dataset;  ///< ingest summary (sizes, classes, shape)
  nlohmann::json zoos;     ///< per-role member summaries with clean accuracy
  std::vector<StageStatus> stages;
  std::vector<std::string> artifacts;  ///< paths relative to the output dir
  std::map<std::string, std::string> versions;
  double wall_clock_sec = 0;

  bool ok() const;
  const StageStatus* find(const std::string& name) const;
};

nlohmann::json manifest_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);
RunManifest load_manifest(const std::string& path);

/// 0 when every stage succeeded; otherwise 2/3/4 for a first failure of kind
/// config/data/other (the CLI exit-code contract).
int manifest_exit_code(const RunManifest& m);

// --- pipeline ---------------------------------------------------------------

/// Which stages beyond ingest+zoos to run; the `rademacher` stage additionally
/// requires config.rademacher.enabled.
struct StageSelect {
  bool attack = true;
  bool metrics = true;
  bool rademacher = true;
  bool report = true;
};

/// Runs the pipeline, writing artifacts under cfg.out and the manifest to
/// <out>/run_manifest.json.  A failed stage marks its dependents "skipped";
/// the function only throws for errors outside any stage (unwritable output
/// directory).
RunManifest run_experiment(const ExperimentConfig& cfg, const StageSelect& select = {});

/// Renders the markdown report for a finished (or partial) run from the
/// manifest plus the CSV artifacts on disk.  Pure function of those bytes:
/// wall-clock and cache notes never appear, so reruns of one config produce
/// byte-identical reports.
std::string render_report(const RunManifest& m, const std::string& out_dir);

// --- sweep helpers ----------------------------------------------------------

/// Member order for the ensemble-size sweep: MLP-family members first, then
/// conv members; within a family by depth, weight decay, transform, then spec
/// order.  Returns indices into zoo.members.
std::vector<int> ensemble_size_order(const Zoo& zoo);

/// Derived quantities the bounds subcommand reports for one zoo.  Each closed
/// form is present only when the zoo's family matches its hypotheses; conv
/// zoos report the norm inputs alone.
struct BoundsReport {
  BoundInputs inputs;
  std::optional<double> linear;     ///< BC/sqrt(N), linear family
  std::optional<double> two_layer;  ///< sqrt(m) B ||head|| cap / sqrt(N), one hidden layer
  std::optional<double> mlp;        ///< depth-l form, fully-connected families
};

BoundsReport bounds_report(const Zoo& zoo, const RMat& pool_X, BallNorm norm, double eps,
                           LossKind loss);
nlohmann::json bounds_report_json(const BoundsReport& r);

}  // namespace tlab
