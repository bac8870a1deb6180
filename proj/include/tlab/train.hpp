#pragma once

#include "tlab/dataset.hpp"
#include "tlab/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tlab {

// ---------------------------------------------------------------------------
// Training and zoo construction.
//
// Adam with the classic L2 coupling (g <- g + lambda * theta before the
// moment update), optional per-output-unit max-norm projection after each
// step, and the three diversity transforms (none / horizontal flip / +-2px
// shift).  All stochastic choices run on counter-based streams keyed by the
// member seed, so a zoo rebuild is bit-identical regardless of thread count.
// ---------------------------------------------------------------------------

enum class Transform { none, flip, shift };

Transform parse_transform(const std::string& id);
const char* to_string(Transform t);

enum class LossKind { cross_entropy, hinge };

struct TrainConfig {
  int epochs = 10;
  double lr = 1e-3;
  int batch = 64;
  double weight_decay = 0.0;
  std::optional<double> max_norm;   ///< per-output-unit L2 cap, off if absent
  Transform transform = Transform::none;
  LossKind loss = LossKind::cross_entropy;
  uint64_t seed = 0;
};

/// In-place per-output-unit L2 projection of every weight tensor.
void project_max_norm(ModelRecord& model, double cap);

/// Trains in place; appends per-epoch mean loss to model.epoch_loss.
/// Non-finite loss raises TrainError with the global step index.
void train_model(ModelRecord& model, const LabeledDataset& train, const TrainConfig& cfg);

/// Argmax accuracy (loss==hinge scores use sign against +/-1 labels).
double evaluate_accuracy(const ModelRecord& model, const LabeledDataset& data,
                         LossKind loss = LossKind::cross_entropy, int batch = 512);

/// Applies the member's transform to one flat image (used by the train loop;
/// exposed for tests).
Array apply_transform(const Array& flat, const Shape& image_shape, Transform t, Prng& g);

// --- zoos ------------------------------------------------------------------

enum class ZooRole { surrogate, target };
const char* to_string(ZooRole r);

struct ZooMemberSpec {
  std::string arch = "mlp-d1";
  double weight_decay = 0.0;
  Transform transform = Transform::none;
  std::optional<double> max_norm;
};

struct Zoo {
  ZooRole role = ZooRole::surrogate;
  std::vector<ModelRecord> members;

  int size() const { return int(members.size()); }
};

/// Deterministic member seed for (experiment seed, role, index); surrogate and
/// target streams never collide.
uint64_t member_seed(uint64_t seed, ZooRole role, int index);

/// Trains one model per spec (parallel over members, results in spec order)
/// and records clean test accuracy.  `base` supplies epochs/lr/batch/loss;
/// per-member knobs come from the spec.
Zoo build_zoo(ZooRole role, const std::vector<ZooMemberSpec>& specs,
              const LabeledDataset& train, const LabeledDataset& test, const TrainConfig& base,
              uint64_t seed, int jobs = 1);

}  // namespace tlab
