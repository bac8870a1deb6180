#pragma once

#include "tlab/common.hpp"
#include "tlab/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tlab {

// ---------------------------------------------------------------------------
// Classifier architectures.
//
// Three families, all ending in a linear head over K logits:
//   linear    logits = x W (+ b)
//   mlp-dL    L hidden ReLU layers of `hidden` units, then the head
//   cnn-dL    L stride-2 3x3 ReLU conv layers (pad 1), flatten, then the head
//
// Weight matrices are stored [in, out], so the incoming weight vector of an
// output unit is a column; conv kernels are [Cout, Cin, kh, kw], so an output
// channel's incoming weights are one kernel row block.  That orientation is
// what the per-unit max-norm constraint and the norm summaries act on.
// ---------------------------------------------------------------------------

enum class ModelFamily { linear, mlp, cnn };

enum class ParamRole { weight, bias };

struct ArchSpec {
  ModelFamily family = ModelFamily::mlp;
  int depth = 1;                      ///< hidden layers (mlp) / conv layers (cnn)
  int hidden = 128;                   ///< mlp width
  std::vector<int> channels = {16, 32, 64};  ///< cnn schedule, first `depth` used
  Shape input_shape;                  ///< {C,H,W}
  int num_classes = 10;               ///< 1 => single margin score (hinge setups)
  bool bias = true;

  /// Canonical id, e.g. "linear", "mlp-d2-h128", "cnn-d2-c16.32".
  std::string describe() const;
};

/// Parses ids produced by describe(); depth/hidden/channels optional with
/// defaults d1, h128, c16.32.64.
ArchSpec parse_arch(const std::string& id, Shape input_shape, int num_classes, bool bias = true);

long param_count(const ArchSpec& arch);

struct Param {
  std::string name;
  ParamRole role;
  Tensor tensor;
};

/// Training knobs that identify a trained model (persisted alongside weights).
struct TrainMeta {
  double weight_decay = 0.0;
  std::string transform = "none";
  std::optional<double> max_norm;
  uint64_t seed = 0;
};

struct ModelRecord {
  ArchSpec arch;
  TrainMeta meta;
  std::vector<Param> params;
  double clean_accuracy = -1.0;       ///< filled after evaluation
  std::vector<double> epoch_loss;     ///< mean train loss per epoch
  uint64_t provenance = 0;            ///< hash of (arch, meta); role-free
};

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, one RNG stream per tensor.
ModelRecord init_model(const ArchSpec& arch, uint64_t seed);

/// Builds the logits graph over a flat [B, C*H*W] input leaf.  Parameter
/// leaves are shared with the record, so optimizer updates and graph rebuilds
/// see the same storage.
Tensor build_logits(const ModelRecord& model, const Tensor& input);

/// Hash of everything that determines the trained weights.
uint64_t provenance_hash(const ArchSpec& arch, const TrainMeta& meta);

/// Marks parameter leaves as differentiable or frozen (attacks differentiate
/// inputs only).  Affects graphs built afterwards.
void set_trainable(ModelRecord& model, bool trainable);

struct TensorNormInfo {
  std::string name;
  double frobenius = 0.0;
  double max_unit = 0.0;  ///< largest per-output-unit L2 norm (weights only)
};

/// Frobenius and per-unit norms for every weight tensor, in layer order.
std::vector<TensorNormInfo> norm_summary(const ModelRecord& model);

}  // namespace tlab
