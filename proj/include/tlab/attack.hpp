#pragma once

#include "tlab/train.hpp"

#include <functional>

namespace tlab {

// ---------------------------------------------------------------------------
// Momentum iterated FGSM against an ensemble of surrogate models.
//
// The crafting objective fuses per-member losses in one of three ways:
//   loss_avg   mean_i loss(f_i(x), y)          (the ensemble training risk)
//   logit_avg  loss(mean_i z_i(x), y)
//   prob_avg   -log(mean_i softmax(z_i)(x)[y]) (cross-entropy only)
// and the objective is *ascended*: momentum-accumulated normalized gradients,
// sign steps for the linf ball / normalized steps for the l2 ball, each
// iterate re-projected onto the epsilon-ball around the clean point and the
// [0,1] box.  Every step appends a full measurement record, so downstream
// metrics never have to re-run the attack.
// ---------------------------------------------------------------------------

enum class BallNorm { linf, l2 };
enum class Fusion { loss_avg, logit_avg, prob_avg };
enum class CraftLoss { cross_entropy, mse };

BallNorm parse_ball_norm(const std::string& id);
Fusion parse_fusion(const std::string& id);
CraftLoss parse_craft_loss(const std::string& id);
const char* to_string(BallNorm n);
const char* to_string(Fusion f);
const char* to_string(CraftLoss c);

struct AttackConfig {
  BallNorm norm = BallNorm::linf;
  double epsilon = 8.0 / 255.0;
  double alpha = 0.0;     ///< step size; <=0 selects epsilon/steps
  int steps = 20;
  double momentum = 1.0;
  Fusion fusion = Fusion::loss_avg;
  CraftLoss craft = CraftLoss::cross_entropy;

  double step_size() const { return alpha > 0 ? alpha : (steps > 0 ? epsilon / steps : 0.0); }
  /// Throws ConfigError on inconsistent settings (alpha > epsilon for a
  /// positive budget, prob_avg with a non-CE craft loss, ...).
  void validate() const;
};

/// Nearest point of the epsilon-ball around `anchor`, then clamped to [0,1].
/// Clamping is per-coordinate non-expansive, so the ball constraint survives
/// it for anchors inside the box.
Array project_ball(const Array& x, const Array& anchor, BallNorm norm, double eps);

/// Crafting graph over one example; leaves reusable across attack steps.
struct EnsembleGraph {
  Tensor x;                            ///< [1, D] input leaf (differentiable)
  Tensor objective;                    ///< fused scalar
  std::vector<Tensor> logits;          ///< per member, [1, K]
  std::vector<Tensor> member_loss;     ///< per member crafting loss, scalar
  std::vector<Tensor> correct_logit;   ///< per member, [1]
  /// objective + 0 * (every measurement node): evaluating/backwarding this
  /// root refreshes all recorded quantities in one pass while keeping
  /// d(probe)/dx identical to d(objective)/dx.
  Tensor probe;
};

EnsembleGraph build_ensemble_graph(const std::vector<const ModelRecord*>& members, int label,
                                   const AttackConfig& cfg);

struct AttackStep {
  Array x;              ///< iterate after this step (step 0: the clean point)
  double fused_loss = 0;
  Vec member_loss;      ///< per-surrogate crafting loss at x
  Vec correct_logit;    ///< per-surrogate correct-class logit at x
  RMat logits;          ///< [N, K] surrogate logits at x
  double linf_dist = 0, l2_dist = 0;
};

struct AttackTrace {
  int example_id = -1;
  int label = -1;
  Array clean;
  std::vector<AttackStep> steps;  ///< steps[0] is the clean measurement

  const Array& final_x() const { return steps.back().x; }
};

AttackTrace mifgsm_attack(const std::vector<const ModelRecord*>& members, const Array& clean,
                          int label, const AttackConfig& cfg, int example_id = -1);

std::vector<const ModelRecord*> member_ptrs(const Zoo& zoo, int first_n = -1);

/// Attacks every pool row (parallel over examples, results in pool order).
std::vector<AttackTrace> attack_pool(const Zoo& surrogate, const LabeledDataset& pool,
                                     const AttackConfig& cfg, int jobs = 1, int first_n_members = -1);

/// Streaming variant: `sink(trace)` runs under an internal lock, in arbitrary
/// order; use trace.example_id to index result slots.
void for_each_trace(const Zoo& surrogate, const LabeledDataset& pool, const AttackConfig& cfg,
                    int jobs, int first_n_members,
                    const std::function<void(const AttackTrace&)>& sink);

/// Per-(example, step) rows: example_id, step, fused_loss, mean_member_loss,
/// ball norm, linf and l2 distances from the clean point.
void write_trace_csv(const std::vector<AttackTrace>& traces, const AttackConfig& cfg,
                     const std::string& path);

}  // namespace tlab
