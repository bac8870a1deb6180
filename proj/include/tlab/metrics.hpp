#pragma once

#include "tlab/attack.hpp"

namespace tlab {

// ---------------------------------------------------------------------------
// Ensemble risk decompositions and transfer metrics.
//
// Every decomposition follows the same pattern: the average member loss
// (total) splits into an ensemble-prediction term (vulnerability) plus a
// member-disagreement term (diversity).  The MSE split is an algebraic
// identity, the noisy-label variant adds the irreducible noise floor, and the
// KL split holds with the normalized geometric-mean centroid.
// ---------------------------------------------------------------------------

/// mean_i (f_i - y)^2 = (fbar - y)^2 + mean_i (f_i - fbar)^2, per example.
struct MseDecomposition {
  double total = 0;          ///< average member squared error
  double vulnerability = 0;  ///< squared error of the mean prediction
  double diversity = 0;      ///< population variance of member predictions
  double residual = 0;       ///< total - vulnerability - diversity
};
MseDecomposition mse_decompose(const Vec& preds, double target);

/// Expected squared error against y = bayes + noise with Var(noise) = eta2:
/// risk = (fbar - bayes)^2 + variance + eta2.
struct NoiseDecomposition {
  double risk = 0;
  double vulnerability = 0;  ///< (fbar - bayes)^2
  double diversity = 0;      ///< population variance of member predictions
  double noise = 0;          ///< eta2, passed through
};
NoiseDecomposition noise_decompose(const Vec& preds, double bayes, double eta2);

/// Normalized geometric mean of the member distributions (rows of probs).
/// Member probabilities are floored at `floor` before the logs so zero-mass
/// classes stay finite; the centroid is renormalized to sum 1.
Vec geometric_centroid(const RMat& probs, double floor = 1e-12);

/// mean_i KL(y || f_i) = KL(y || fstar) + (-log Z), fstar the normalized
/// geometric centroid with normalizer Z; -log Z equals mean_i KL(fstar||f_i)
/// and is nonnegative by the AM-GM inequality.
struct KlDecomposition {
  double total = 0;
  double vulnerability = 0;  ///< KL(y || centroid)
  double diversity = 0;      ///< -log Z
  double residual = 0;       ///< total - vulnerability - diversity
};
KlDecomposition kl_decompose(const Vec& y, const RMat& probs, double floor = 1e-12);

/// (1-s) * onehot + s * uniform; rows of kl_decompose targets.
Vec smooth_onehot(int num_classes, int label, double s = 1e-3);

/// Population variance across members (rows), averaged over examples (cols).
double prediction_variance(const RMat& member_by_example);

/// mean over members and examples of (value - target)^2; the MSE margin
/// metric tracked along attack trajectories (target 1 = nominal clean score).
double mse_margin_loss(const RMat& member_by_example, double target = 1.0);

// --- batched model evaluation ----------------------------------------------

/// Logits of one model over flat rows of X, chunked internally.
RMat model_logits(const ModelRecord& model, const RMat& X, int batch = 512);

/// Row-wise argmax labels.
std::vector<int> predict_labels(const ModelRecord& model, const RMat& X, int batch = 512);

/// [members, examples] matrix of correct-class logits of a zoo at the points.
RMat correct_logit_matrix(const Zoo& zoo, const RMat& X, const std::vector<int>& labels);

// --- attack success ---------------------------------------------------------

/// eligible[m][e] = 1 iff member m classifies clean example e correctly.
/// Success rates only count eligible (model, example) pairs.
std::vector<std::vector<char>> clean_correct_mask(const Zoo& zoo, const LabeledDataset& clean);

struct AsrResult {
  long eligible = 0;
  long flipped = 0;   ///< eligible pairs misclassified at the given points
  double asr = 0;     ///< flipped / eligible (0 when nothing is eligible)
  double accuracy = 0;///< plain accuracy over all (model, example) pairs
};
AsrResult attack_success(const Zoo& zoo, const RMat& X, const std::vector<int>& labels,
                         const std::vector<std::vector<char>>& eligible);

// --- trace utilities --------------------------------------------------------

/// [examples, D] iterates at one step (clamped to each trace's last step).
RMat points_at_step(const std::vector<AttackTrace>& traces, int step);
std::vector<int> trace_labels(const std::vector<AttackTrace>& traces);

// --- transferability-error proxy -------------------------------------------

/// White-box headroom proxy: craft on the target zoo itself with the same
/// budget, compare its fused crafting loss against the transferred point's.
struct TeHat {
  double loss_transfer = 0;  ///< target-zoo fused loss at the transferred point
  double loss_whitebox = 0;  ///< ... at the point crafted on the target zoo
  double te = 0;             ///< loss_whitebox - loss_transfer
};
TeHat te_hat(const Zoo& target, const AttackConfig& cfg, const Array& clean, int label,
             const Array& transferred);

// --- reporting --------------------------------------------------------------

struct DecompositionRow {
  int example_id = -1;
  std::string kind;  ///< "mse" | "kl" | "noise"
  double total = 0, vulnerability = 0, diversity = 0, residual = 0;
};
void write_decomposition_csv(const std::vector<DecompositionRow>& rows, const std::string& path);

}  // namespace tlab
