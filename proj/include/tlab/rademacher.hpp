#pragma once

#include "tlab/attack.hpp"

namespace tlab {

// ---------------------------------------------------------------------------
// Ensemble Rademacher complexity over the adversarial region.
//
// For N fixed members with losses l_i and a feasible region Z (the union of
// epsilon-balls around attack anchors, intersected with [0,1]^d), the
// complexity is
//
//   R_N = E_sigma [ sup_{z in Z} (1/N) sum_i sigma_i * l_i(z) ],
//
// sigma uniform in {-1,+1}^N.  The estimator averages per-pattern suprema
// found by projected sign-gradient ascent with nested restarts; patterns come
// either from Monte-Carlo draws or from exhaustive enumeration (small N).
// Closed-form norm-based bounds cover bias-free single-score members under a
// 1-Lipschitz margin loss; check_dominance refuses settings outside that
// regime instead of reporting a vacuous comparison.
// ---------------------------------------------------------------------------

/// One sign pattern at a time: value/gradient of (1/N) sum_i sigma_i l_i(x)
/// with the label taken from the anchor. Calls are self-contained (each value
/// or gradient refreshes its own forward pass).
class SignedObjective {
 public:
  virtual ~SignedObjective() = default;
  virtual int models() const = 0;
  virtual long dim() const = 0;
  virtual int anchors() const = 0;
  virtual Array anchor_x(int a) const = 0;
  virtual void set_signs(const std::vector<double>& sigma) = 0;
  virtual double value(const Array& x, int a) = 0;
  virtual Array grad(const Array& x, int a) = 0;
};

/// Real zoo members around labeled anchors.  Hinge members must be
/// single-score; cross-entropy members use the anchor's class label.
class ZooSignedLoss : public SignedObjective {
 public:
  ZooSignedLoss(std::vector<const ModelRecord*> members, const LabeledDataset& pool,
                LossKind loss);
  int models() const override { return int(members_.size()); }
  long dim() const override { return dim_; }
  int anchors() const override { return int(anchor_x_.size()); }
  Array anchor_x(int a) const override { return anchor_x_[size_t(a)]; }
  void set_signs(const std::vector<double>& sigma) override;
  double value(const Array& x, int a) override;
  Array grad(const Array& x, int a) override;

 private:
  struct Graph {
    Tensor x;
    Tensor objective;
  };
  Graph& graph_for(int a);

  std::vector<const ModelRecord*> members_;
  LossKind loss_;
  long dim_ = 0;
  std::vector<Array> anchor_x_;
  std::vector<int> anchor_label_;            ///< class id (binary hinge: 0/1)
  std::vector<double> sigma_;
  std::vector<std::unique_ptr<Graph>> by_label_;  ///< graph per class label
};

/// 1-D members with losses a_i (x - c_i)^2 + b_i; closed-form derivatives
/// make these the reference workload for estimator-vs-oracle checks.
class QuadraticToy : public SignedObjective {
 public:
  QuadraticToy(std::vector<double> a, std::vector<double> b, std::vector<double> c,
               std::vector<double> anchors);
  int models() const override { return int(a_.size()); }
  long dim() const override { return 1; }
  int anchors() const override { return int(anchors_.size()); }
  Array anchor_x(int a) const override;
  void set_signs(const std::vector<double>& sigma) override;
  double value(const Array& x, int a) override;
  Array grad(const Array& x, int a) override;

 private:
  std::vector<double> a_, b_, c_, anchors_, sigma_;
};

struct RademacherConfig {
  int draws = 64;          ///< Monte-Carlo sign patterns (ignored if exhaustive)
  int restarts = 2;        ///< ascent restarts per anchor (restart 0 = anchor)
  int inner_steps = 60;    ///< projected sign-ascent steps per restart
  BallNorm norm = BallNorm::linf;
  double epsilon = 8.0 / 255.0;
  bool exhaustive = false; ///< enumerate all 2^N patterns (N <= 20)
  uint64_t seed = 0;

  void validate() const;
};

struct RademacherEstimate {
  double estimate = 0;
  double std_error = 0;              ///< sample stderr over patterns (0 if exhaustive)
  bool exhaustive = false;
  std::vector<double> per_draw;      ///< supremum found for each pattern
  std::vector<std::vector<double>> signs;  ///< the patterns themselves
};

/// The supremum search keeps the best value seen anywhere along each ascent
/// path, so more restarts / steps can only tighten the estimate upward.
RademacherEstimate estimate_rademacher(SignedObjective& obj, const RademacherConfig& cfg);

/// Exhaustive-sign, dense-grid reference for 1-D objectives: mean over all
/// sign patterns of the grid maximum over every anchor's clipped interval.
double grid_oracle_1d(SignedObjective& obj, double eps, int grid_points);

// --- closed-form bounds -----------------------------------------------------

/// Linear members w.x with ||x|| <= B, ||w|| <= C:    B*C / sqrt(N).
double bound_linear(double B, double C, long N);

/// Two-layer members w.phi(Ux), ||w|| <= head_norm, rows of U <= unit_cap,
/// m hidden units:   sqrt(m)*B*head_norm*unit_cap / sqrt(N).
double bound_two_layer(double B, double head_norm, double unit_cap, long m, long N);

/// Depth-l members (l weight layers, 1-Lipschitz activations), T the product
/// over layers of the worst member Frobenius norm:
///   (sqrt(2*ln(2)*l) + 1) * B * T / sqrt(N).
double bound_mlp(int depth_l, double B, double T, long N);

// --- bound inputs from trained zoos -----------------------------------------

struct BoundInputs {
  long N = 0;
  ModelFamily family = ModelFamily::linear;
  int depth_l = 1;         ///< weight layers (hidden layers + head)
  double B = 0;            ///< sup of ||x||_2 over the attack region
  double C_linear = 0;     ///< max member weight-column norm (linear family)
  double head_norm = 0;    ///< max member ||head||_2 (two-layer form)
  double unit_cap = 0;     ///< max member per-hidden-unit norm (two-layer form)
  long hidden_m = 0;
  double T = 1;            ///< product of per-layer worst Frobenius norms
  bool bias_free = true;
  int num_classes = 1;
  LossKind loss = LossKind::hinge;
};

/// Norm data from a homogeneous zoo plus the region radius around the pool.
/// B uses the box-aware worst case: per coordinate min(1, x+eps) for linf,
/// min(||x||+eps, sqrt(d)) for l2.
BoundInputs derive_bound_inputs(const Zoo& zoo, const RMat& pool_X, BallNorm norm, double eps,
                                LossKind loss);

struct DominanceReport {
  std::string bound_kind;  ///< "linear" | "mlp"
  double estimate = 0, std_error = 0, bound = 0;
  double margin = 0;       ///< bound + 2*std_error - estimate
  bool holds = false;
};

/// Compares the estimate against the family-appropriate closed form.  Refuses
/// (SettingMismatch) when the lemma preconditions fail: non-hinge loss,
/// multi-score heads, bias terms, or conv members.
DominanceReport check_dominance(const RademacherEstimate& est, const BoundInputs& in);

}  // namespace tlab
