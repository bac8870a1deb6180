#pragma once

#include "tlab/common.hpp"

#include <memory>
#include <string>
#include <vector>

namespace tlab {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over dense tensors.
//
// A Tensor is a value-semantic handle on a graph node.  Building an op runs
// its forward immediately (values are always inspectable); after mutating a
// leaf in place, evaluate(root) re-runs every forward in topological order.
// backward(root) zeroes the gradients reachable from root and accumulates
// vector-Jacobian products along the reverse topological order.  Graphs are
// DAGs: shared leaves (model parameters used by many members of an ensemble
// objective) are handled naturally.
//
// Storage is a flat Eigen array in row-major element order plus an explicit
// shape; matmul views the flat data through row-major Eigen maps.  Rank-0
// (shape {}) denotes a scalar with one element.
// ---------------------------------------------------------------------------

enum class OpKind : uint8_t {
  leaf,
  matmul,
  conv2d,
  add,
  mul,
  relu,
  softmax,
  log,
  mse_loss,
  cross_entropy_loss,
  kl_loss,
  hinge_loss,
  reshape,
  mean,
  sum,
  clamp,
  scale,
  pick,
};

const char* op_name(OpKind k);

struct TensorNode {
  OpKind op = OpKind::leaf;
  Shape shape;
  Array values;
  Array grad;
  bool requires_grad = false;  ///< leaves only: participates in backward
  bool needs_grad = false;     ///< this node lies on a path to a grad leaf
  std::vector<std::shared_ptr<TensorNode>> parents;

  // Op attributes (meaning depends on op).
  int stride = 1, pad = 0;        // conv2d
  double lo = 0.0, hi = 0.0;      // clamp bounds
  double factor = 1.0;            // scale multiplier
  std::vector<int> labels;        // cross_entropy_loss / pick class indices
  std::vector<double> sign_labels;  // hinge_loss targets (+1/-1)
  std::string name;               // optional tag (parameters, inputs)

  long size() const { return long(values.size()); }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  /// Zero-initialized leaf.
  static Tensor leaf(Shape shape, bool requires_grad = false, std::string name = "");
  /// Leaf initialized from flat data (row-major element order).
  static Tensor from(const Array& data, Shape shape, bool requires_grad = false,
                     std::string name = "");
  static Tensor scalar(double v);

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long size() const { return node_->size(); }
  int rank() const { return int(node_->shape.size()); }
  Array& values() { return node_->values; }
  const Array& values() const { return node_->values; }
  Array& grad() { return node_->grad; }
  const Array& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }

  /// Overwrite a leaf's contents in place (shape must match).  Downstream
  /// values are stale until evaluate() on a root above this leaf.
  void set_values(const Array& data);

  /// Value of a single-element tensor.
  double item() const;

  TensorNode* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode>& ptr() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// --- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// 2-D convolution, NCHW input [B,Ci,H,W], kernel [Co,Ci,kh,kw], zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride = 1, int pad = 0);
/// Elementwise add; also accepts a rank-1 bias broadcast: [B,K]+[K] over rows,
/// [B,C,H,W]+[C] over channels.  No other broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& a);
/// Softmax along the last axis (rank 1 or 2); axis must name the last axis.
Tensor softmax(const Tensor& a, int axis = -1);
Tensor log(const Tensor& a);
/// Mean over all elements of (a-b)^2.
Tensor mse_loss(const Tensor& a, const Tensor& b);
/// Mean over rows of  log-sum-exp(z_row) - z_row[label].
Tensor cross_entropy_loss(const Tensor& logits, const std::vector<int>& labels);
/// Mean over rows of sum_k p_k log(p_k / q_k); rank 1 counts as a single row.
Tensor kl_loss(const Tensor& p, const Tensor& q);
/// Mean over rows of max(0, 1 - y*f) with y in {-1,+1}.
Tensor hinge_loss(const Tensor& scores, const std::vector<double>& sign_labels);
Tensor reshape(const Tensor& a, Shape shape);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor scale(const Tensor& a, double factor);
/// Per-row gather: pick(t[B,K], idx)[b] = t[b, idx[b]].
Tensor pick(const Tensor& t, const std::vector<int>& labels);

// --- graph execution -------------------------------------------------------

/// Nodes reachable from root, parents before children.
std::vector<TensorNode*> topo_order(const Tensor& root);

/// Recompute every non-leaf value reachable from root (after leaf mutation).
void evaluate(const Tensor& root);

/// Zero the gradients reachable from root, seed d(root)=1, accumulate VJPs.
/// root must hold exactly one element.
void backward(const Tensor& root);

/// Hash of all branch decisions (relu/clamp/hinge active sets, pick rows are
/// fixed) in the graph at current values.  Used by the finite-difference
/// checker to skip coordinates whose perturbation crosses a kink.
uint64_t branch_signature(const Tensor& root);

// --- finite-difference oracle ---------------------------------------------

struct FdReport {
  long checked = 0;
  long skipped = 0;           ///< coordinates skipped for kink proximity
  double max_rel_err = 0.0;
  std::string worst;          ///< leaf/coordinate with the largest error
};

/// Central-difference check of d(root)/d(leaf) for every listed leaf
/// coordinate.  Coordinates whose +/-h evaluations disagree on any branch
/// decision are skipped (non-differentiable neighborhoods).  Relative error
/// uses max(1, |analytic|, |numeric|) in the denominator.
FdReport finite_diff_check(const Tensor& root, const std::vector<Tensor>& leaves,
                           double h = 1e-5);

}  // namespace tlab
