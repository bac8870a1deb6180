#include "tlab/rademacher.hpp"

#include <cmath>
#include <limits>

namespace tlab {

namespace {

void validate_signs(const std::vector<double>& sigma, size_t n) {
  if (sigma.size() != n)
    throw ShapeError("sign pattern covers " + std::to_string(sigma.size()) +
                     " members, objective has " + std::to_string(n));
  for (double s : sigma)
    if (s != 1.0 && s != -1.0) throw ConfigError("signs must be +1 or -1");
}

}  // namespace

// --- ZooSignedLoss ----------------------------------------------------------

ZooSignedLoss::ZooSignedLoss(std::vector<const ModelRecord*> members, const LabeledDataset& pool,
                             LossKind loss)
    : members_(std::move(members)), loss_(loss) {
  if (members_.empty()) throw ConfigError("signed loss needs at least one member");
  dim_ = numel(members_[0]->arch.input_shape);
  for (const ModelRecord* m : members_) {
    if (numel(m->arch.input_shape) != dim_)
      throw ShapeError("signed loss members disagree on input size");
    if (loss_ == LossKind::hinge && m->arch.num_classes != 1)
      throw SettingMismatch("hinge signed loss needs single-score members, got " +
                            std::to_string(m->arch.num_classes) + " classes");
  }
  if (pool.size() == 0) throw ConfigError("signed loss needs at least one anchor");
  if (pool.dim() != dim_)
    throw ShapeError("anchor pool dimension " + std::to_string(pool.dim()) +
                     " does not match member input size " + std::to_string(dim_));
  for (long i = 0; i < pool.size(); ++i) {
    anchor_x_.push_back(pool.images.row(i).transpose().array());
    int y = pool.labels[size_t(i)];
    if (loss_ == LossKind::hinge && y != 0 && y != 1)
      throw SettingMismatch("hinge anchors must carry binary labels (0/1), got " +
                            std::to_string(y));
    anchor_label_.push_back(y);
  }
  sigma_.assign(members_.size(), 1.0);
}

void ZooSignedLoss::set_signs(const std::vector<double>& sigma) {
  validate_signs(sigma, members_.size());
  sigma_ = sigma;
  by_label_.clear();  // graphs bake the signs in as scale factors
}

ZooSignedLoss::Graph& ZooSignedLoss::graph_for(int a) {
  int label = anchor_label_[size_t(a)];
  if (size_t(label) >= by_label_.size()) by_label_.resize(size_t(label) + 1);
  auto& slot = by_label_[size_t(label)];
  if (!slot) {
    auto g = std::make_unique<Graph>();
    g->x = Tensor::leaf({1, int(dim_)}, true, "x");
    Tensor acc;
    for (size_t i = 0; i < members_.size(); ++i) {
      Tensor z = build_logits(*members_[size_t(i)], g->x);
      Tensor li = loss_ == LossKind::hinge
                      ? hinge_loss(z, {label == 1 ? 1.0 : -1.0})
                      : cross_entropy_loss(z, {label});
      Tensor term = scale(li, sigma_[i] / double(members_.size()));
      acc = acc.valid() ? add(acc, term) : term;
    }
    g->objective = acc;
    slot = std::move(g);
  }
  return *slot;
}

double ZooSignedLoss::value(const Array& x, int a) {
  Graph& g = graph_for(a);
  g.x.set_values(x);
  evaluate(g.objective);
  return g.objective.item();
}

Array ZooSignedLoss::grad(const Array& x, int a) {
  Graph& g = graph_for(a);
  g.x.set_values(x);
  evaluate(g.objective);
  backward(g.objective);
  return g.x.grad();
}

// --- QuadraticToy -----------------------------------------------------------

QuadraticToy::QuadraticToy(std::vector<double> a, std::vector<double> b, std::vector<double> c,
                           std::vector<double> anchors)
    : a_(std::move(a)), b_(std::move(b)), c_(std::move(c)), anchors_(std::move(anchors)) {
  if (a_.empty() || a_.size() != b_.size() || a_.size() != c_.size())
    throw ConfigError("quadratic toy needs matching nonempty coefficient lists");
  if (anchors_.empty()) throw ConfigError("quadratic toy needs at least one anchor");
  sigma_.assign(a_.size(), 1.0);
}

Array QuadraticToy::anchor_x(int a) const {
  Array x(1);
  x[0] = anchors_[size_t(a)];
  return x;
}

void QuadraticToy::set_signs(const std::vector<double>& sigma) {
  validate_signs(sigma, a_.size());
  sigma_ = sigma;
}

double QuadraticToy::value(const Array& x, int) {
  double v = 0, t = x[0];
  for (size_t i = 0; i < a_.size(); ++i)
    v += sigma_[i] * (a_[i] * (t - c_[i]) * (t - c_[i]) + b_[i]);
  return v / double(a_.size());
}

Array QuadraticToy::grad(const Array& x, int) {
  double g = 0, t = x[0];
  for (size_t i = 0; i < a_.size(); ++i) g += sigma_[i] * 2.0 * a_[i] * (t - c_[i]);
  Array out(1);
  out[0] = g / double(a_.size());
  return out;
}

// --- estimator --------------------------------------------------------------

void RademacherConfig::validate() const {
  if (!exhaustive && draws < 1) throw ConfigError("rademacher draws must be >= 1");
  if (restarts < 1) throw ConfigError("rademacher restarts must be >= 1");
  if (inner_steps < 0) throw ConfigError("rademacher inner_steps must be >= 0");
  if (epsilon < 0) throw ConfigError("rademacher epsilon must be >= 0");
}

RademacherEstimate estimate_rademacher(SignedObjective& obj, const RademacherConfig& cfg) {
  cfg.validate();
  int n = obj.models();
  if (n < 1) throw ConfigError("rademacher estimator needs members");

  RademacherEstimate out;
  out.exhaustive = cfg.exhaustive;
  if (cfg.exhaustive) {
    if (n > 20) throw ConfigError("exhaustive sign enumeration is limited to 20 members");
    for (long mask = 0; mask < (1L << n); ++mask) {
      std::vector<double> s(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) s[size_t(i)] = (mask >> i) & 1 ? 1.0 : -1.0;
      out.signs.push_back(std::move(s));
    }
  } else {
    Prng root(cfg.seed, "rademacher");
    for (int m = 0; m < cfg.draws; ++m) {
      Prng g = root.fork("draw", uint64_t(m));
      std::vector<double> s(static_cast<size_t>(n));
      for (int i = 0; i < n; ++i) s[size_t(i)] = g.sign();
      out.signs.push_back(std::move(s));
    }
  }

  // Decaying sign-ascent schedule from eps/2 down to ~eps/1024.
  double ratio =
      cfg.inner_steps > 1 ? std::pow(1.0 / 512.0, 1.0 / double(cfg.inner_steps - 1)) : 1.0;
  Prng jroot(cfg.seed, "rademacher-jitter");

  for (size_t m = 0; m < out.signs.size(); ++m) {
    obj.set_signs(out.signs[m]);
    double sup = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < obj.anchors(); ++a) {
      Array anchor = obj.anchor_x(a);
      for (int r = 0; r < cfg.restarts; ++r) {
        Array x = anchor;
        if (r > 0) {
          Prng jg = jroot.fork("draw", m).fork("anchor", uint64_t(a)).fork("restart", uint64_t(r));
          for (long i = 0; i < x.size(); ++i) x[i] += jg.uniform(-cfg.epsilon, cfg.epsilon);
          x = project_ball(x, anchor, cfg.norm, cfg.epsilon);
        }
        sup = std::max(sup, obj.value(x, a));
        double step = cfg.epsilon * 0.5;
        for (int k = 0; k < cfg.inner_steps; ++k) {
          Array g = obj.grad(x, a);
          if (cfg.norm == BallNorm::linf) {
            x += step * g.sign();
          } else {
            double gn = std::sqrt(g.square().sum());
            if (gn > 0) x += step * g / gn;
          }
          x = project_ball(x, anchor, cfg.norm, cfg.epsilon);
          sup = std::max(sup, obj.value(x, a));
          step *= ratio;
        }
      }
    }
    out.per_draw.push_back(sup);
  }

  double mean = 0;
  for (double v : out.per_draw) mean += v;
  mean /= double(out.per_draw.size());
  out.estimate = mean;
  if (!cfg.exhaustive && out.per_draw.size() > 1) {
    double var = 0;
    for (double v : out.per_draw) var += (v - mean) * (v - mean);
    var /= double(out.per_draw.size() - 1);
    out.std_error = std::sqrt(var / double(out.per_draw.size()));
  }
  return out;
}

double grid_oracle_1d(SignedObjective& obj, double eps, int grid_points) {
  if (obj.dim() != 1) throw ConfigError("grid oracle handles 1-D objectives only");
  if (grid_points < 2) throw ConfigError("grid oracle needs at least 2 points");
  int n = obj.models();
  if (n > 20) throw ConfigError("grid oracle enumerates at most 20 members");

  double acc = 0;
  for (long mask = 0; mask < (1L << n); ++mask) {
    std::vector<double> s(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) s[size_t(i)] = (mask >> i) & 1 ? 1.0 : -1.0;
    obj.set_signs(s);
    double sup = -std::numeric_limits<double>::infinity();
    Array xa(1);
    for (int a = 0; a < obj.anchors(); ++a) {
      double c = obj.anchor_x(a)[0];
      double lo = std::max(0.0, c - eps), hi = std::min(1.0, c + eps);
      for (int gp = 0; gp < grid_points; ++gp) {
        xa[0] = lo + (hi - lo) * double(gp) / double(grid_points - 1);
        sup = std::max(sup, obj.value(xa, a));
      }
    }
    acc += sup;
  }
  return acc / double(1L << n);
}

// --- bounds -----------------------------------------------------------------

namespace {

void require_nonneg(double v, const char* name) {
  if (!(v >= 0)) throw ConfigError(std::string("bound input ") + name + " must be >= 0");
}

void require_count(long v, const char* name) {
  if (v < 1) throw ConfigError(std::string("bound input ") + name + " must be >= 1");
}

}  // namespace

double bound_linear(double B, double C, long N) {
  require_nonneg(B, "B");
  require_nonneg(C, "C");
  require_count(N, "N");
  return B * C / std::sqrt(double(N));
}

double bound_two_layer(double B, double head_norm, double unit_cap, long m, long N) {
  require_nonneg(B, "B");
  require_nonneg(head_norm, "head_norm");
  require_nonneg(unit_cap, "unit_cap");
  require_count(m, "m");
  require_count(N, "N");
  return std::sqrt(double(m)) * B * head_norm * unit_cap / std::sqrt(double(N));
}

double bound_mlp(int depth_l, double B, double T, long N) {
  require_count(depth_l, "depth_l");
  require_nonneg(B, "B");
  require_nonneg(T, "T");
  require_count(N, "N");
  return (std::sqrt(2.0 * std::log(2.0) * double(depth_l)) + 1.0) * B * T / std::sqrt(double(N));
}

// --- bound inputs and dominance ---------------------------------------------

BoundInputs derive_bound_inputs(const Zoo& zoo, const RMat& pool_X, BallNorm norm, double eps,
                                LossKind loss) {
  if (zoo.members.empty()) throw ConfigError("bound inputs need a nonempty zoo");
  if (pool_X.rows() == 0) throw ConfigError("bound inputs need a nonempty pool");
  if (eps < 0) throw ConfigError("bound inputs need eps >= 0");
  const ArchSpec& a0 = zoo.members[0].arch;
  if (pool_X.cols() != numel(a0.input_shape))
    throw ShapeError("pool dimension does not match the zoo input shape");

  BoundInputs in;
  in.N = zoo.size();
  in.family = a0.family;
  in.num_classes = a0.num_classes;
  in.loss = loss;
  in.depth_l = a0.family == ModelFamily::linear ? 1 : a0.depth + 1;
  in.hidden_m = a0.family == ModelFamily::mlp ? a0.hidden : 0;

  std::vector<double> layer_frob, layer_unit;
  for (const ModelRecord& m : zoo.members) {
    if (m.arch.family != a0.family || m.arch.depth != a0.depth || m.arch.hidden != a0.hidden ||
        m.arch.input_shape != a0.input_shape || m.arch.num_classes != a0.num_classes)
      throw SettingMismatch("bound inputs need a homogeneous zoo (member '" +
                            m.arch.describe() + "' differs from '" + a0.describe() + "')");
    if (m.arch.bias) in.bias_free = false;
    std::vector<TensorNormInfo> norms = norm_summary(m);
    if (layer_frob.empty()) {
      layer_frob.assign(norms.size(), 0.0);
      layer_unit.assign(norms.size(), 0.0);
    }
    for (size_t j = 0; j < norms.size(); ++j) {
      layer_frob[j] = std::max(layer_frob[j], norms[j].frobenius);
      layer_unit[j] = std::max(layer_unit[j], norms[j].max_unit);
    }
  }
  in.T = 1;
  for (double f : layer_frob) in.T *= f;
  in.C_linear = layer_unit.empty() ? 0 : layer_unit.front();
  in.unit_cap = layer_unit.empty() ? 0 : layer_unit.front();
  in.head_norm = layer_frob.empty() ? 0 : layer_frob.back();

  double B = 0;
  long d = pool_X.cols();
  for (long r = 0; r < pool_X.rows(); ++r) {
    Array x = pool_X.row(r).transpose().array();
    if (norm == BallNorm::linf) {
      B = std::max(B, std::sqrt((x + eps).min(1.0).square().sum()));
    } else {
      B = std::max(B, std::min(std::sqrt(x.square().sum()) + eps, std::sqrt(double(d))));
    }
  }
  in.B = B;
  return in;
}

DominanceReport check_dominance(const RademacherEstimate& est, const BoundInputs& in) {
  if (in.loss != LossKind::hinge)
    throw SettingMismatch("closed-form bounds assume the 1-Lipschitz hinge margin loss");
  if (in.num_classes != 1)
    throw SettingMismatch("closed-form bounds assume single-score members, zoo has " +
                          std::to_string(in.num_classes) + " classes");
  if (!in.bias_free) throw SettingMismatch("closed-form bounds assume bias-free members");
  if (in.family == ModelFamily::cnn)
    throw SettingMismatch("no closed-form bound for conv members in this lab");

  DominanceReport r;
  r.estimate = est.estimate;
  r.std_error = est.std_error;
  if (in.family == ModelFamily::linear) {
    r.bound_kind = "linear";
    r.bound = bound_linear(in.B, in.C_linear, in.N);
  } else {
    r.bound_kind = "mlp";
    r.bound = bound_mlp(in.depth_l, in.B, in.T, in.N);
  }
  r.margin = r.bound + 2.0 * est.std_error - est.estimate;
  r.holds = r.margin >= 0;
  return r;
}

}  // namespace tlab
