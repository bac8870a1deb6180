#include "tlab/attack.hpp"

#include "tlab/csv.hpp"
#include "tlab/parallel.hpp"

#include <cmath>
#include <mutex>

namespace tlab {

BallNorm parse_ball_norm(const std::string& id) {
  if (id == "linf") return BallNorm::linf;
  if (id == "l2") return BallNorm::l2;
  throw ConfigError("unknown ball norm '" + id + "' (expected linf|l2)");
}

Fusion parse_fusion(const std::string& id) {
  if (id == "loss_avg") return Fusion::loss_avg;
  if (id == "logit_avg") return Fusion::logit_avg;
  if (id == "prob_avg") return Fusion::prob_avg;
  throw ConfigError("unknown fusion '" + id + "' (expected loss_avg|logit_avg|prob_avg)");
}

CraftLoss parse_craft_loss(const std::string& id) {
  if (id == "ce" || id == "cross_entropy") return CraftLoss::cross_entropy;
  if (id == "mse") return CraftLoss::mse;
  throw ConfigError("unknown craft loss '" + id + "' (expected ce|mse)");
}

const char* to_string(BallNorm n) { return n == BallNorm::linf ? "linf" : "l2"; }

const char* to_string(Fusion f) {
  switch (f) {
    case Fusion::loss_avg: return "loss_avg";
    case Fusion::logit_avg: return "logit_avg";
    case Fusion::prob_avg: return "prob_avg";
  }
  return "?";
}

const char* to_string(CraftLoss c) { return c == CraftLoss::cross_entropy ? "ce" : "mse"; }

void AttackConfig::validate() const {
  if (epsilon < 0) throw ConfigError("attack epsilon must be >= 0");
  if (steps < 0) throw ConfigError("attack steps must be >= 0");
  if (momentum < 0) throw ConfigError("attack momentum must be >= 0");
  if (epsilon > 0 && alpha > epsilon)
    throw ConfigError("attack alpha " + format_g10(alpha) + " exceeds epsilon " +
                      format_g10(epsilon));
  if (fusion == Fusion::prob_avg && craft != CraftLoss::cross_entropy)
    throw ConfigError("prob_avg fusion requires the cross-entropy craft loss");
}

Array project_ball(const Array& x, const Array& anchor, BallNorm norm, double eps) {
  if (x.size() != anchor.size())
    throw ShapeError("project_ball: point has " + std::to_string(x.size()) +
                     " coordinates, anchor has " + std::to_string(anchor.size()));
  Array out = x;
  if (norm == BallNorm::linf) {
    out = out.min(anchor + eps).max(anchor - eps);
  } else {
    Array d = out - anchor;
    double n = std::sqrt(d.square().sum());
    if (n > eps) out = anchor + d * (eps / n);
  }
  return out.min(1.0).max(0.0);
}

namespace {

Tensor scaled_sum(const std::vector<Tensor>& terms, double factor) {
  Tensor acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, factor);
}

Tensor craft_loss_of(const Tensor& logits, int label, CraftLoss craft) {
  if (craft == CraftLoss::cross_entropy) return cross_entropy_loss(logits, {label});
  // Distance of the correct-class logit from its nominal clean value 1;
  // ascending pushes the score away from the class.
  return mse_loss(pick(logits, {label}), Tensor::from(Array::Ones(1), {1}));
}

}  // namespace

EnsembleGraph build_ensemble_graph(const std::vector<const ModelRecord*>& members, int label,
                                   const AttackConfig& cfg) {
  cfg.validate();
  if (members.empty()) throw ConfigError("ensemble graph needs at least one member");
  for (const ModelRecord* m : members)
    for (const Param& p : m->params)
      if (p.tensor.requires_grad())
        throw std::logic_error("attack members must be frozen (call set_trainable(false))");

  const Shape& ishape = members[0]->arch.input_shape;
  long dim = numel(ishape);
  EnsembleGraph g;
  g.x = Tensor::leaf({1, int(dim)}, true, "x");
  for (const ModelRecord* m : members) {
    if (numel(m->arch.input_shape) != dim)
      throw ShapeError("ensemble members disagree on input size: " +
                       shape_str(m->arch.input_shape) + " vs " + shape_str(ishape));
    Tensor z = build_logits(*m, g.x);
    g.logits.push_back(z);
    g.member_loss.push_back(craft_loss_of(z, label, cfg.craft));
    g.correct_logit.push_back(pick(z, {label}));
  }

  double inv_n = 1.0 / double(members.size());
  switch (cfg.fusion) {
    case Fusion::loss_avg:
      g.objective = scaled_sum(g.member_loss, inv_n);
      break;
    case Fusion::logit_avg:
      g.objective = craft_loss_of(scaled_sum(g.logits, inv_n), label, cfg.craft);
      break;
    case Fusion::prob_avg: {
      std::vector<Tensor> probs;
      probs.reserve(g.logits.size());
      for (const Tensor& z : g.logits) probs.push_back(softmax(z));
      Tensor mean_prob = scaled_sum(probs, inv_n);
      g.objective = scale(mean(log(pick(mean_prob, {label}))), -1.0);
      break;
    }
  }

  // Not every measured node feeds the fused objective (e.g. per-member losses
  // under logit_avg), so hang them all off one auxiliary root with weight 0.
  std::vector<Tensor> extras;
  for (size_t i = 0; i < g.member_loss.size(); ++i) {
    extras.push_back(g.member_loss[i]);
    extras.push_back(mean(g.correct_logit[i]));
  }
  g.probe = add(g.objective, scale(scaled_sum(extras, 1.0), 0.0));
  return g;
}

namespace {

AttackStep measure(const EnsembleGraph& g, const Array& clean) {
  AttackStep s;
  s.x = g.x.values();
  s.fused_loss = g.objective.item();
  int n = int(g.member_loss.size());
  int k = g.logits[0].shape()[1];
  s.member_loss.resize(n);
  s.correct_logit.resize(n);
  s.logits.resize(n, k);
  for (int i = 0; i < n; ++i) {
    s.member_loss[i] = g.member_loss[i].item();
    s.correct_logit[i] = g.correct_logit[i].values()[0];
    for (int j = 0; j < k; ++j) s.logits(i, j) = g.logits[i].values()[j];
  }
  Array d = s.x - clean;
  s.linf_dist = d.size() ? d.abs().maxCoeff() : 0.0;
  s.l2_dist = std::sqrt(d.square().sum());
  return s;
}

}  // namespace

AttackTrace mifgsm_attack(const std::vector<const ModelRecord*>& members, const Array& clean,
                          int label, const AttackConfig& cfg, int example_id) {
  EnsembleGraph g = build_ensemble_graph(members, label, cfg);
  if (clean.size() != g.x.size())
    throw ShapeError("attack input has " + std::to_string(clean.size()) +
                     " pixels, members expect " + std::to_string(g.x.size()));

  AttackTrace trace;
  trace.example_id = example_id;
  trace.label = label;
  trace.clean = clean;
  trace.steps.reserve(size_t(cfg.steps) + 1);

  g.x.set_values(clean);
  evaluate(g.probe);
  trace.steps.push_back(measure(g, clean));

  const double alpha = cfg.step_size();
  Array velocity = Array::Zero(clean.size());
  Array x = clean;
  for (int t = 1; t <= cfg.steps; ++t) {
    backward(g.probe);
    Array grad = g.x.grad();
    if (cfg.norm == BallNorm::linf) {
      double n1 = grad.abs().sum();
      velocity = cfg.momentum * velocity + (n1 > 0 ? Array(grad / n1) : Array(Array::Zero(grad.size())));
      x += alpha * velocity.sign();
    } else {
      double n2 = std::sqrt(grad.square().sum());
      velocity = cfg.momentum * velocity + (n2 > 0 ? Array(grad / n2) : Array(Array::Zero(grad.size())));
      double vn = std::sqrt(velocity.square().sum());
      if (vn > 0) x += alpha * velocity / vn;
    }
    x = project_ball(x, clean, cfg.norm, cfg.epsilon);
    g.x.set_values(x);
    evaluate(g.probe);
    trace.steps.push_back(measure(g, clean));
  }
  return trace;
}

std::vector<const ModelRecord*> member_ptrs(const Zoo& zoo, int first_n) {
  int n = first_n < 0 ? zoo.size() : first_n;
  if (n > zoo.size())
    throw ConfigError("requested " + std::to_string(n) + " members from a zoo of " +
                      std::to_string(zoo.size()));
  std::vector<const ModelRecord*> out;
  out.reserve(size_t(n));
  for (int i = 0; i < n; ++i) out.push_back(&zoo.members[size_t(i)]);
  return out;
}

std::vector<AttackTrace> attack_pool(const Zoo& surrogate, const LabeledDataset& pool,
                                     const AttackConfig& cfg, int jobs, int first_n_members) {
  std::vector<AttackTrace> traces(size_t(pool.size()));
  for_each_trace(surrogate, pool, cfg, jobs, first_n_members,
                 [&](const AttackTrace& t) { traces[size_t(t.example_id)] = t; });
  return traces;
}

void for_each_trace(const Zoo& surrogate, const LabeledDataset& pool, const AttackConfig& cfg,
                    int jobs, int first_n_members,
                    const std::function<void(const AttackTrace&)>& sink) {
  cfg.validate();
  std::vector<const ModelRecord*> members = member_ptrs(surrogate, first_n_members);
  std::mutex mu;
  parallel_for(pool.size(), jobs, [&](long i) {
    Array clean = pool.images.row(i).transpose().array();
    AttackTrace t = mifgsm_attack(members, clean, pool.labels[size_t(i)], cfg, int(i));
    std::lock_guard<std::mutex> lock(mu);
    sink(t);
  });
}

void write_trace_csv(const std::vector<AttackTrace>& traces, const AttackConfig& cfg,
                     const std::string& path) {
  CsvWriter csv(path, {"example_id", "step", "fused_loss", "mean_member_loss", "ball_norm",
                       "linf_dist", "l2_dist"});
  for (const AttackTrace& t : traces) {
    for (size_t s = 0; s < t.steps.size(); ++s) {
      const AttackStep& st = t.steps[s];
      csv.row() << t.example_id << long(s) << st.fused_loss << st.member_loss.mean()
                << to_string(cfg.norm) << st.linf_dist << st.l2_dist;
    }
  }
}

}  // namespace tlab
