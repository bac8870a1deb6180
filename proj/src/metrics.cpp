#include "tlab/metrics.hpp"

#include "tlab/csv.hpp"

#include <algorithm>
#include <cmath>

namespace tlab {

MseDecomposition mse_decompose(const Vec& preds, double target) {
  if (preds.size() == 0) throw ConfigError("mse_decompose: no member predictions");
  MseDecomposition d;
  double fbar = preds.mean();
  d.total = (preds.array() - target).square().mean();
  d.vulnerability = (fbar - target) * (fbar - target);
  d.diversity = (preds.array() - fbar).square().mean();
  d.residual = d.total - d.vulnerability - d.diversity;
  return d;
}

NoiseDecomposition noise_decompose(const Vec& preds, double bayes, double eta2) {
  if (preds.size() == 0) throw ConfigError("noise_decompose: no member predictions");
  if (eta2 < 0) throw ConfigError("noise_decompose: negative noise variance");
  NoiseDecomposition d;
  double fbar = preds.mean();
  d.vulnerability = (fbar - bayes) * (fbar - bayes);
  d.diversity = (preds.array() - fbar).square().mean();
  d.noise = eta2;
  d.risk = d.vulnerability + d.diversity + d.noise;
  return d;
}

Vec geometric_centroid(const RMat& probs, double floor) {
  if (probs.rows() == 0 || probs.cols() == 0)
    throw ConfigError("geometric_centroid: empty member table");
  long n = probs.rows(), k = probs.cols();
  Vec log_mean = Vec::Zero(k);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < k; ++j) log_mean[j] += std::log(std::max(probs(i, j), floor));
  log_mean /= double(n);
  // Subtract the max before exponentiating for stability, renormalize after.
  double m = log_mean.maxCoeff();
  Vec raw = (log_mean.array() - m).exp();
  return raw / raw.sum();
}

KlDecomposition kl_decompose(const Vec& y, const RMat& probs, double floor) {
  if (y.size() != probs.cols())
    throw ShapeError("kl_decompose: label has " + std::to_string(y.size()) +
                     " classes, members have " + std::to_string(probs.cols()));
  long n = probs.rows(), k = probs.cols();
  KlDecomposition d;

  // log of the raw (unnormalized) geometric mean, and log Z.
  Vec log_geo = Vec::Zero(k);
  for (long i = 0; i < n; ++i)
    for (long j = 0; j < k; ++j) log_geo[j] += std::log(std::max(probs(i, j), floor));
  log_geo /= double(n);
  double m = log_geo.maxCoeff();
  double log_z = m + std::log((log_geo.array() - m).exp().sum());

  double total = 0;
  for (long i = 0; i < n; ++i) {
    double kl = 0;
    for (long j = 0; j < k; ++j)
      if (y[j] != 0.0) kl += y[j] * (std::log(y[j]) - std::log(std::max(probs(i, j), floor)));
    total += kl;
  }
  d.total = total / double(n);

  double vul = 0;  // KL(y || centroid) with log centroid = log_geo - log_z
  for (long j = 0; j < k; ++j)
    if (y[j] != 0.0) vul += y[j] * (std::log(y[j]) - (log_geo[j] - log_z));
  d.vulnerability = vul;
  d.diversity = -log_z;
  d.residual = d.total - d.vulnerability - d.diversity;
  return d;
}

Vec smooth_onehot(int num_classes, int label, double s) {
  if (label < 0 || label >= num_classes)
    throw ConfigError("smooth_onehot: label " + std::to_string(label) + " outside 0.." +
                      std::to_string(num_classes - 1));
  Vec y = Vec::Constant(num_classes, s / num_classes);
  y[label] += 1.0 - s;
  return y;
}

double prediction_variance(const RMat& member_by_example) {
  long n = member_by_example.rows(), e = member_by_example.cols();
  if (n == 0 || e == 0) throw ConfigError("prediction_variance: empty table");
  double acc = 0;
  for (long j = 0; j < e; ++j) {
    double mean = member_by_example.col(j).mean();
    acc += (member_by_example.col(j).array() - mean).square().mean();
  }
  return acc / double(e);
}

double mse_margin_loss(const RMat& member_by_example, double target) {
  if (member_by_example.size() == 0) throw ConfigError("mse_margin_loss: empty table");
  return (member_by_example.array() - target).square().mean();
}

RMat model_logits(const ModelRecord& model, const RMat& X, int batch) {
  long n = X.rows(), d = X.cols();
  if (d != numel(model.arch.input_shape))
    throw ShapeError("model_logits: input rows have " + std::to_string(d) +
                     " pixels, model expects " + shape_str(model.arch.input_shape));
  int k = model.arch.num_classes;
  RMat out(n, k);
  for (long start = 0; start < n; start += batch) {
    long b = std::min<long>(batch, n - start);
    Eigen::Map<const Array> flat(X.data() + start * d, b * d);
    Tensor in = Tensor::from(flat, {int(b), int(d)});
    Tensor z = build_logits(model, in);
    out.block(start, 0, b, k) = MapCRMat(z.values().data(), b, k);
  }
  return out;
}

std::vector<int> predict_labels(const ModelRecord& model, const RMat& X, int batch) {
  RMat z = model_logits(model, X, batch);
  std::vector<int> out(size_t(z.rows()));
  for (long i = 0; i < z.rows(); ++i) {
    int best = 0;
    for (int j = 1; j < z.cols(); ++j)
      if (z(i, j) > z(i, best)) best = j;
    out[size_t(i)] = best;
  }
  return out;
}

RMat correct_logit_matrix(const Zoo& zoo, const RMat& X, const std::vector<int>& labels) {
  if (long(labels.size()) != X.rows())
    throw ShapeError("correct_logit_matrix: " + std::to_string(X.rows()) + " rows vs " +
                     std::to_string(labels.size()) + " labels");
  RMat out(zoo.size(), X.rows());
  for (int m = 0; m < zoo.size(); ++m) {
    RMat z = model_logits(zoo.members[size_t(m)], X);
    for (long e = 0; e < X.rows(); ++e) {
      int y = labels[size_t(e)];
      if (y < 0 || y >= z.cols())
        throw ConfigError("correct_logit_matrix: label " + std::to_string(y) +
                          " outside the model's " + std::to_string(z.cols()) + " classes");
      out(m, e) = z(e, y);
    }
  }
  return out;
}

std::vector<std::vector<char>> clean_correct_mask(const Zoo& zoo, const LabeledDataset& clean) {
  std::vector<std::vector<char>> mask(size_t(zoo.size()));
  for (int m = 0; m < zoo.size(); ++m) {
    std::vector<int> pred = predict_labels(zoo.members[size_t(m)], clean.images);
    mask[size_t(m)].resize(size_t(clean.size()));
    for (long e = 0; e < clean.size(); ++e)
      mask[size_t(m)][size_t(e)] = char(pred[size_t(e)] == clean.labels[size_t(e)]);
  }
  return mask;
}

AsrResult attack_success(const Zoo& zoo, const RMat& X, const std::vector<int>& labels,
                         const std::vector<std::vector<char>>& eligible) {
  if (int(eligible.size()) != zoo.size())
    throw ShapeError("attack_success: mask covers " + std::to_string(eligible.size()) +
                     " members, zoo has " + std::to_string(zoo.size()));
  AsrResult r;
  long correct_pairs = 0;
  for (int m = 0; m < zoo.size(); ++m) {
    if (long(eligible[size_t(m)].size()) != X.rows())
      throw ShapeError("attack_success: mask row " + std::to_string(m) + " covers " +
                       std::to_string(eligible[size_t(m)].size()) + " examples, points have " +
                       std::to_string(X.rows()));
    std::vector<int> pred = predict_labels(zoo.members[size_t(m)], X);
    for (long e = 0; e < X.rows(); ++e) {
      bool ok = pred[size_t(e)] == labels[size_t(e)];
      correct_pairs += ok;
      if (eligible[size_t(m)][size_t(e)]) {
        ++r.eligible;
        r.flipped += !ok;
      }
    }
  }
  r.asr = r.eligible ? double(r.flipped) / double(r.eligible) : 0.0;
  r.accuracy = X.rows() && zoo.size() ? double(correct_pairs) / double(X.rows() * zoo.size()) : 0.0;
  return r;
}

RMat points_at_step(const std::vector<AttackTrace>& traces, int step) {
  if (traces.empty()) throw ConfigError("points_at_step: no traces");
  long d = traces[0].clean.size();
  RMat out(long(traces.size()), d);
  for (size_t i = 0; i < traces.size(); ++i) {
    size_t s = std::min(size_t(step), traces[i].steps.size() - 1);
    out.row(long(i)) = traces[i].steps[s].x.matrix().transpose();
  }
  return out;
}

std::vector<int> trace_labels(const std::vector<AttackTrace>& traces) {
  std::vector<int> out(traces.size());
  for (size_t i = 0; i < traces.size(); ++i) out[i] = traces[i].label;
  return out;
}

TeHat te_hat(const Zoo& target, const AttackConfig& cfg, const Array& clean, int label,
             const Array& transferred) {
  std::vector<const ModelRecord*> members = member_ptrs(target);
  AttackTrace white = mifgsm_attack(members, clean, label, cfg);
  EnsembleGraph g = build_ensemble_graph(members, label, cfg);
  auto fused_at = [&](const Array& x) {
    g.x.set_values(x);
    evaluate(g.probe);
    return g.objective.item();
  };
  TeHat r;
  r.loss_transfer = fused_at(transferred);
  r.loss_whitebox = fused_at(white.final_x());
  r.te = r.loss_whitebox - r.loss_transfer;
  return r;
}

void write_decomposition_csv(const std::vector<DecompositionRow>& rows, const std::string& path) {
  CsvWriter csv(path, {"example_id", "total", "vulnerability", "diversity", "residual", "kind"});
  for (const DecompositionRow& r : rows)
    csv.row() << r.example_id << r.total << r.vulnerability << r.diversity << r.residual
              << r.kind;
}

}  // namespace tlab
