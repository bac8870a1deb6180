#include "tlab/train.hpp"

#include "tlab/parallel.hpp"

#include <cmath>

namespace tlab {

Transform parse_transform(const std::string& id) {
  if (id == "none") return Transform::none;
  if (id == "flip") return Transform::flip;
  if (id == "shift") return Transform::shift;
  throw ConfigError("unknown transform: '" + id + "'");
}

const char* to_string(Transform t) {
  switch (t) {
    case Transform::none: return "none";
    case Transform::flip: return "flip";
    case Transform::shift: return "shift";
  }
  return "?";
}

const char* to_string(ZooRole r) { return r == ZooRole::surrogate ? "surrogate" : "target"; }

Array apply_transform(const Array& flat, const Shape& shape, Transform t, Prng& g) {
  if (t == Transform::none) return flat;
  int C = shape[0], H = shape[1], W = shape[2];
  long plane = long(H) * W;
  Array out(flat.size());
  if (t == Transform::flip) {
    if (g.next_double() < 0.5) return flat;
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          out[c * plane + y * W + x] = flat[c * plane + y * W + (W - 1 - x)];
    return out;
  }
  // shift: uniform integer offset in [-2, 2]^2, zero fill
  int dx = int(g.next_below(5)) - 2;
  int dy = int(g.next_below(5)) - 2;
  out.setZero();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < H; ++y) {
      int sy = y - dy;
      if (sy < 0 || sy >= H) continue;
      for (int x = 0; x < W; ++x) {
        int sx = x - dx;
        if (sx < 0 || sx >= W) continue;
        out[c * plane + y * W + x] = flat[c * plane + sy * W + sx];
      }
    }
  return out;
}

void project_max_norm(ModelRecord& model, double cap) {
  if (!(cap > 0)) throw ConfigError("max_norm cap must be positive");
  for (Param& p : model.params) {
    if (p.role != ParamRole::weight) continue;
    Array& v = p.tensor.values();
    const Shape& s = p.tensor.shape();
    if (s.size() == 2) {
      MapRMat W(v.data(), s[0], s[1]);
      for (long j = 0; j < W.cols(); ++j) {
        double n = W.col(j).norm();
        if (n > cap) W.col(j) *= cap / n;
      }
    } else {
      long co = s[0], rest = numel(s) / s[0];
      MapRMat W(v.data(), co, rest);
      for (long i = 0; i < co; ++i) {
        double n = W.row(i).norm();
        if (n > cap) W.row(i) *= cap / n;
      }
    }
  }
}

namespace {

struct AdamState {
  Array m, v;
};

void adam_step(Array& theta, const Array& grad, AdamState& st, long t, double lr,
               double weight_decay) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Array g = grad;
  if (weight_decay != 0.0) g += weight_decay * theta;
  st.m = b1 * st.m + (1.0 - b1) * g;
  st.v = b2 * st.v + (1.0 - b2) * g.square();
  double c1 = 1.0 - std::pow(b1, double(t));
  double c2 = 1.0 - std::pow(b2, double(t));
  theta -= lr * (st.m / c1) / ((st.v / c2).sqrt() + eps);
}

std::vector<double> hinge_targets(const std::vector<int>& labels) {
  std::vector<double> y(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1)
      throw ConfigError("hinge training expects binary {0,1} labels, got " +
                        std::to_string(labels[i]));
    y[i] = labels[i] == 1 ? 1.0 : -1.0;
  }
  return y;
}

}  // namespace

void train_model(ModelRecord& model, const LabeledDataset& train, const TrainConfig& cfg) {
  if (train.size() == 0) throw ConfigError("train_model: empty training set");
  if (cfg.loss == LossKind::hinge && model.arch.num_classes != 1)
    throw ConfigError("hinge training needs a single-score head, arch has " +
                      std::to_string(model.arch.num_classes) + " outputs");
  set_trainable(model, true);
  std::vector<AdamState> states(model.params.size());
  for (size_t i = 0; i < model.params.size(); ++i) {
    states[i].m = Array::Zero(model.params[i].tensor.size());
    states[i].v = Array::Zero(model.params[i].tensor.size());
  }
  Prng shuffle_root(cfg.seed, "epoch-shuffle");
  Prng augment_root(cfg.seed, "augment");
  long n = train.size(), d = train.dim();
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    auto perm = shuffle_root.fork("epoch", uint64_t(epoch)).permutation(n);
    double epoch_loss = 0;
    long batches = 0;
    for (long start = 0; start < n; start += cfg.batch) {
      long bs = std::min<long>(cfg.batch, n - start);
      Array xb(bs * d);
      std::vector<int> yb(static_cast<size_t>(bs));
      for (long i = 0; i < bs; ++i) {
        int src = perm[size_t(start + i)];
        if (cfg.transform == Transform::none) {
          Eigen::Map<Array>(xb.data() + i * d, d) = train.images.row(src).array();
        } else {
          Prng g = augment_root.fork("e", uint64_t(epoch)).fork("i", uint64_t(src));
          Array flat = train.images.row(src).array();
          Eigen::Map<Array>(xb.data() + i * d, d) =
              apply_transform(flat, train.image_shape, cfg.transform, g);
        }
        yb[size_t(i)] = train.labels[size_t(src)];
      }
      Tensor x = Tensor::from(xb, {int(bs), int(d)}, false, "x");
      Tensor logits = build_logits(model, x);
      Tensor loss = cfg.loss == LossKind::cross_entropy
                        ? cross_entropy_loss(logits, yb)
                        : hinge_loss(logits, hinge_targets(yb));
      ++step;
      double lv = loss.item();
      if (!std::isfinite(lv)) throw TrainError(step, "non-finite training loss");
      backward(loss);
      for (size_t i = 0; i < model.params.size(); ++i)
        adam_step(model.params[i].tensor.values(), model.params[i].tensor.grad(), states[i], step,
                  cfg.lr, cfg.weight_decay);
      if (cfg.max_norm) project_max_norm(model, *cfg.max_norm);
      epoch_loss += lv;
      ++batches;
    }
    model.epoch_loss.push_back(epoch_loss / double(batches));
  }
  set_trainable(model, false);
}

double evaluate_accuracy(const ModelRecord& model, const LabeledDataset& data, LossKind loss,
                         int batch) {
  long n = data.size(), d = data.dim();
  if (n == 0) return 0.0;
  long correct = 0;
  for (long start = 0; start < n; start += batch) {
    long bs = std::min<long>(batch, n - start);
    Array xb(bs * d);
    for (long i = 0; i < bs; ++i)
      Eigen::Map<Array>(xb.data() + i * d, d) = data.images.row(start + i).array();
    Tensor x = Tensor::from(xb, {int(bs), int(d)});
    Tensor logits = build_logits(model, x);
    long k = logits.shape()[1];
    for (long i = 0; i < bs; ++i) {
      int y = data.labels[size_t(start + i)];
      if (loss == LossKind::hinge) {
        double score = logits.values()[i * k];
        if ((score >= 0 ? 1 : 0) == y) ++correct;
      } else {
        long best = 0;
        for (long j = 1; j < k; ++j)
          if (logits.values()[i * k + j] > logits.values()[i * k + best]) best = j;
        if (best == y) ++correct;
      }
    }
  }
  return double(correct) / double(n);
}

uint64_t member_seed(uint64_t seed, ZooRole role, int index) {
  return Prng(seed, "zoo").fork(to_string(role)).fork("member", uint64_t(index)).key();
}

Zoo build_zoo(ZooRole role, const std::vector<ZooMemberSpec>& specs, const LabeledDataset& train,
              const LabeledDataset& test, const TrainConfig& base, uint64_t seed, int jobs) {
  if (specs.empty()) throw ConfigError("build_zoo: no member specs");
  Zoo zoo;
  zoo.role = role;
  zoo.members.resize(specs.size());
  parallel_for(long(specs.size()), jobs, [&](long i) {
    const ZooMemberSpec& spec = specs[size_t(i)];
    int classes = base.loss == LossKind::hinge ? 1 : train.num_classes;
    ArchSpec arch = parse_arch(spec.arch, train.image_shape, classes,
                               /*bias=*/base.loss != LossKind::hinge);
    TrainConfig cfg = base;
    cfg.weight_decay = spec.weight_decay;
    cfg.transform = spec.transform;
    cfg.max_norm = spec.max_norm;
    cfg.seed = member_seed(seed, role, int(i));
    ModelRecord m = init_model(arch, cfg.seed);
    m.meta.weight_decay = cfg.weight_decay;
    m.meta.transform = to_string(cfg.transform);
    m.meta.max_norm = cfg.max_norm;
    m.provenance = provenance_hash(m.arch, m.meta);
    train_model(m, train, cfg);
    m.clean_accuracy = evaluate_accuracy(m, test, base.loss);
    zoo.members[size_t(i)] = std::move(m);
  });
  return zoo;
}

}  // namespace tlab
