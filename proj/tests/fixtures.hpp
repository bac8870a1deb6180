#pragma once

// Shared fixtures for the heavier test files: a small learnable blob problem
// and a memoized trained zoo so attack/metric tests do not retrain per case.

#include "tlab/attack.hpp"
#include "tlab/train.hpp"

namespace tlab::testfix {

inline LabeledDataset blobs16(long n, uint64_t seed, int classes = 4, uint64_t stream = 0) {
  BlobSpec spec;
  spec.height = spec.width = 16;
  spec.num_classes = classes;
  spec.noise = 0.08;
  spec.sigma_lo = 1.2;
  spec.sigma_hi = 2.2;
  return make_blob_dataset(spec, n, seed, "fixture", stream);
}

/// Hand-built linear model on 1-pixel inputs with logits (a*x, c*x).
inline ModelRecord toy_linear(double a, double c) {
  ModelRecord m = init_model(parse_arch("linear", {1, 1, 1}, 2), 1);
  Array w(2);
  w << a, c;
  for (Param& p : m.params) {
    if (p.name == "head.w") p.tensor.set_values(w);
    if (p.name == "head.b") p.tensor.set_values(Array::Zero(2));
  }
  set_trainable(m, false);
  return m;
}

struct SmallLab {
  LabeledDataset train;
  LabeledDataset test;
  LabeledDataset pool;     ///< attack pool, from the test stream
  Zoo surrogate;           ///< linear + mlp + cnn, trained
  Zoo target;              ///< same specs, disjoint member seeds
};

/// Built once per process; members reach well-above-chance accuracy.
inline const SmallLab& small_lab() {
  static const SmallLab lab = [] {
    SmallLab l;
    l.train = blobs16(400, 77, 4, 0);
    l.test = blobs16(160, 77, 4, 1);
    std::vector<int> pool_idx;
    for (int i = 0; i < 32; ++i) pool_idx.push_back(i);
    l.pool = subset(l.test, pool_idx);

    std::vector<ZooMemberSpec> specs{
        {"linear", 0.0, Transform::none, std::nullopt},
        {"mlp-d1-h32", 0.0, Transform::none, std::nullopt},
        {"cnn-d1-c6", 0.0, Transform::none, std::nullopt},
    };
    TrainConfig base;
    base.epochs = 6;
    base.lr = 5e-3;
    base.batch = 64;
    l.surrogate = build_zoo(ZooRole::surrogate, specs, l.train, l.test, base, 901, 1);
    l.target = build_zoo(ZooRole::target, specs, l.train, l.test, base, 901, 1);
    return l;
  }();
  return lab;
}

struct HingeLab {
  LabeledDataset train;
  LabeledDataset test;
  LabeledDataset pool;
  Zoo linear_zoo;  ///< 4 bias-free single-score linear members, hinge-trained
  Zoo mlp_zoo;     ///< 3 bias-free mlp-d1-h16 members, hinge-trained
};

/// Binary (0-vs-1) problem for margin-loss bound checks.
inline const HingeLab& hinge_lab() {
  static const HingeLab lab = [] {
    HingeLab l;
    l.train = blobs16(400, 55, 2, 0);
    l.test = blobs16(120, 55, 2, 1);
    std::vector<int> pool_idx{0, 1, 2, 3, 4, 5};
    l.pool = subset(l.test, pool_idx);

    TrainConfig base;
    base.epochs = 8;
    base.lr = 5e-3;
    base.batch = 64;
    base.loss = LossKind::hinge;
    std::vector<ZooMemberSpec> lin(4, ZooMemberSpec{"linear", 0.0, Transform::none, std::nullopt});
    l.linear_zoo = build_zoo(ZooRole::surrogate, lin, l.train, l.test, base, 414, 1);
    std::vector<ZooMemberSpec> mlp(3,
                                   ZooMemberSpec{"mlp-d1-h16", 0.0, Transform::none, std::nullopt});
    l.mlp_zoo = build_zoo(ZooRole::target, mlp, l.train, l.test, base, 414, 1);
    return l;
  }();
  return lab;
}

}  // namespace tlab::testfix
