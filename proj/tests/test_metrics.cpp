#include "doctest.h"
#include "fixtures.hpp"
#include "tlab/metrics.hpp"
#include "tlab/rng.hpp"

#include <cmath>
#include <fstream>

using namespace tlab;
using tlab::testfix::small_lab;
using tlab::testfix::toy_linear;

TEST_CASE("mse_decompose: hand oracle") {
  Vec preds(3);
  preds << 1, 2, 4;  // fbar = 7/3
  MseDecomposition d = mse_decompose(preds, 3.0);
  CHECK(d.total == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(d.vulnerability == doctest::Approx(4.0 / 9.0).epsilon(1e-12));
  CHECK(d.diversity == doctest::Approx(14.0 / 9.0).epsilon(1e-12));
  CHECK(std::abs(d.residual) < 1e-12);
  CHECK_THROWS_AS(mse_decompose(Vec(), 0.0), ConfigError);
}

TEST_CASE("mse_decompose: identity holds for random ensembles") {
  Prng g(11, "mse-id");
  for (int trial = 0; trial < 1000; ++trial) {
    int n = 1 + int(g.next_below(12));
    Vec preds(n);
    for (int i = 0; i < n; ++i) preds[i] = 3.0 * g.normal();
    double y = 3.0 * g.normal();
    MseDecomposition d = mse_decompose(preds, y);
    CHECK(std::abs(d.residual) <= 1e-12 * std::max(1.0, d.total));
    CHECK(d.diversity >= 0.0);
    CHECK(d.vulnerability >= 0.0);
  }
}

TEST_CASE("noise_decompose: matches a Monte-Carlo risk estimate") {
  Vec preds(5);
  preds << 0.2, -0.4, 1.3, 0.9, 0.1;
  double bayes = 0.5, eta2 = 0.1;
  NoiseDecomposition d = noise_decompose(preds, bayes, eta2);
  CHECK(d.risk == doctest::Approx(d.vulnerability + d.diversity + d.noise));

  Prng g(29, "noise-mc");
  double eta = std::sqrt(eta2), acc = 0;
  const int draws = 100000;
  for (int t = 0; t < draws; ++t) {
    double y = bayes + eta * g.normal();
    acc += (preds.array() - y).square().mean();
  }
  double mc = acc / draws;
  CHECK(std::abs(mc - d.risk) <= 0.02 * d.risk);

  // eta2 = 0 reduces to the exact MSE split against the Bayes value.
  NoiseDecomposition d0 = noise_decompose(preds, bayes, 0.0);
  MseDecomposition m = mse_decompose(preds, bayes);
  CHECK(d0.risk == doctest::Approx(m.total).epsilon(1e-12));
  CHECK_THROWS_AS(noise_decompose(preds, 0.0, -1.0), ConfigError);
}

TEST_CASE("geometric_centroid: basic behavior") {
  RMat probs(3, 4);
  Vec p(4);
  p << 0.1, 0.2, 0.3, 0.4;
  for (int i = 0; i < 3; ++i) probs.row(i) = p.transpose();
  Vec c = geometric_centroid(probs);
  CHECK((c - p).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(c.sum() == doctest::Approx(1.0).epsilon(1e-12));

  // An exact zero in one member only floors that entry, everything stays finite.
  probs.row(1) << 0.0, 0.3, 0.3, 0.4;
  Vec cz = geometric_centroid(probs);
  CHECK(cz.allFinite());
  CHECK(cz.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cz[0] < c[0]);
  CHECK_THROWS_AS(geometric_centroid(RMat()), ConfigError);
}

TEST_CASE("kl_decompose: two-member hand oracle") {
  RMat probs(2, 2);
  probs << 0.8, 0.2, 0.2, 0.8;
  Vec y(2);
  y << 1.0, 0.0;
  KlDecomposition d = kl_decompose(y, probs);
  CHECK(d.diversity == doctest::Approx(-std::log(0.8)).epsilon(1e-12));
  CHECK(d.vulnerability == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(d.total == doctest::Approx(0.5 * (std::log(1.0 / 0.8) + std::log(1.0 / 0.2)))
                       .epsilon(1e-12));
  CHECK(std::abs(d.residual) < 1e-12);
}

TEST_CASE("kl_decompose: identity and sign over random distributions") {
  Prng g(13, "kl-id");
  for (int trial = 0; trial < 200; ++trial) {
    int n = 2 + int(g.next_below(6)), k = 2 + int(g.next_below(9));
    RMat probs(n, k);
    for (int i = 0; i < n; ++i) {
      double z = 0;
      for (int j = 0; j < k; ++j) {
        probs(i, j) = std::exp(g.normal());
        z += probs(i, j);
      }
      probs.row(i) /= z;
    }
    Vec y = smooth_onehot(k, int(g.next_below(uint64_t(k))));
    KlDecomposition d = kl_decompose(y, probs);
    CHECK(std::abs(d.residual) <= 1e-9 * std::max(1.0, std::abs(d.total)));
    CHECK(d.diversity >= -1e-12);

    // Identical members carry zero diversity.
    RMat same(n, k);
    for (int i = 0; i < n; ++i) same.row(i) = probs.row(0);
    KlDecomposition ds = kl_decompose(y, same);
    CHECK(std::abs(ds.diversity) <= 1e-12);
    CHECK(ds.total == doctest::Approx(ds.vulnerability).epsilon(1e-9));
  }
}

TEST_CASE("smooth_onehot") {
  Vec y = smooth_onehot(10, 3, 1e-3);
  CHECK(y.sum() == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(y[3] == doctest::Approx(1.0 - 1e-3 + 1e-4).epsilon(1e-15));
  CHECK(y[0] == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK_THROWS_AS(smooth_onehot(10, 10), ConfigError);
  CHECK_THROWS_AS(smooth_onehot(10, -1), ConfigError);
}

TEST_CASE("prediction_variance and mse_margin_loss: hand oracles") {
  RMat t(2, 2);
  t << 1, 2, 3, 2;
  CHECK(prediction_variance(t) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(mse_margin_loss(t, 1.0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK_THROWS_AS(prediction_variance(RMat()), ConfigError);
}

TEST_CASE("model_logits: batch-size invariant and consistent with the graph") {
  const auto& lab = small_lab();
  const ModelRecord& m = lab.surrogate.members[1];
  RMat a = model_logits(m, lab.pool.images, 512);
  RMat b = model_logits(m, lab.pool.images, 3);
  CHECK((a - b).cwiseAbs().maxCoeff() == 0.0);

  Eigen::Map<const Array> flat(lab.pool.images.data(), lab.pool.images.size());
  Tensor in = Tensor::from(flat, {int(lab.pool.size()), int(lab.pool.dim())});
  Tensor z = build_logits(m, in);
  CHECK((a - MapCRMat(z.values().data(), a.rows(), a.cols())).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("predict_labels agrees with evaluate_accuracy") {
  const auto& lab = small_lab();
  for (const ModelRecord& m : lab.surrogate.members) {
    std::vector<int> pred = predict_labels(m, lab.test.images);
    long hits = 0;
    for (long i = 0; i < lab.test.size(); ++i) hits += pred[size_t(i)] == lab.test.labels[size_t(i)];
    double acc = double(hits) / double(lab.test.size());
    CHECK(acc == doctest::Approx(evaluate_accuracy(m, lab.test)).epsilon(1e-12));
    CHECK(acc == doctest::Approx(m.clean_accuracy).epsilon(1e-12));
  }
}

TEST_CASE("clean_correct_mask and attack_success: hand-built zoo") {
  Zoo zoo;
  zoo.role = ZooRole::target;
  zoo.members.push_back(toy_linear(1.0, -1.0));   // class0 iff x >= 0
  zoo.members.push_back(toy_linear(-1.0, 1.0));   // class1 iff x > 0

  LabeledDataset clean;
  clean.name = "toy";
  clean.image_shape = {1, 1, 1};
  clean.images = RMat(3, 1);
  clean.images << 0.5, 0.5, 0.5;
  clean.labels = {0, 1, 0};
  clean.num_classes = 2;

  auto mask = clean_correct_mask(zoo, clean);
  REQUIRE(mask.size() == 2);
  CHECK(mask[0] == std::vector<char>{1, 0, 1});
  CHECK(mask[1] == std::vector<char>{0, 1, 0});

  RMat adv(3, 1);
  adv << -0.2, -0.4, 0.6;
  AsrResult r = attack_success(zoo, adv, clean.labels, mask);
  CHECK(r.eligible == 3);
  CHECK(r.flipped == 2);
  CHECK(r.asr == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(r.accuracy == doctest::Approx(0.5).epsilon(1e-12));

  AsrResult clean_r = attack_success(zoo, clean.images, clean.labels, mask);
  CHECK(clean_r.flipped == 0);
  CHECK(clean_r.asr == 0.0);

  std::vector<std::vector<char>> bad_mask(1);
  CHECK_THROWS_AS(attack_success(zoo, adv, clean.labels, bad_mask), ShapeError);
}

TEST_CASE("trace utilities agree with batched evaluation") {
  const auto& lab = small_lab();
  std::vector<int> idx{0, 1, 2, 3, 4, 5, 6, 7};
  LabeledDataset pool = subset(lab.pool, idx);
  AttackConfig cfg;
  cfg.epsilon = 0.08;
  cfg.steps = 4;
  std::vector<AttackTrace> traces = attack_pool(lab.surrogate, pool, cfg, 1);

  CHECK(trace_labels(traces) == pool.labels);
  for (int step : {0, 2, 4, 99}) {
    RMat pts = points_at_step(traces, step);
    REQUIRE(pts.rows() == long(traces.size()));
    int s = std::min(step, cfg.steps);
    // Batched re-evaluation of the surrogate zoo must reproduce the logits the
    // attack recorded step by step (different execution path, same numbers).
    RMat logit = correct_logit_matrix(lab.surrogate, pts, pool.labels);
    for (size_t e = 0; e < traces.size(); ++e)
      for (int m = 0; m < lab.surrogate.size(); ++m)
        CHECK(logit(m, long(e)) ==
              doctest::Approx(traces[e].steps[size_t(s)].correct_logit[m]).epsilon(1e-12));
  }
}

TEST_CASE("te_hat: zero on the crafting zoo, finite across zoos") {
  const auto& lab = small_lab();
  AttackConfig cfg;
  cfg.epsilon = 0.06;
  cfg.steps = 5;
  Array clean = lab.pool.images.row(2).transpose().array();
  int label = lab.pool.labels[2];

  std::vector<const ModelRecord*> targets = member_ptrs(lab.target);
  AttackTrace own = mifgsm_attack(targets, clean, label, cfg);
  TeHat same = te_hat(lab.target, cfg, clean, label, own.final_x());
  CHECK(same.te == 0.0);
  CHECK(same.loss_whitebox == doctest::Approx(own.steps.back().fused_loss).epsilon(1e-12));

  AttackTrace sur = mifgsm_attack(member_ptrs(lab.surrogate), clean, label, cfg);
  TeHat cross = te_hat(lab.target, cfg, clean, label, sur.final_x());
  CHECK(std::isfinite(cross.te));
  CHECK(cross.loss_whitebox == doctest::Approx(same.loss_whitebox).epsilon(1e-12));
  CHECK(cross.te == doctest::Approx(cross.loss_whitebox - cross.loss_transfer).epsilon(1e-12));
}

TEST_CASE("decomposition CSV layout") {
  std::vector<DecompositionRow> rows;
  rows.push_back({0, "mse", 2.0, 4.0 / 9, 14.0 / 9, 0.0});
  rows.push_back({1, "kl", 0.5, 0.25, 0.25, 0.0});
  std::string path = "decomp_test.csv";
  write_decomposition_csv(rows, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "example_id,total,vulnerability,diversity,residual,kind");
  std::getline(in, line);
  CHECK(line == "0,2,0.4444444444,1.555555556,0,mse");
  std::getline(in, line);
  CHECK(line.substr(line.size() - 2) == "kl");
  std::remove(path.c_str());
}
