#include "doctest.h"
#include "fixtures.hpp"
#include "tlab/attack.hpp"

#include <fstream>
#include <sstream>

using namespace tlab;
using tlab::testfix::small_lab;

using tlab::testfix::toy_linear;

namespace {

AttackConfig cfg_of(BallNorm n, double eps, double alpha, int steps, Fusion f, CraftLoss c,
                    double mu = 1.0) {
  AttackConfig cfg;
  cfg.norm = n;
  cfg.epsilon = eps;
  cfg.alpha = alpha;
  cfg.steps = steps;
  cfg.momentum = mu;
  cfg.fusion = f;
  cfg.craft = c;
  return cfg;
}

}  // namespace

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.step_size() == doctest::Approx(cfg.epsilon / cfg.steps));

  AttackConfig big_alpha = cfg;
  big_alpha.alpha = cfg.epsilon * 2;
  CHECK_THROWS_AS(big_alpha.validate(), ConfigError);

  // A zero budget puts no ceiling on alpha (the ball projection pins x anyway).
  AttackConfig zero_eps = cfg;
  zero_eps.epsilon = 0.0;
  zero_eps.alpha = 1.0;
  CHECK_NOTHROW(zero_eps.validate());

  AttackConfig bad_fusion = cfg;
  bad_fusion.fusion = Fusion::prob_avg;
  bad_fusion.craft = CraftLoss::mse;
  CHECK_THROWS_AS(bad_fusion.validate(), ConfigError);

  AttackConfig neg = cfg;
  neg.epsilon = -0.1;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
  neg = cfg;
  neg.steps = -1;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
  neg = cfg;
  neg.momentum = -0.5;
  CHECK_THROWS_AS(neg.validate(), ConfigError);

  CHECK(parse_ball_norm("linf") == BallNorm::linf);
  CHECK(parse_ball_norm("l2") == BallNorm::l2);
  CHECK(parse_fusion("logit_avg") == Fusion::logit_avg);
  CHECK(parse_craft_loss("ce") == CraftLoss::cross_entropy);
  CHECK(parse_craft_loss("mse") == CraftLoss::mse);
  CHECK(std::string(to_string(Fusion::prob_avg)) == "prob_avg");
  CHECK_THROWS_AS(parse_ball_norm("l1"), ConfigError);
  CHECK_THROWS_AS(parse_fusion("max"), ConfigError);
  CHECK_THROWS_AS(parse_craft_loss("hinge"), ConfigError);
}

TEST_CASE("project_ball: hand cases") {
  Array anchor(3), x(3);
  anchor << 0.5, 0.5, 0.5;

  // linf: per-coordinate clip to [anchor-eps, anchor+eps].
  x << 0.9, 0.45, 0.1;
  Array p = project_ball(x, anchor, BallNorm::linf, 0.2);
  CHECK(p[0] == doctest::Approx(0.7));
  CHECK(p[1] == doctest::Approx(0.45));
  CHECK(p[2] == doctest::Approx(0.3));

  // l2: radial shrink onto the sphere.
  x << 0.5 + 0.3, 0.5 - 0.4, 0.5;  // offset (0.3,-0.4,0), norm 0.5
  p = project_ball(x, anchor, BallNorm::l2, 0.25);
  CHECK(p[0] == doctest::Approx(0.5 + 0.15));
  CHECK(p[1] == doctest::Approx(0.5 - 0.20));
  CHECK(p[2] == doctest::Approx(0.5));

  // Box clamp applies after the ball.
  Array edge_anchor(2), far(2);
  edge_anchor << 0.0, 1.0;
  far << -5.0, 9.0;
  p = project_ball(far, edge_anchor, BallNorm::linf, 0.3);
  CHECK(p[0] == doctest::Approx(0.0));
  CHECK(p[1] == doctest::Approx(1.0));

  CHECK_THROWS_AS(project_ball(Array::Zero(2), Array::Zero(3), BallNorm::l2, 0.1), ShapeError);
}

TEST_CASE("project_ball: random points land inside ball and box") {
  Prng g(5, "proj");
  for (int trial = 0; trial < 200; ++trial) {
    int d = 1 + int(g.next_below(8));
    Array anchor(d), x(d);
    for (int i = 0; i < d; ++i) anchor[i] = g.uniform(0.0, 1.0);
    for (int i = 0; i < d; ++i) x[i] = g.uniform(-1.0, 2.0);
    double eps = g.uniform(0.0, 0.5);
    BallNorm n = (trial % 2) ? BallNorm::linf : BallNorm::l2;
    Array p = project_ball(x, anchor, n, eps);
    CHECK((p >= 0.0).all());
    CHECK((p <= 1.0).all());
    Array dlt = p - anchor;
    if (n == BallNorm::linf) CHECK(dlt.abs().maxCoeff() <= eps + 1e-12);
    else CHECK(std::sqrt(dlt.square().sum()) <= eps + 1e-9);
    // Idempotence: projecting a feasible point is the identity.
    Array p2 = project_ball(p, anchor, n, eps);
    CHECK((p - p2).abs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("mifgsm: closed-form 1-pixel trajectory with momentum and projection") {
  ModelRecord m = toy_linear(-2.0, 0.5);
  std::vector<const ModelRecord*> members{&m};
  // Objective (z0-1)^2 with z0=-2x: ascending means pushing x upward
  // (d/dx = 2(z0-1)(-2) = 8 at x=0.5), alpha .1 per step, ball radius .2.
  AttackConfig cfg = cfg_of(BallNorm::linf, 0.2, 0.1, 3, Fusion::loss_avg, CraftLoss::mse);
  Array x0(1);
  x0 << 0.5;
  AttackTrace t = mifgsm_attack(members, x0, 0, cfg, 7);

  REQUIRE(t.steps.size() == 4);
  CHECK(t.example_id == 7);
  CHECK(t.label == 0);
  const double expect_x[] = {0.5, 0.6, 0.7, 0.7};  // last step projected back
  for (int s = 0; s < 4; ++s) {
    CHECK(t.steps[size_t(s)].x[0] == doctest::Approx(expect_x[s]).epsilon(1e-12));
    double z0 = -2.0 * expect_x[s];
    CHECK(t.steps[size_t(s)].fused_loss == doctest::Approx((z0 - 1) * (z0 - 1)).epsilon(1e-12));
    CHECK(t.steps[size_t(s)].member_loss[0] == doctest::Approx(t.steps[size_t(s)].fused_loss));
    CHECK(t.steps[size_t(s)].correct_logit[0] == doctest::Approx(z0).epsilon(1e-12));
    CHECK(t.steps[size_t(s)].logits(0, 1) == doctest::Approx(0.5 * expect_x[s]).epsilon(1e-12));
    CHECK(t.steps[size_t(s)].linf_dist ==
          doctest::Approx(std::abs(expect_x[s] - 0.5)).epsilon(1e-12));
  }
}

TEST_CASE("mifgsm: single linf step equals sign-of-gradient step") {
  const auto& lab = small_lab();
  std::vector<const ModelRecord*> members = member_ptrs(lab.surrogate);
  Array clean = lab.pool.images.row(3).transpose().array();
  int label = lab.pool.labels[3];

  AttackConfig cfg = cfg_of(BallNorm::linf, 0.06, 0.06, 1, Fusion::loss_avg,
                            CraftLoss::cross_entropy, 0.0);
  EnsembleGraph g = build_ensemble_graph(members, label, cfg);
  g.x.set_values(clean);
  evaluate(g.objective);
  backward(g.objective);
  Array expect = project_ball(clean + 0.06 * g.x.grad().sign(), clean, BallNorm::linf, 0.06);

  AttackTrace t = mifgsm_attack(members, clean, label, cfg);
  CHECK((t.final_x() - expect).abs().maxCoeff() <= 1e-12);
  CHECK(t.steps[1].fused_loss > t.steps[0].fused_loss);  // FGSM ascends locally
}

TEST_CASE("fusions agree where they must") {
  const auto& lab = small_lab();
  const ModelRecord& m = lab.surrogate.members[1];
  std::vector<const ModelRecord*> solo{&m};
  Array clean = lab.pool.images.row(0).transpose().array();
  int label = lab.pool.labels[0];

  SUBCASE("single member: all fusions give the cross-entropy value") {
    double ref = -1;
    for (Fusion f : {Fusion::loss_avg, Fusion::logit_avg, Fusion::prob_avg}) {
      EnsembleGraph g =
          build_ensemble_graph(solo, label, cfg_of(BallNorm::linf, 0.1, 0.05, 1, f,
                                                   CraftLoss::cross_entropy));
      g.x.set_values(clean);
      evaluate(g.objective);
      if (ref < 0) ref = g.objective.item();
      CHECK(g.objective.item() == doctest::Approx(ref).epsilon(1e-10));
    }
  }

  SUBCASE("duplicated member behaves like the single member") {
    std::vector<const ModelRecord*> dup{&m, &m};
    for (Fusion f : {Fusion::loss_avg, Fusion::logit_avg, Fusion::prob_avg}) {
      AttackConfig cfg = cfg_of(BallNorm::linf, 0.05, 0.025, 4, f, CraftLoss::cross_entropy);
      AttackTrace a = mifgsm_attack(solo, clean, label, cfg);
      AttackTrace b = mifgsm_attack(dup, clean, label, cfg);
      CHECK((a.final_x() - b.final_x()).abs().maxCoeff() <= 1e-9);
      CHECK(a.steps.back().fused_loss == doctest::Approx(b.steps.back().fused_loss));
    }
  }
}

TEST_CASE("degenerate budgets") {
  const auto& lab = small_lab();
  std::vector<const ModelRecord*> members = member_ptrs(lab.surrogate);
  Array clean = lab.pool.images.row(5).transpose().array();
  int label = lab.pool.labels[5];

  SUBCASE("epsilon 0 pins every iterate to the clean point") {
    AttackConfig cfg = cfg_of(BallNorm::linf, 0.0, 0.0, 5, Fusion::loss_avg,
                              CraftLoss::cross_entropy);
    AttackTrace t = mifgsm_attack(members, clean, label, cfg);
    REQUIRE(t.steps.size() == 6);
    for (const AttackStep& s : t.steps) {
      CHECK((s.x - clean).abs().maxCoeff() == 0.0);
      CHECK(s.fused_loss == doctest::Approx(t.steps[0].fused_loss));
      CHECK(s.linf_dist == 0.0);
      CHECK(s.l2_dist == 0.0);
    }
  }

  SUBCASE("steps 0 records only the clean measurement") {
    AttackConfig cfg = cfg_of(BallNorm::linf, 0.1, 0.0, 0, Fusion::loss_avg,
                              CraftLoss::cross_entropy);
    AttackTrace t = mifgsm_attack(members, clean, label, cfg);
    REQUIRE(t.steps.size() == 1);
    CHECK((t.steps[0].x - clean).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("attack stays inside the ball and the box on a trained zoo") {
  const auto& lab = small_lab();
  std::vector<int> idx{0, 1, 2, 3, 4, 5};
  LabeledDataset pool = subset(lab.pool, idx);

  for (BallNorm n : {BallNorm::linf, BallNorm::l2}) {
    double eps = (n == BallNorm::linf) ? 0.05 : 1.0;
    AttackConfig cfg = cfg_of(n, eps, eps / 8, 8, Fusion::loss_avg, CraftLoss::cross_entropy);
    std::vector<AttackTrace> traces = attack_pool(lab.surrogate, pool, cfg, 1);
    REQUIRE(traces.size() == idx.size());
    for (const AttackTrace& t : traces) {
      for (const AttackStep& s : t.steps) {
        CHECK((s.x >= 0.0).all());
        CHECK((s.x <= 1.0).all());
        if (n == BallNorm::linf) CHECK(s.linf_dist <= eps + 1e-12);
        else CHECK(s.l2_dist <= eps + 1e-9);
      }
      // The final step should actually have moved somewhere.
      CHECK(t.steps.back().l2_dist > 0.0);
    }
  }
}

TEST_CASE("attack ascends the fused objective on most pool examples") {
  const auto& lab = small_lab();
  AttackConfig cfg = cfg_of(BallNorm::linf, 0.1, 0.0125, 8, Fusion::loss_avg,
                            CraftLoss::cross_entropy);
  std::vector<AttackTrace> traces = attack_pool(lab.surrogate, lab.pool, cfg, 1);
  int up = 0;
  for (const AttackTrace& t : traces)
    if (t.steps.back().fused_loss >= t.steps.front().fused_loss) ++up;
  CHECK(up >= int(0.85 * double(traces.size())));
}

TEST_CASE("attack_pool: deterministic and thread-count invariant") {
  const auto& lab = small_lab();
  std::vector<int> idx{0, 1, 2, 3, 4, 5, 6, 7};
  LabeledDataset pool = subset(lab.pool, idx);
  AttackConfig cfg = cfg_of(BallNorm::linf, 0.05, 0.0125, 4, Fusion::logit_avg,
                            CraftLoss::cross_entropy);

  std::vector<AttackTrace> a = attack_pool(lab.surrogate, pool, cfg, 1);
  std::vector<AttackTrace> b = attack_pool(lab.surrogate, pool, cfg, 3);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].example_id == int(i));
    CHECK(b[i].example_id == int(i));
    REQUIRE(a[i].steps.size() == b[i].steps.size());
    for (size_t s = 0; s < a[i].steps.size(); ++s) {
      CHECK((a[i].steps[s].x == b[i].steps[s].x).all());
      CHECK(a[i].steps[s].fused_loss == b[i].steps[s].fused_loss);
    }
  }
}

TEST_CASE("attack_pool: member subsets") {
  const auto& lab = small_lab();
  std::vector<const ModelRecord*> two = member_ptrs(lab.surrogate, 2);
  CHECK(two.size() == 2);
  CHECK(two[0] == &lab.surrogate.members[0]);
  CHECK_THROWS_AS(member_ptrs(lab.surrogate, 99), ConfigError);

  std::vector<int> idx{0, 1};
  LabeledDataset pool = subset(lab.pool, idx);
  AttackConfig cfg = cfg_of(BallNorm::linf, 0.05, 0.025, 2, Fusion::loss_avg,
                            CraftLoss::cross_entropy);
  std::vector<AttackTrace> t2 = attack_pool(lab.surrogate, pool, cfg, 1, 2);
  CHECK(t2[0].steps[0].member_loss.size() == 2);
  CHECK(t2[0].steps[0].logits.rows() == 2);
}

TEST_CASE("trace CSV layout") {
  ModelRecord m = toy_linear(-2.0, 0.5);
  std::vector<const ModelRecord*> members{&m};
  AttackConfig cfg = cfg_of(BallNorm::linf, 0.2, 0.1, 2, Fusion::loss_avg, CraftLoss::mse);
  Array x0(1);
  x0 << 0.5;
  std::vector<AttackTrace> traces;
  traces.push_back(mifgsm_attack(members, x0, 0, cfg, 0));
  traces.push_back(mifgsm_attack(members, x0, 0, cfg, 1));

  std::string path = "trace_test.csv";
  write_trace_csv(traces, cfg, path);
  std::ifstream in(path);
  REQUIRE(bool(in));
  std::string line;
  std::getline(in, line);
  CHECK(line == "example_id,step,fused_loss,mean_member_loss,ball_norm,linf_dist,l2_dist");
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(line);
  REQUIRE(rows.size() == 6);  // 2 examples x (1 clean + 2 steps)
  CHECK(rows[0].substr(0, 6) == "0,0,4,");  // loss (z0-1)^2 = 4 at the clean point
  CHECK(rows[3].substr(0, 4) == "1,0,");
  CHECK(rows[5].find("linf") != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("ensemble graph rejects unfrozen members and shape mismatches") {
  ModelRecord m = toy_linear(-2.0, 0.5);
  set_trainable(m, true);
  std::vector<const ModelRecord*> members{&m};
  AttackConfig cfg;
  CHECK_THROWS_AS(build_ensemble_graph(members, 0, cfg), std::logic_error);
  set_trainable(m, false);

  Array wrong(3);
  wrong << 0.1, 0.2, 0.3;
  CHECK_THROWS_AS(mifgsm_attack(members, wrong, 0, cfg), ShapeError);
  CHECK_THROWS_AS(build_ensemble_graph({}, 0, cfg), ConfigError);
}
