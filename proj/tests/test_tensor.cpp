#include "tlab/tensor.hpp"

#include "tlab/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace tlab;

namespace {

Array arr(std::initializer_list<double> v) {
  Array a(long(v.size()));
  long i = 0;
  for (double x : v) a[i++] = x;
  return a;
}

Array random_array(Prng& g, long n, double lo, double hi) {
  Array a(n);
  for (long i = 0; i < n; ++i) a[i] = g.uniform(lo, hi);
  return a;
}

}  // namespace

TEST_CASE("matmul: hand-computed product") {
  Tensor a = Tensor::from(arr({1, 2, 3, 4, 5, 6}), {2, 3});
  Tensor b = Tensor::from(arr({7, 8, 9, 10, 11, 12}), {3, 2});
  Tensor c = matmul(a, b);
  CHECK(c.values()[0] == doctest::Approx(58));
  CHECK(c.values()[1] == doctest::Approx(64));
  CHECK(c.values()[2] == doctest::Approx(139));
  CHECK(c.values()[3] == doctest::Approx(154));
}

TEST_CASE("matmul: shape errors name the op and shapes") {
  Tensor a = Tensor::leaf({2, 3});
  Tensor b = Tensor::leaf({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeError);
  try {
    matmul(a, b);
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("conv2d: identity-corner kernel on a 3x3 image") {
  Tensor x = Tensor::from(arr({1, 2, 3, 4, 5, 6, 7, 8, 9}), {1, 1, 3, 3});
  Tensor k = Tensor::from(arr({1, 0, 0, 1}), {1, 1, 2, 2});
  Tensor y = conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.values()[0] == doctest::Approx(6));
  CHECK(y.values()[1] == doctest::Approx(8));
  CHECK(y.values()[2] == doctest::Approx(12));
  CHECK(y.values()[3] == doctest::Approx(14));
}

TEST_CASE("conv2d: stride and zero padding") {
  // 4x4 ones, 3x3 ones kernel, stride 2, pad 1.  Output 2x2; each output
  // counts the in-bounds taps: corners of the padded image see 4 ones... by
  // hand: out(0,0) covers rows/cols {-1,0,1} -> 2x2 in-bounds = 4;
  // out(0,1) covers cols {1,2,3} -> 2x3 = 6; out(1,0) = 6; out(1,1) = 9.
  Tensor x = Tensor::from(Array::Ones(16), {1, 1, 4, 4});
  Tensor k = Tensor::from(Array::Ones(9), {1, 1, 3, 3});
  Tensor y = conv2d(x, k, 2, 1);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.values()[0] == doctest::Approx(4));
  CHECK(y.values()[1] == doctest::Approx(6));
  CHECK(y.values()[2] == doctest::Approx(6));
  CHECK(y.values()[3] == doctest::Approx(9));
}

TEST_CASE("conv2d: multi-channel accumulation") {
  // Two input channels, kernel picks channel sums: out = sum_ci sum_taps.
  Tensor x = Tensor::from(arr({1, 2, 3, 4, 10, 20, 30, 40}), {1, 2, 2, 2});
  Tensor k = Tensor::from(Array::Ones(8), {1, 2, 2, 2});
  Tensor y = conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.values()[0] == doctest::Approx(1 + 2 + 3 + 4 + 10 + 20 + 30 + 40));
}

TEST_CASE("add: bias broadcast over rows and channels") {
  Tensor a = Tensor::from(arr({1, 2, 3, 4}), {2, 2});
  Tensor b = Tensor::from(arr({10, 20}), {2});
  Tensor c = add(a, b);
  CHECK(c.values()[0] == doctest::Approx(11));
  CHECK(c.values()[1] == doctest::Approx(22));
  CHECK(c.values()[2] == doctest::Approx(13));
  CHECK(c.values()[3] == doctest::Approx(24));

  Tensor x = Tensor::from(Array::Zero(8), {1, 2, 2, 2});
  Tensor cb = Tensor::from(arr({5, -3}), {2});
  Tensor o = add(x, cb);
  CHECK(o.values()[0] == doctest::Approx(5));
  CHECK(o.values()[3] == doctest::Approx(5));
  CHECK(o.values()[4] == doctest::Approx(-3));
  CHECK(o.values()[7] == doctest::Approx(-3));

  Tensor bad = Tensor::from(arr({1, 2, 3}), {3});
  CHECK_THROWS_AS(add(a, bad), ShapeError);
}

TEST_CASE("softmax: rows are distributions; frozen two-class value") {
  Prng g(11, "softmax");
  Tensor z = Tensor::from(random_array(g, 12, -5, 5), {3, 4});
  Tensor s = softmax(z);
  for (int r = 0; r < 3; ++r) {
    double rowsum = 0;
    for (int k = 0; k < 4; ++k) {
      double v = s.values()[r * 4 + k];
      CHECK(v > 0);
      rowsum += v;
    }
    CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
  }
  // softmax([0, ln 3]) = [1/4, 3/4]
  Tensor two = Tensor::from(arr({0, std::log(3.0)}), {1, 2});
  Tensor st = softmax(two);
  CHECK(st.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(st.values()[1] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK_THROWS_AS(softmax(z, 0), std::invalid_argument);
}

TEST_CASE("cross_entropy_loss: matches the naive log-sum-exp formula") {
  Tensor z = Tensor::from(arr({1, 2, 3, -1, 0, 1}), {2, 3});
  std::vector<int> y{2, 0};
  Tensor l = cross_entropy_loss(z, y);
  auto naive = [](double a, double b, double c, double zy) {
    return std::log(std::exp(a) + std::exp(b) + std::exp(c)) - zy;
  };
  double expect = 0.5 * (naive(1, 2, 3, 3) + naive(-1, 0, 1, -1));
  CHECK(l.item() == doctest::Approx(expect).epsilon(1e-12));
  // Uniform logits: loss = log K exactly (up to rounding).
  Tensor u = Tensor::from(Array::Zero(8), {2, 4});
  CHECK(cross_entropy_loss(u, {0, 3}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK_THROWS_AS(cross_entropy_loss(z, {2}), ShapeError);
  CHECK_THROWS_AS(cross_entropy_loss(z, {2, 7}), std::invalid_argument);
}

TEST_CASE("cross_entropy_loss: gradient equals softmax minus one-hot") {
  Tensor z = Tensor::from(arr({0.5, -1.0, 2.0}), {1, 3}, true, "z");
  Tensor l = cross_entropy_loss(z, {1});
  backward(l);
  Tensor s = softmax(Tensor::from(z.values(), {1, 3}));
  CHECK(z.grad()[0] == doctest::Approx(s.values()[0]).epsilon(1e-12));
  CHECK(z.grad()[1] == doctest::Approx(s.values()[1] - 1.0).epsilon(1e-12));
  CHECK(z.grad()[2] == doctest::Approx(s.values()[2]).epsilon(1e-12));
}

TEST_CASE("kl_loss: frozen value, exact zero on identical inputs") {
  Tensor p = Tensor::from(arr({0.5, 0.5}), {2});
  Tensor q = Tensor::from(arr({0.25, 0.75}), {2});
  double expect = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(kl_loss(p, q).item() == doctest::Approx(expect).epsilon(1e-14));
  // Identical distributions: exactly zero, not merely small.
  Prng g(3, "klzero");
  Array v = random_array(g, 10, 0.01, 1.0);
  v /= v.sum();
  Tensor a = Tensor::from(v, {10});
  Tensor b = Tensor::from(v, {10});
  CHECK(kl_loss(a, b).item() == 0.0);
  // Zero mass in p contributes zero (0 log 0 := 0).
  Tensor p0 = Tensor::from(arr({0.0, 1.0}), {2});
  Tensor q0 = Tensor::from(arr({0.5, 0.5}), {2});
  CHECK(kl_loss(p0, q0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("kl_loss: batched rows average") {
  Tensor p = Tensor::from(arr({0.5, 0.5, 1.0, 0.0}), {2, 2});
  Tensor q = Tensor::from(arr({0.5, 0.5, 0.5, 0.5}), {2, 2});
  CHECK(kl_loss(p, q).item() == doctest::Approx(0.5 * std::log(2.0)).epsilon(1e-14));
}

TEST_CASE("hinge_loss: frozen value and label validation") {
  Tensor f = Tensor::from(arr({0.5, -2.0}), {2});
  CHECK(hinge_loss(f, {1, -1}).item() == doctest::Approx(0.25).epsilon(1e-14));
  CHECK_THROWS_AS(hinge_loss(f, {1, 0.5}), std::invalid_argument);
  CHECK_THROWS_AS(hinge_loss(f, {1}), ShapeError);
}

TEST_CASE("elementwise and reduction ops: frozen values") {
  Tensor a = Tensor::from(arr({-1, 0, 2, -3}), {4});
  CHECK(relu(a).values()[0] == 0);
  CHECK(relu(a).values()[2] == 2);
  CHECK(mean(a).item() == doctest::Approx(-0.5));
  CHECK(sum(a).item() == doctest::Approx(-2.0));
  CHECK(scale(a, -2).values()[3] == doctest::Approx(6));
  Tensor c = clamp(a, -1.5, 1.0);
  CHECK(c.values()[0] == doctest::Approx(-1));
  CHECK(c.values()[2] == doctest::Approx(1.0));
  CHECK(c.values()[3] == doctest::Approx(-1.5));
  CHECK_THROWS_AS(clamp(a, 2.0, 1.0), std::invalid_argument);
  Tensor p = Tensor::from(arr({1, 2, 3, 4}), {2, 2});
  Tensor picked = pick(p, {1, 0});
  CHECK(picked.values()[0] == doctest::Approx(2));
  CHECK(picked.values()[1] == doctest::Approx(3));
  Tensor m = mul(a, a);
  CHECK(m.values()[3] == doctest::Approx(9));
  Tensor r = reshape(p, {4});
  CHECK(r.values()[2] == doctest::Approx(3));
  CHECK_THROWS_AS(reshape(p, {3}), ShapeError);
  Tensor lg = log(Tensor::from(arr({1.0, std::exp(1.0)}), {2}));
  CHECK(lg.values()[0] == doctest::Approx(0.0));
  CHECK(lg.values()[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mse_loss: frozen value") {
  Tensor a = Tensor::from(arr({1, 2, 3}), {3});
  Tensor b = Tensor::from(arr({2, 2, 1}), {3});
  CHECK(mse_loss(a, b).item() == doctest::Approx((1.0 + 0.0 + 4.0) / 3.0).epsilon(1e-14));
}

TEST_CASE("backward: shared leaf accumulates through both paths") {
  // y = x*x + x  =>  dy/dx = 2x + 1
  Tensor x = Tensor::from(arr({1.5, -0.5}), {2}, true, "x");
  Tensor y = sum(add(mul(x, x), x));
  backward(y);
  CHECK(x.grad()[0] == doctest::Approx(2 * 1.5 + 1).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(2 * -0.5 + 1).epsilon(1e-12));
}

TEST_CASE("backward: repeated calls do not accumulate stale gradients") {
  Tensor x = Tensor::from(arr({2.0}), {1}, true, "x");
  Tensor y = sum(mul(x, x));
  backward(y);
  Array first = x.grad();
  backward(y);
  CHECK(x.grad()[0] == first[0]);
}

TEST_CASE("backward: rejects non-scalar roots and non-finite values") {
  Tensor x = Tensor::from(arr({1, 2}), {2}, true);
  CHECK_THROWS_AS(backward(relu(x)), ShapeError);
  Tensor inf = Tensor::from(arr({1e308}), {1}, true);
  Tensor y = mul(inf, inf);  // overflows to +inf
  CHECK_THROWS_AS(backward(y), NonFiniteError);
}

TEST_CASE("loss ops reject non-finite inputs") {
  Array bad = arr({1.0, std::nan("")});
  Tensor t = Tensor::from(bad, {2});
  Tensor ok = Tensor::from(arr({0.0, 0.0}), {2});
  CHECK_THROWS_AS(mse_loss(t, ok), NonFiniteError);
  CHECK_THROWS_AS(kl_loss(t, ok), NonFiniteError);
  CHECK_THROWS_AS(hinge_loss(t, {1, -1}), NonFiniteError);
  Tensor z = Tensor::from(bad, {1, 2});
  CHECK_THROWS_AS(cross_entropy_loss(z, {0}), NonFiniteError);
}

TEST_CASE("relu and clamp: kink convention gives zero gradient at the boundary") {
  Tensor x = Tensor::from(arr({0.0}), {1}, true, "x");
  backward(sum(relu(x)));
  CHECK(x.grad()[0] == 0.0);
  Tensor y = Tensor::from(arr({1.0}), {1}, true, "y");
  backward(sum(clamp(y, 0.0, 1.0)));  // sitting exactly on the hi bound
  CHECK(y.grad()[0] == 0.0);
}

TEST_CASE("evaluate: leaf mutation propagates through the whole graph") {
  Tensor x = Tensor::from(arr({1, 2, 3, 4}), {2, 2}, true, "x");
  Tensor w = Tensor::from(arr({1, 0, 0, 1}), {2, 2});
  Tensor y = mse_loss(relu(matmul(x, w)), Tensor::from(Array::Zero(4), {2, 2}));
  double before = y.item();
  x.set_values(arr({2, 4, 6, 8}));
  evaluate(y);
  Tensor fresh = mse_loss(relu(matmul(Tensor::from(arr({2, 4, 6, 8}), {2, 2}), w)),
                          Tensor::from(Array::Zero(4), {2, 2}));
  CHECK(y.item() == fresh.item());
  CHECK(y.item() != before);
}

TEST_CASE("finite differences: every op family within 1e-4 relative error") {
  // One graph per op over several seeds; log/kl inputs bounded away from 0.
  int seeds = 10;
  for (int s = 0; s < seeds; ++s) {
    Prng g(100 + s, "fd");
    {
      Tensor a = Tensor::from(random_array(g, 6, -2, 2), {2, 3}, true, "a");
      Tensor b = Tensor::from(random_array(g, 6, -2, 2), {3, 2}, true, "b");
      Tensor t = Tensor::from(random_array(g, 4, -2, 2), {2, 2});
      auto rep = finite_diff_check(mse_loss(matmul(a, b), t), {a, b});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor x = Tensor::from(random_array(g, 2 * 2 * 4 * 4, -1, 1), {2, 2, 4, 4}, true, "x");
      Tensor k = Tensor::from(random_array(g, 3 * 2 * 3 * 3, -1, 1), {3, 2, 3, 3}, true, "k");
      Tensor t = Tensor::from(random_array(g, 2 * 3 * 2 * 2, -1, 1), {2, 3, 2, 2});
      auto rep = finite_diff_check(mse_loss(conv2d(x, k, 2, 1), t), {x, k});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 6, -2, 2), {2, 3}, true, "a");
      Tensor bias = Tensor::from(random_array(g, 3, -1, 1), {3}, true, "bias");
      Tensor t = Tensor::from(random_array(g, 6, -1, 1), {2, 3});
      auto rep = finite_diff_check(mse_loss(add(a, bias), t), {a, bias});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor x = Tensor::from(random_array(g, 16, 0, 1), {1, 1, 4, 4}, true, "x");
      Tensor cb = Tensor::from(random_array(g, 1, -1, 1), {1}, true, "cb");
      Tensor t = Tensor::from(random_array(g, 16, -1, 1), {1, 1, 4, 4});
      auto rep = finite_diff_check(mse_loss(add(x, cb), t), {x, cb});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 8, -2, 2), {8}, true, "a");
      Tensor b = Tensor::from(random_array(g, 8, -2, 2), {8}, true, "b");
      auto rep = finite_diff_check(mean(mul(a, b)), {a, b});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 9, -1, 1), {9}, true, "a");
      Tensor t = Tensor::from(random_array(g, 9, -1, 1), {9});
      auto rep = finite_diff_check(mse_loss(relu(a), t), {a});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor z = Tensor::from(random_array(g, 8, -3, 3), {2, 4}, true, "z");
      Tensor w = Tensor::from(random_array(g, 8, -1, 1), {2, 4});
      auto rep = finite_diff_check(sum(mul(softmax(z), w)), {z});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 6, 0.5, 2.0), {6}, true, "a");
      auto rep = finite_diff_check(sum(log(a)), {a});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor z = Tensor::from(random_array(g, 12, -3, 3), {3, 4}, true, "z");
      auto rep = finite_diff_check(cross_entropy_loss(z, {1, 0, 3}), {z});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Array pv = random_array(g, 5, 0.2, 1.0);
      pv /= pv.sum();
      Array qv = random_array(g, 5, 0.2, 1.0);
      qv /= qv.sum();
      Tensor p = Tensor::from(pv, {5}, true, "p");
      Tensor q = Tensor::from(qv, {5}, true, "q");
      auto rep = finite_diff_check(kl_loss(p, q), {p, q});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor f = Tensor::from(random_array(g, 6, -2, 2), {6}, true, "f");
      auto rep = finite_diff_check(hinge_loss(f, {1, -1, 1, -1, 1, -1}), {f});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 8, -2, 2), {2, 4}, true, "a");
      Tensor t = Tensor::from(random_array(g, 8, -1, 1), {4, 2});
      auto rep = finite_diff_check(mse_loss(reshape(a, {4, 2}), t), {a});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 7, -2, 2), {7}, true, "a");
      auto rep = finite_diff_check(mean(a), {a});
      CHECK(rep.max_rel_err < 1e-4);
      auto rep2 = finite_diff_check(sum(a), {a});
      CHECK(rep2.max_rel_err < 1e-4);
      auto rep3 = finite_diff_check(sum(scale(a, -1.7)), {a});
      CHECK(rep3.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 9, -1, 2), {9}, true, "a");
      Tensor t = Tensor::from(random_array(g, 9, -1, 1), {9});
      auto rep = finite_diff_check(mse_loss(clamp(a, 0.0, 1.0), t), {a});
      CHECK(rep.max_rel_err < 1e-4);
    }
    {
      Tensor a = Tensor::from(random_array(g, 8, -2, 2), {4, 2}, true, "a");
      Tensor t = Tensor::from(random_array(g, 4, -1, 1), {4});
      auto rep = finite_diff_check(mse_loss(pick(a, {0, 1, 1, 0}), t), {a});
      CHECK(rep.max_rel_err < 1e-4);
    }
  }
}

TEST_CASE("finite differences: kink-adjacent coordinates are skipped, not failed") {
  // Values placed within h of a relu kink must be counted as skipped.
  Tensor a = Tensor::from(arr({1e-7, 1.0, -1e-7}), {3}, true, "a");
  Tensor t = Tensor::from(arr({0.5, 0.5, 0.5}), {3});
  auto rep = finite_diff_check(mse_loss(relu(a), t), {a}, 1e-5);
  CHECK(rep.skipped == 2);
  CHECK(rep.checked == 1);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("deep composite graph: finite differences through an MLP-like stack") {
  for (int s = 0; s < 3; ++s) {
    Prng g(500 + s, "deep");
    Tensor x = Tensor::from(random_array(g, 8, -1, 1), {2, 4}, true, "x");
    Tensor w1 = Tensor::from(random_array(g, 20, -0.7, 0.7), {4, 5}, true, "w1");
    Tensor b1 = Tensor::from(random_array(g, 5, -0.2, 0.2), {5}, true, "b1");
    Tensor w2 = Tensor::from(random_array(g, 15, -0.7, 0.7), {5, 3}, true, "w2");
    Tensor z = matmul(relu(add(matmul(x, w1), b1)), w2);
    Tensor loss = cross_entropy_loss(z, {2, 0});
    auto rep = finite_diff_check(loss, {x, w1, b1, w2});
    CHECK(rep.max_rel_err < 1e-4);
    CHECK(rep.checked > 30);
  }
}
