#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <memory>

#include "oracle_helpers.hpp"
#include "protogate/rng.hpp"
#include "protogate/tape.hpp"

using namespace protogate;
using protogate::testing::rel_err;

namespace {

Mat scalar(double v) {
  Mat m(1, 1);
  m(0, 0) = v;
  return m;
}

Mat random_mat(int r, int c, Rng& rng, double sd = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = sd * rng.next_gaussian();
  return m;
}

}  // namespace

TEST_CASE("forward evaluates a small arithmetic graph") {
  Tape t;
  const NodeId x = t.input(1, 1, "x");
  const NodeId one = t.input(1, 1, "one");
  const NodeId y = t.add(t.mul(t.scale(x, 2.0), x), one);  // 2x^2 + 1
  t.set_value(x, scalar(3.0));
  t.set_value(one, scalar(1.0));
  t.set_root(y);
  CHECK(t.forward() == doctest::Approx(19.0).epsilon(1e-15));
}

TEST_CASE("gaussian tail hits known anchors") {
  Tape t;
  const NodeId x = t.input(1, 3, "x");
  const NodeId q = t.gaussian_tail(x);
  Mat v(1, 3);
  v << 0.0, 10.0, -10.0;
  t.set_value(x, v);
  t.forward();
  CHECK(t.value(q)(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(t.value(q)(0, 1) < 1e-20);
  CHECK(t.value(q)(0, 2) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("tanh-of-square gradient matches the closed form") {
  Tape t;
  const NodeId x = t.input(1, 1, "x");
  const NodeId y = t.tanh(t.square(x));
  t.set_value(x, scalar(0.7));
  t.set_root(y);
  t.forward();
  t.backward();
  const double th = std::tanh(0.49);
  const double expected = 2.0 * 0.7 * (1.0 - th * th);
  CHECK(t.grad(x)(0, 0) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("row softmax rows sum to one and stay positive") {
  Rng rng(11);
  Tape t;
  const NodeId x = t.input(6, 9, "x");
  const NodeId s = t.row_softmax(x);
  t.set_value(x, random_mat(6, 9, rng, 5.0));
  t.forward();
  for (int i = 0; i < 6; ++i) {
    CHECK(std::abs(t.value(s).row(i).sum() - 1.0) < 1e-12);
    CHECK(t.value(s).row(i).minCoeff() > 0.0);
  }
}

TEST_CASE("row softmax of a constant row is uniform") {
  Tape t;
  const NodeId x = t.input(1, 3, "x");
  const NodeId s = t.row_softmax(x);
  t.set_value(x, Mat::Zero(1, 3));
  t.forward();
  for (int j = 0; j < 3; ++j)
    CHECK(t.value(s)(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("hard clamp subgradient is 1 inside (0,1) and 0 elsewhere") {
  Tape t;
  const NodeId x = t.input(1, 5, "x");
  const NodeId y = t.sum(t.hard_clamp(x));
  Mat v(1, 5);
  v << 0.5, 0.0, 1.0, -0.2, 1.7;
  t.set_value(x, v);
  t.set_root(y);
  t.forward();
  t.backward();
  CHECK(t.grad(x)(0, 0) == 1.0);
  CHECK(t.grad(x)(0, 1) == 0.0);  // boundary counts as outside
  CHECK(t.grad(x)(0, 2) == 0.0);
  CHECK(t.grad(x)(0, 3) == 0.0);
  CHECK(t.grad(x)(0, 4) == 0.0);
}

TEST_CASE("sqrt-of-square composes to |x| with sign subgradient") {
  Tape t;
  const NodeId x = t.input(1, 3, "x");
  const NodeId y = t.sum(t.sqrt(t.square(x)));
  Mat v(1, 3);
  v << 2.5, -1.25, 0.0;
  t.set_value(x, v);
  t.set_root(y);
  t.forward();
  CHECK(t.value(y)(0, 0) == doctest::Approx(3.75).epsilon(1e-15));
  t.backward();
  CHECK(t.grad(x)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.grad(x)(0, 1) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(t.grad(x)(0, 2) == 0.0);  // sign(0) taken as 0
}

TEST_CASE("gather forward picks flat row-major entries; backward scatters") {
  Tape t;
  const NodeId x = t.input(2, 3, "x");
  // x flat = [a b c; d e f] -> pick [f, a, a, c]
  const NodeId g = t.gather(x, {5, 0, 0, 2}, 2, 2);
  const NodeId w = t.input(2, 2, "w");
  const NodeId y = t.sum(t.mul(g, w));
  Mat v(2, 3);
  v << 1, 2, 3, 4, 5, 6;
  Mat wm(2, 2);
  wm << 10, 100, 1000, 10000;
  t.set_value(x, v);
  t.set_value(w, wm);
  t.set_root(y);
  t.forward();
  CHECK(t.value(g)(0, 0) == 6);
  CHECK(t.value(g)(0, 1) == 1);
  CHECK(t.value(g)(1, 0) == 1);
  CHECK(t.value(g)(1, 1) == 3);
  t.backward();
  CHECK(t.grad(x)(0, 0) == 1100.0);  // two gathers of entry a
  CHECK(t.grad(x)(0, 2) == 10000.0);
  CHECK(t.grad(x)(1, 2) == 10.0);
  CHECK(t.grad(x)(0, 1) == 0.0);
}

TEST_CASE("reshape preserves values and routes gradients") {
  Tape t;
  const NodeId x = t.input(2, 3, "x");
  const NodeId r = t.reshape(x, 3, 2);
  const NodeId y = t.sum(t.square(r));
  Mat v(2, 3);
  v << 1, 2, 3, 4, 5, 6;
  t.set_value(x, v);
  t.set_root(y);
  t.forward();
  CHECK(t.value(r)(2, 1) == 6);
  t.backward();
  CHECK(t.grad(x)(1, 2) == 12.0);
}

TEST_CASE("matmul transpose combinations agree with finite differences") {
  Rng rng(42);
  for (int ta = 0; ta <= 1; ++ta) {
    for (int tb = 0; tb <= 1; ++tb) {
      Tape t;
      const int m = 3, k = 4, p = 2;
      const NodeId a = t.input(ta ? k : m, ta ? m : k, "a");
      const NodeId b = t.input(tb ? p : k, tb ? k : p, "b");
      const NodeId y = t.sum(t.square(t.matmul(a, b, ta, tb)));
      t.set_value(a, random_mat(t.node(a).rows, t.node(a).cols, rng));
      t.set_value(b, random_mat(t.node(b).rows, t.node(b).cols, rng));
      t.set_root(y);
      const GradCheckReport rep = grad_check(t, {a, b});
      CHECK(rep.n_skipped == 0);
      CHECK(rep.max_rel_err < 1e-6);
    }
  }
}

TEST_CASE("sum axes, reciprocal, negate, scale pass gradient checking") {
  Rng rng(7);
  Tape t;
  const NodeId x = t.input(4, 5, "x");
  const NodeId rows = t.sum(x, SumAxis::kRows);            // 4x1
  const NodeId cols = t.sum(t.square(x), SumAxis::kCols);  // 1x5
  const NodeId mixed =
      t.add(t.sum(t.reciprocal(rows)), t.sum(t.negate(t.scale(cols, 0.3))));
  Mat v = random_mat(4, 5, rng);
  v.array() += 6.0;  // keep row sums away from zero for reciprocal
  t.set_value(x, v);
  t.set_root(mixed);
  const GradCheckReport rep = grad_check(t, {x});
  CHECK(rep.n_skipped == 0);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("grad_check matches an independent finite-difference oracle") {
  // Scalar chain y = Q(tanh(w)^2) checked against a hand-rolled central
  // difference, independent of the tape's own grad_check path.
  auto eval = [](double w) {
    const double z = std::tanh(w);
    return 0.5 * std::erfc(z * z * M_SQRT1_2);
  };
  Tape t;
  const NodeId w = t.input(1, 1, "w");
  const NodeId y = t.gaussian_tail(t.square(t.tanh(w)));
  t.set_value(w, scalar(0.37));
  t.set_root(y);
  t.forward();
  t.backward();
  const double fd = protogate::testing::central_diff(eval, 0.37);
  CHECK(rel_err(t.grad(w)(0, 0), fd) < 1e-8);
}

TEST_CASE("gradient checking on a composite batch-like graph") {
  Rng rng(123);
  Tape t;
  const int n = 5, d = 4, h = 3;
  const NodeId x = t.input(n, d, "x");
  const NodeId w1 = t.input(h, d, "w1");
  const NodeId w2 = t.input(1, h, "w2");
  const NodeId z1 = t.tanh(t.matmul(x, w1, false, true));  // n x h
  const NodeId z2 = t.matmul(z1, w2, false, true);         // n x 1
  const NodeId sm = t.row_softmax(t.reshape(z2, 1, n));
  const NodeId y = t.sum(t.mul(sm, t.gaussian_tail(t.reshape(z2, 1, n))));
  t.set_value(x, random_mat(n, d, rng));
  t.set_value(w1, random_mat(h, d, rng, 0.5));
  t.set_value(w2, random_mat(1, h, rng, 0.5));
  t.set_root(y);
  const GradCheckReport rep = grad_check(t, {w1, w2});
  CHECK(rep.n_checked > 0);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("kink-adjacent parameters are skipped, smooth ones are not") {
  Tape t;
  const NodeId x = t.input(1, 2, "x");
  const NodeId y = t.sum(t.hard_clamp(x));
  Mat v(1, 2);
  v << 0.5, 1e-6;  // second entry crosses the clamp kink within +-h
  t.set_value(x, v);
  t.set_root(y);
  const GradCheckReport rep = grad_check(t, {x}, 1e-5);
  REQUIRE(rep.entries.size() == 2);
  CHECK(!rep.entries[0].skipped);
  CHECK(rep.entries[0].rel_err < 1e-10);
  CHECK(rep.entries[1].skipped);
}

TEST_CASE("identical seeds give identical values and gradients") {
  auto build = [](uint64_t seed) {
    Rng rng(seed);
    auto t = std::make_unique<Tape>();
    const NodeId x = t->input(6, 6, "x");
    const NodeId y =
        t->sum(t->square(t->row_softmax(t->matmul(x, x, false, true))));
    t->set_value(x, random_mat(6, 6, rng));
    t->set_root(y);
    t->forward();
    t->backward();
    return std::pair{t->value(y)(0, 0), Mat(t->grad(x))};
  };
  auto [v1, g1] = build(99);
  auto [v2, g2] = build(99);
  CHECK(std::memcmp(&v1, &v2, sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(),
                    sizeof(double) * static_cast<size_t>(g1.size())) == 0);
}

TEST_CASE("shape mismatches raise structured errors naming both nodes") {
  Tape t;
  const NodeId a = t.input(2, 3, "lhs");
  const NodeId b = t.input(2, 3, "rhs");
  bool threw = false;
  try {
    t.matmul(a, b);
  } catch (const TapeError& e) {
    threw = true;
    const std::string msg = e.what();
    CHECK(msg.find("lhs") != std::string::npos);
    CHECK(msg.find("rhs") != std::string::npos);
  }
  CHECK(threw);
  const NodeId c = t.input(3, 3, "third");
  CHECK_THROWS_AS(t.add(a, c), TapeError);
}

TEST_CASE("backward before forward is an error") {
  Tape t;
  const NodeId x = t.input(1, 1, "x");
  const NodeId y = t.square(x);
  t.set_root(y);
  t.set_value(x, scalar(2.0));
  CHECK_THROWS_AS(t.backward(), TapeError);
  t.forward();
  CHECK_NOTHROW(t.backward());
  // mutating an input invalidates the forward state again
  t.set_value(x, scalar(3.0));
  CHECK_THROWS_AS(t.backward(), TapeError);
}

TEST_CASE("sqrt of a negative input is a structured error") {
  Tape t;
  const NodeId x = t.input(1, 1, "x");
  t.sqrt(x);
  t.set_value(x, scalar(-1.0));
  CHECK_THROWS_AS(t.forward(), TapeError);
}
