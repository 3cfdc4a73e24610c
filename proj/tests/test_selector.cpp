#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <nlohmann/json.hpp>

#include "oracle_helpers.hpp"
#include "protogate/errors.hpp"
#include "protogate/rng.hpp"
#include "protogate/selector.hpp"

using namespace protogate;

namespace {

Mat random_mat(int r, int c, Rng& rng, double sd = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = sd * rng.next_gaussian();
  return m;
}

double q_tail(double x) { return 0.5 * std::erfc(x * M_SQRT1_2); }

}  // namespace

TEST_CASE("init: zero biases, gaussian weights with the stated moments") {
  const GatingParams p = init_gating(1000, 500, 7);
  CHECK(p.b1.cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.b2.cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.b3.cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.w1.rows() == 500);
  CHECK(p.w1.cols() == 1000);
  CHECK(p.w3.rows() == 1000);
  // 500k + 250k + 500k draws; mean within 4 sigma/sqrt(n), std near 0.1
  const double n = static_cast<double>(p.w1.size()) + p.w2.size() + p.w3.size();
  const double mean = (p.w1.sum() + p.w2.sum() + p.w3.sum()) / n;
  CHECK(std::abs(mean) < 4.0 * 0.1 / std::sqrt(n));
  const double ms =
      (p.w1.array().square().sum() + p.w2.array().square().sum() +
       p.w3.array().square().sum()) /
      n;
  CHECK(std::sqrt(ms) == doctest::Approx(0.1).epsilon(0.01));
}

TEST_CASE("init is deterministic per seed") {
  const GatingParams a = init_gating(40, 30, 123);
  const GatingParams b = init_gating(40, 30, 123);
  const GatingParams c = init_gating(40, 30, 124);
  CHECK(std::memcmp(a.w1.data(), b.w1.data(),
                    sizeof(double) * static_cast<size_t>(a.w1.size())) == 0);
  CHECK(a.w2(3, 4) != c.w2(3, 4));
}

TEST_CASE("global mask zeroes exactly the all-tiny columns") {
  GatingParams p = init_gating(6, 4, 1);
  p.w1.col(2).setZero();
  p.w1.col(4).setConstant(1e-13);  // below default eps_zero
  const Vec s = global_mask(p);
  CHECK(s(2) == 0.0);
  CHECK(s(4) == 0.0);
  CHECK(s(0) == 1.0);
  CHECK(s.sum() == 4.0);
}

TEST_CASE("forward_mu matches an independent per-sample evaluation") {
  Rng rng(5);
  const GatingParams p = init_gating(8, 5, 99);
  const Vec s = Vec::Ones(8);
  const Mat x = random_mat(10, 8, rng);
  const Mat mu = forward_mu_batch(p, x, s);
  for (int i = 0; i < x.rows(); ++i) {
    // hand-rolled loops, no shared code with the implementation
    Vec z1(5), z2(5), m(8);
    for (int h = 0; h < 5; ++h) {
      double acc = p.b1(h);
      for (int d = 0; d < 8; ++d) acc += p.w1(h, d) * x(i, d);
      z1(h) = std::tanh(acc);
    }
    for (int h = 0; h < 5; ++h) {
      double acc = p.b2(h);
      for (int g = 0; g < 5; ++g) acc += p.w2(h, g) * z1(g);
      z2(h) = std::tanh(acc);
    }
    for (int d = 0; d < 8; ++d) {
      double acc = p.b3(d);
      for (int h = 0; h < 5; ++h) acc += p.w3(d, h) * z2(h);
      m(d) = acc;
    }
    CHECK((mu.row(i).transpose() - m).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("zero global mask column makes mu invariant to that feature") {
  Rng rng(17);
  GatingParams p = init_gating(7, 4, 3);
  p.w1.col(3).setZero();
  const Vec s = global_mask(p);
  REQUIRE(s(3) == 0.0);
  Vec x = random_mat(7, 1, rng).col(0);
  const Vec mu_a = forward_mu(p, x, s);
  x(3) += 123.456;
  const Vec mu_b = forward_mu(p, x, s);
  CHECK((mu_a - mu_b).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training mask clamps to [0,1] and matches the sign rule") {
  Vec mu(4), eps(4);
  mu << 0.2, -0.3, 0.9, -2.0;
  eps << 0.5, 0.1, 0.4, 0.0;
  const Vec s = local_mask_train(mu, eps);
  CHECK(s(0) == doctest::Approx(0.7));
  CHECK(s(1) == 0.0);
  CHECK(s(2) == 1.0);
  CHECK(s(3) == 0.0);
  CHECK(local_mask_infer(mu)(0) == doctest::Approx(0.2));
  CHECK(local_mask_infer(mu)(3) == 0.0);
}

TEST_CASE("gate-open probability matches the gaussian tail (monte carlo)") {
  const double sigma = 0.5;
  Rng rng(2024);
  Vec mu(3);
  mu << 0.0, 0.25, -0.4;
  const int n = 100000;
  Vec open = Vec::Zero(3);
  for (int t = 0; t < n; ++t) {
    for (int d = 0; d < 3; ++d) {
      const double s = mu(d) + sigma * rng.next_gaussian();
      if (std::min(1.0, std::max(0.0, s)) > 0.0) open(d) += 1.0;
    }
  }
  open /= n;
  for (int d = 0; d < 3; ++d)
    CHECK(open(d) == doctest::Approx(q_tail(-mu(d) / sigma)).epsilon(0.02));
}

TEST_CASE("regulariser local term: zero mu gives D/2 per unit lambda") {
  GatingParams p = init_gating(10, 4, 8);
  const Mat mu = Mat::Zero(1, 10);
  const RegulariserValue r = sparsity_regulariser(p, mu, 0.0, 1.0, 0.5);
  CHECK(r.local_term == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(r.l1_term == 0.0);
}

TEST_CASE("regulariser l1 term is lambda * ||W1||_1 and batch-averaged Q") {
  GatingParams p = init_gating(3, 2, 11);
  p.w1 << 1.0, -2.0, 0.5, 0.25, 0.0, -0.25;
  Mat mu(2, 3);
  mu << 0.1, -0.2, 0.0, 0.3, 0.0, -0.1;
  const double lg = 0.01, ll = 0.002, sigma = 0.5;
  const RegulariserValue r = sparsity_regulariser(p, mu, lg, ll, sigma);
  CHECK(r.l1_term == doctest::Approx(lg * 4.0).epsilon(1e-12));
  double expect = 0.0;
  for (int i = 0; i < 2; ++i)
    for (int d = 0; d < 3; ++d) expect += q_tail(-mu(i, d) / sigma);
  expect *= ll / 2.0;
  CHECK(r.local_term == doctest::Approx(expect).epsilon(1e-12));
  CHECK(r.total() == doctest::Approx(r.l1_term + r.local_term));
}

TEST_CASE("expected open-gate count matches the Q sum within 1 percent") {
  Rng rng(31337);
  const int d = 20, draws = 100000;
  const double sigma = 0.5;
  Vec mu(d);
  for (int i = 0; i < d; ++i) mu(i) = 0.6 * rng.next_gaussian();
  double q_sum = 0.0;
  for (int i = 0; i < d; ++i) q_sum += q_tail(-mu(i) / sigma);
  double mc = 0.0;
  for (int t = 0; t < draws; ++t) {
    int open = 0;
    for (int i = 0; i < d; ++i)
      if (mu(i) + sigma * rng.next_gaussian() > 0.0) ++open;
    mc += open;
  }
  mc /= draws;
  CHECK(std::abs(mc - q_sum) / q_sum < 0.01);
}

TEST_CASE("proximal step soft-thresholds the first layer only") {
  GatingParams p = init_gating(3, 2, 21);
  p.w1 << 0.5, -0.5, 0.1, -0.15, 0.2, 0.0;
  p.w2.setConstant(0.05);
  p.b1.setConstant(0.05);
  prox_l1(p, 2.0, 0.1);  // threshold 0.2
  CHECK(p.w1(0, 0) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(p.w1(0, 1) == doctest::Approx(-0.3).epsilon(1e-15));
  CHECK(p.w1(0, 2) == 0.0);
  CHECK(p.w1(1, 0) == 0.0);
  CHECK(p.w1(1, 1) == 0.0);
  CHECK(p.w1(1, 2) == 0.0);
  CHECK(p.w2(0, 0) == 0.05);  // untouched
  CHECK(p.b1(0) == 0.05);     // untouched without penalize_bias
  prox_l1(p, 2.0, 0.1, /*penalize_bias=*/true);
  CHECK(p.b1(0) == 0.0);
}

TEST_CASE("proximal zeros flow into the global mask") {
  GatingParams p = init_gating(5, 3, 4);
  p.w1.col(1).setConstant(0.01);
  prox_l1(p, 1.0, 0.05);  // threshold 0.05 kills column 1 (|w|<=0.05)
  const Vec s = global_mask(p);
  CHECK(s(1) == 0.0);
}

TEST_CASE("checkpoint round-trips exactly and validates its magic") {
  const GatingParams p = init_gating(9, 6, 777);
  nlohmann::json extra;
  extra["note"] = "cfg";
  const std::string path = "ckpt_test.json";
  save_checkpoint(path, p, extra);
  nlohmann::json extra2;
  const GatingParams q = load_checkpoint(path, &extra2);
  CHECK(std::memcmp(p.w1.data(), q.w1.data(),
                    sizeof(double) * static_cast<size_t>(p.w1.size())) == 0);
  CHECK(std::memcmp(p.w3.data(), q.w3.data(),
                    sizeof(double) * static_cast<size_t>(p.w3.size())) == 0);
  CHECK(p.b3 == q.b3);
  CHECK(extra2.at("note") == "cfg");

  nlohmann::json bad = checkpoint_json(p, {});
  bad["magic"] = "SOMETHING-ELSE";
  CHECK_THROWS_AS(checkpoint_params(bad), DataError);
  std::remove(path.c_str());
}

TEST_CASE("feature fate classification covers the four cases") {
  CHECK(classify_feature(true, true) == FeatureFate::kBothSelected);
  CHECK(classify_feature(true, false) == FeatureFate::kLocallyDropped);
  CHECK(classify_feature(false, true) == FeatureFate::kLocallyRecovered);
  CHECK(classify_feature(false, false) == FeatureFate::kBothDropped);
  CHECK(std::string(feature_fate_name(FeatureFate::kLocallyRecovered)) ==
        "locally_recovered");
}

TEST_CASE("selector tape graph reproduces the plain forward pass") {
  Rng rng(55);
  const int batch = 6, dim = 7, hidden = 4;
  const GatingParams p = init_gating(dim, hidden, 66);
  const Mat x = random_mat(batch, dim, rng);
  const Vec s = Vec::Ones(dim);

  Tape tape;
  const SelectorNodes nodes = build_selector_graph(tape, batch, dim, hidden);
  set_selector_inputs(tape, nodes, p, x);
  tape.set_root(tape.sum(nodes.mu));
  tape.forward();
  const Mat mu_plain = forward_mu_batch(p, x, s);
  CHECK((tape.value(nodes.mu) - mu_plain).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("selector tape gradients pass finite-difference checking") {
  Rng rng(56);
  const int batch = 4, dim = 5, hidden = 3;
  const GatingParams p = init_gating(dim, hidden, 67);
  const Mat x = random_mat(batch, dim, rng);

  Tape tape;
  const SelectorNodes nodes = build_selector_graph(tape, batch, dim, hidden);
  set_selector_inputs(tape, nodes, p, x);
  // scalarize through a smooth head so every parameter matters
  tape.set_root(tape.sum(tape.square(tape.tanh(nodes.mu))));
  const GradCheckReport rep = grad_check(
      tape, {nodes.w1, nodes.b1, nodes.w2, nodes.b2, nodes.w3, nodes.b3});
  CHECK(rep.n_skipped == 0);
  CHECK(rep.max_rel_err < 1e-4);
}
