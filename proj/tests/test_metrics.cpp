#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "protogate/errors.hpp"
#include "protogate/metrics.hpp"
#include "protogate/rng.hpp"

using namespace protogate;

namespace {

IVec iv(std::initializer_list<int> xs) {
  IVec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (int x : xs) v(i++) = x;
  return v;
}

// Second implementation of macro recall, structured around per-class
// filtering instead of counting arrays.
double macro_recall_oracle(const IVec& yt, const IVec& yp, int classes) {
  std::vector<double> recalls;
  for (int c = 0; c < classes; ++c) {
    int n = 0, hit = 0;
    for (Eigen::Index i = 0; i < yt.size(); ++i)
      if (yt(i) == c) {
        ++n;
        if (yp(i) == c) ++hit;
      }
    if (n > 0) recalls.push_back(static_cast<double>(hit) / n);
  }
  return std::accumulate(recalls.begin(), recalls.end(), 0.0) /
         static_cast<double>(recalls.size());
}

// Precision/recall form of F1 as an independent oracle.
double f1_oracle(const std::set<int>& sel, const std::set<int>& want) {
  if (sel.empty()) return want.empty() ? 1.0 : 0.0;
  int tp = 0;
  for (int d : sel) tp += want.count(d) ? 1 : 0;
  if (tp == 0) return 0.0;
  const double p = static_cast<double>(tp) / static_cast<double>(sel.size());
  const double r = static_cast<double>(tp) / static_cast<double>(want.size());
  return 2.0 * p * r / (p + r);
}

}  // namespace

TEST_CASE("balanced accuracy matches hand cases") {
  CHECK(balanced_accuracy(iv({0, 1, 0, 1}), iv({0, 1, 0, 1}), 2) == 1.0);
  // class 0 recall 1.0 (2/2), class 1 recall 0.5 (1/2)
  CHECK(balanced_accuracy(iv({0, 0, 1, 1}), iv({0, 0, 1, 0}), 2) ==
        doctest::Approx(0.75));
  // constant predictor on 3 balanced classes
  CHECK(balanced_accuracy(iv({0, 1, 2, 0, 1, 2}), iv({0, 0, 0, 0, 0, 0}), 3) ==
        doctest::Approx(1.0 / 3.0));
  // absent class 2 excluded from the mean
  CHECK(balanced_accuracy(iv({0, 1}), iv({0, 1}), 3) == 1.0);
}

TEST_CASE("balanced accuracy agrees with an independent oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 5 + static_cast<int>(rng.next_index(40));
    IVec yt(n), yp(n);
    for (int i = 0; i < n; ++i) {
      yt(i) = static_cast<int>(rng.next_index(4));
      yp(i) = static_cast<int>(rng.next_index(4));
    }
    CHECK(balanced_accuracy(yt, yp, 4) ==
          doctest::Approx(macro_recall_oracle(yt, yp, 4)).epsilon(1e-12));
  }
}

TEST_CASE("balanced accuracy is invariant under class relabeling") {
  Rng rng(13);
  IVec yt(40), yp(40);
  for (int i = 0; i < 40; ++i) {
    yt(i) = static_cast<int>(rng.next_index(3));
    yp(i) = static_cast<int>(rng.next_index(3));
  }
  const double base = balanced_accuracy(yt, yp, 3);
  const int perm[3] = {2, 0, 1};
  IVec yt2(40), yp2(40);
  for (int i = 0; i < 40; ++i) {
    yt2(i) = perm[yt(i)];
    yp2(i) = perm[yp(i)];
  }
  CHECK(balanced_accuracy(yt2, yp2, 3) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("balanced accuracy rejects bad input") {
  CHECK_THROWS_AS(balanced_accuracy(IVec(), IVec(), 2), UsageError);
  CHECK_THROWS_AS(balanced_accuracy(iv({0, 1}), iv({0}), 2), UsageError);
  CHECK_THROWS_AS(balanced_accuracy(iv({0, 5}), iv({0, 1}), 2), UsageError);
}

TEST_CASE("f1_select hand values") {
  Mat m = Mat::Zero(1, 100);
  std::vector<std::vector<int>> truth{{0, 1, 2, 3}};
  m.row(0).setConstant(1.0);  // select everything
  CHECK(f1_select(m, truth) == doctest::Approx(2.0 * 4.0 / 104.0));
  m.setZero();
  for (int d : truth[0]) m(0, d) = 0.7;  // exact match
  CHECK(f1_select(m, truth) == 1.0);
  m.setZero();  // empty selection
  CHECK(f1_select(m, truth) == 0.0);
}

TEST_CASE("f1_select averages per-sample oracle values") {
  Rng rng(17);
  const int n = 25, d = 30;
  Mat m = Mat::Zero(n, d);
  std::vector<std::vector<int>> truth(n);
  double want = 0.0;
  for (int i = 0; i < n; ++i) {
    std::set<int> sel, tr;
    for (int j = 0; j < d; ++j) {
      if (rng.next_uniform() < 0.3) {
        m(i, j) = rng.next_uniform() + 0.01;
        sel.insert(j);
      }
      if (rng.next_uniform() < 0.2) tr.insert(j);
    }
    if (tr.empty()) tr.insert(static_cast<int>(rng.next_index(d)));
    truth[static_cast<size_t>(i)].assign(tr.begin(), tr.end());
    want += f1_oracle(sel, tr);
  }
  CHECK(f1_select(m, truth) == doctest::Approx(want / n).epsilon(1e-12));
}

TEST_CASE("f1_select is invariant under a consistent feature permutation") {
  Rng rng(19);
  const int n = 10, d = 12;
  Mat m(n, d);
  std::vector<std::vector<int>> truth(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j)
      m(i, j) = rng.next_uniform() < 0.4 ? rng.next_uniform() : 0.0;
    truth[static_cast<size_t>(i)] = {static_cast<int>(rng.next_index(d)),
                                     static_cast<int>(rng.next_index(d))};
  }
  std::vector<int> perm(d);
  std::iota(perm.begin(), perm.end(), 0);
  rng.shuffle(perm);
  Mat m2(n, d);
  std::vector<std::vector<int>> truth2(n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) m2(i, perm[static_cast<size_t>(j)]) = m(i, j);
    for (int t : truth[static_cast<size_t>(i)])
      truth2[static_cast<size_t>(i)].push_back(perm[static_cast<size_t>(t)]);
  }
  CHECK(f1_select(m2, truth2) ==
        doctest::Approx(f1_select(m, truth)).epsilon(1e-15));
}

TEST_CASE("competition ranks average over ties") {
  const auto r = competition_ranks({10.0, 20.0, 20.0, 30.0}, true);
  CHECK(r == std::vector<double>{4.0, 2.5, 2.5, 1.0});
  const auto r2 = competition_ranks({10.0, 20.0, 20.0, 30.0}, false);
  CHECK(r2 == std::vector<double>{1.0, 2.5, 2.5, 4.0});
}

TEST_CASE("rank difference matches the published example shape") {
  // identical rankings
  CHECK(rank_difference({1, 2, 3}, {1, 2, 3}) ==
        std::vector<double>{0, 0, 0});
  // best accuracy but sixth on selection fidelity -> +5
  const auto d = rank_difference({6, 1, 2, 3, 4, 5}, {1, 2, 3, 4, 5, 6});
  CHECK(d[0] == 5.0);
  // a swap is antisymmetric
  const auto s = rank_difference({2, 1}, {1, 2});
  CHECK(s == std::vector<double>{1.0, -1.0});
  CHECK_THROWS_AS(rank_difference({1, 2}, {1, 2, 3}), UsageError);
}

TEST_CASE("rank differences over tie-free scores sum to zero") {
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    const int m = 3 + static_cast<int>(rng.next_index(6));
    std::vector<double> f1(m), acc(m);
    for (int i = 0; i < m; ++i) {
      f1[static_cast<size_t>(i)] = rng.next_uniform();
      acc[static_cast<size_t>(i)] = rng.next_uniform();
    }
    const auto d = rank_difference_from_scores(f1, acc);
    CHECK(std::abs(std::accumulate(d.begin(), d.end(), 0.0)) < 1e-12);
  }
}

TEST_CASE("degree of local sparsity hand cases") {
  Mat same(3, 5);
  same.setZero();
  same.col(1).setConstant(1.0);
  same.col(3).setConstant(0.5);
  CHECK(degree_of_local_sparsity(same) == 0.0);

  Mat two = Mat::Zero(2, 4);
  two(0, 0) = 1.0;  // sample 1 selects {0}
  two(1, 1) = 1.0;  // sample 2 selects {1}
  CHECK(degree_of_local_sparsity(two) == doctest::Approx(0.25));

  // disjoint singleton selections: Q = (N-1)/D
  for (int n : {2, 5, 8}) {
    const int d = 10;
    Mat m = Mat::Zero(n, d);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    CHECK(degree_of_local_sparsity(m) ==
          doctest::Approx(static_cast<double>(n - 1) / d));
  }
}

TEST_CASE("Q is invariant under sample reorder and feature permutation") {
  Rng rng(29);
  const int n = 12, d = 9;
  Mat m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      m(i, j) = rng.next_uniform() < 0.35 ? 1.0 : 0.0;
  const double base = degree_of_local_sparsity(m);
  std::vector<int> rows(n), cols(d);
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);
  rng.shuffle(rows);
  rng.shuffle(cols);
  Mat p(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j)
      p(i, j) = m(rows[static_cast<size_t>(i)], cols[static_cast<size_t>(j)]);
  CHECK(degree_of_local_sparsity(p) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("composition taxonomy over hand-built masks") {
  Vec g(4);
  g << 1, 1, 0, 0;
  Mat l(2, 4);
  l << 1, 0, 1, 0,   // both, dropped, recovered, both_dropped
       1, 1, 0, 0;   // both, both, both_dropped, both_dropped
  const CompositionStats c = composition(g, l);
  CHECK(c.both_selected_frac == doctest::Approx(3.0 / 4.0));
  CHECK(c.locally_recovered_frac == doctest::Approx(1.0 / 4.0));
  CHECK(c.locally_dropped == 1);
  CHECK(c.both_dropped == 3);
  CHECK(c.both_selected_frac + c.locally_recovered_frac ==
        doctest::Approx(1.0));

  const CompositionStats all_on = composition(Vec::Ones(4), l);
  CHECK(all_on.both_selected_frac == 1.0);
  CHECK(all_on.locally_recovered_frac == 0.0);
  const CompositionStats all_off = composition(Vec::Zero(4), l);
  CHECK(all_off.both_selected_frac == 0.0);
  CHECK(all_off.locally_recovered_frac == 1.0);
}

TEST_CASE("adtm normalizes best to 1 and worst to 0") {
  const auto a = adtm_aggregate({{50.0, 75.0, 100.0}}, true);
  CHECK(a == std::vector<double>{0.0, 0.5, 1.0});
  const auto lower = adtm_aggregate({{50.0, 75.0, 100.0}}, false);
  CHECK(lower == std::vector<double>{1.0, 0.5, 0.0});
  // best everywhere -> 1.0 after averaging
  const auto multi = adtm_aggregate({{1.0, 3.0}, {10.0, 30.0}}, true);
  CHECK(multi[1] == 1.0);
  CHECK(multi[0] == 0.0);
  // all-equal dataset contributes 1.0 to every method
  const auto degen = adtm_aggregate({{5.0, 5.0}, {0.0, 1.0}}, true);
  CHECK(degen == std::vector<double>{0.5, 1.0});
  CHECK_THROWS_AS(adtm_aggregate({}, true), UsageError);
}

TEST_CASE("adtm is invariant under per-dataset affine rescaling") {
  Rng rng(31);
  std::vector<std::vector<double>> raw(3, std::vector<double>(4));
  for (auto& ds : raw)
    for (double& v : ds) v = rng.next_uniform();
  const auto base = adtm_aggregate(raw, true);
  auto scaled = raw;
  const double mul[3] = {3.0, 0.25, 10.0};
  const double add[3] = {-1.0, 5.0, 0.125};
  for (size_t i = 0; i < scaled.size(); ++i)
    for (double& v : scaled[i]) v = v * mul[i] + add[i];
  const auto after = adtm_aggregate(scaled, true);
  for (size_t m = 0; m < base.size(); ++m)
    CHECK(after[m] == doctest::Approx(base[m]).epsilon(1e-12));
}

TEST_CASE("mean_std uses the population convention") {
  const MeanStd r = mean_std({1.0, 2.0, 3.0});
  CHECK(r.mean == doctest::Approx(2.0));
  CHECK(r.std == doctest::Approx(std::sqrt(2.0 / 3.0)));
  CHECK_THROWS_AS(mean_std({}), UsageError);
}

TEST_CASE("compute_run_metrics fills every field consistently") {
  const IVec yt = iv({0, 1, 0, 1});
  const IVec yp = iv({0, 1, 1, 1});
  Vec g(4);
  g << 1, 0, 1, 0;
  Mat l(4, 4);
  l << 1, 0, 0, 0,
       1, 1, 0, 0,
       0, 0, 1, 0,
       1, 0, 1, 0;
  std::vector<std::vector<int>> truth{{0}, {0, 1}, {2}, {0, 2}};
  const RunMetrics m = compute_run_metrics(yt, yp, 2, g, l, &truth);
  CHECK(m.balanced_accuracy == doctest::Approx(0.75));
  CHECK(m.mean_selected == doctest::Approx((1 + 2 + 1 + 2) / 4.0));
  CHECK(m.prop_selected == doctest::Approx(1.5 / 4.0));
  CHECK(m.has_f1_select);
  CHECK(m.f1_select == 1.0);  // every sample matches its truth exactly
  CHECK(m.composition.both_selected_frac + m.composition.locally_recovered_frac ==
        doctest::Approx(1.0));
  CHECK(m.q_local_sparsity > 0.0);
  const RunMetrics no_truth = compute_run_metrics(yt, yp, 2, g, l, nullptr);
  CHECK(!no_truth.has_f1_select);
  const nlohmann::json j = run_metrics_json(no_truth);
  CHECK(j.at("f1_select").is_null());
  CHECK(run_metrics_json(m).at("f1_select") == 1.0);
}

TEST_CASE("aggregate csv has the fixed header and row order") {
  const std::string path = "agg_test.csv";
  write_aggregate_csv(path, {{"syn1", "protogate", "balanced_accuracy", 0.5, 0.125},
                             {"syn1", "knn", "f1_select", 1.0, 0.0}});
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "dataset,method,metric,mean,std");
  std::getline(in, line);
  CHECK(line == "syn1,protogate,balanced_accuracy,0.5,0.125");
  std::getline(in, line);
  CHECK(line == "syn1,knn,f1_select,1,0");
  std::remove(path.c_str());
}
