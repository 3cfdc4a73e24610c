#include "protogate/proto.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "protogate/errors.hpp"

namespace protogate {
namespace {

struct RankedView {
  Mat x;   // rows after exclusion
  IVec y;
  std::vector<int> source;
  Vec dist;
  Vec v;
};

RankedView excluded_view(const Vec& q, const PrototypeBase& base,
                         double delta, int exclude_source) {
  if (base.n() == 0) throw UsageError("prototype base is empty");
  if (q.size() != base.x.cols())
    throw UsageError("query width does not match prototype base");
  std::vector<int> keep;
  keep.reserve(static_cast<size_t>(base.n()));
  for (int i = 0; i < base.n(); ++i)
    if (exclude_source < 0 || base.source[static_cast<size_t>(i)] !=
                                  exclude_source)
      keep.push_back(i);
  if (keep.empty())
    throw UsageError("prototype base is empty after self-exclusion");
  RankedView view;
  view.x.resize(static_cast<int>(keep.size()), base.x.cols());
  view.y.resize(static_cast<int>(keep.size()));
  view.source.reserve(keep.size());
  for (size_t r = 0; r < keep.size(); ++r) {
    view.x.row(static_cast<int>(r)) = base.x.row(keep[r]);
    view.y(static_cast<int>(r)) = base.y(keep[r]);
    view.source.push_back(base.source[static_cast<size_t>(keep[r])]);
  }
  view.dist.resize(view.x.rows());
  for (int i = 0; i < view.x.rows(); ++i)
    view.dist(i) = (view.x.row(i).transpose() - q).norm();
  view.v = (view.dist.array() + delta).inverse();
  return view;
}

// Rank order by descending similarity, ties toward the lower index.
std::vector<int> full_order(const Vec& v) {
  std::vector<int> idx(static_cast<size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return v(a) > v(b);
  });
  return idx;
}

std::vector<int> relaxed_argmax_order(const Vec& v, int k) {
  const int n = static_cast<int>(v.size());
  const Vec a1 = abs_diff_rowsum(v);
  std::vector<int> order;
  order.reserve(static_cast<size_t>(k));
  for (int row = 1; row <= k; ++row) {
    const double coef = static_cast<double>(n + 1 - 2 * row);
    int best = 0;
    double best_score = coef * v(0) - a1(0);
    for (int m = 1; m < n; ++m) {
      const double s = coef * v(m) - a1(m);
      if (s > best_score) {
        best_score = s;
        best = m;
      }
    }
    order.push_back(best);
  }
  return order;
}

int majority_label(const std::vector<NeighborRef>& neighbors,
                   bool* tie_broken) {
  std::map<int, int> counts;
  for (const NeighborRef& nb : neighbors) ++counts[nb.label];
  int best_count = 0;
  for (const auto& [label, count] : counts)
    best_count = std::max(best_count, count);
  std::vector<int> tied;
  for (const auto& [label, count] : counts)
    if (count == best_count) tied.push_back(label);
  if (tied.size() == 1) {
    if (tie_broken) *tie_broken = false;
    return tied.front();
  }
  if (tie_broken) *tie_broken = true;
  for (const NeighborRef& nb : neighbors)  // nearest-first rank order
    if (std::find(tied.begin(), tied.end(), nb.label) != tied.end())
      return nb.label;
  return neighbors.front().label;
}

}  // namespace

PrototypeBase build_base(const Mat& masked_rows, const IVec& labels,
                         const std::vector<int>& source_rows) {
  if (masked_rows.rows() == 0)
    throw UsageError("cannot build an empty prototype base");
  if (labels.size() != masked_rows.rows() ||
      static_cast<long>(source_rows.size()) != masked_rows.rows())
    throw UsageError("prototype base rows, labels, and sources disagree");
  PrototypeBase base;
  base.x = masked_rows;
  base.y = labels;
  base.source = source_rows;
  return base;
}

Vec similarity(const Vec& masked_query, const PrototypeBase& base,
               double delta) {
  if (delta <= 0.0) throw UsageError("similarity: delta must be positive");
  return excluded_view(masked_query, base, delta, -1).v;
}

Vec abs_diff_rowsum(const Vec& v) {
  const int n = static_cast<int>(v.size());
  Vec a1 = Vec::Zero(n);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < n; ++j) acc += std::abs(v(i) - v(j));
    a1(i) = acc;
  }
  return a1;
}

Mat relaxed_sort_topk(const Vec& v, double tau, int k) {
  if (tau <= 0.0) throw UsageError("relaxed_sort: tau must be positive");
  const int n = static_cast<int>(v.size());
  if (n == 0) throw UsageError("relaxed_sort: empty similarity vector");
  if (k < 1 || k > n)
    throw UsageError("relaxed_sort: k out of range 1..N");
  const Vec a1 = abs_diff_rowsum(v);
  Mat p(k, n);
  for (int row = 1; row <= k; ++row) {
    const double coef = static_cast<double>(n + 1 - 2 * row);
    Eigen::RowVectorXd scores =
        ((coef * v - a1).array() / tau).transpose();
    const double m = scores.maxCoeff();
    Eigen::RowVectorXd e = (scores.array() - m).exp();
    p.row(row - 1) = e / e.sum();
  }
  return p;
}

Mat relaxed_sort(const Vec& v, double tau) {
  return relaxed_sort_topk(v, tau, static_cast<int>(v.size()));
}

std::vector<int> hard_topk(const Vec& v, int k) {
  const int n = static_cast<int>(v.size());
  if (k < 1 || k > n) throw UsageError("hard_topk: k out of range 1..N");
  std::vector<int> idx = full_order(v);
  idx.resize(static_cast<size_t>(k));
  return idx;
}

Prediction predict(const Vec& masked_query, const PrototypeBase& base, int k,
                   SortMode mode, double tau, double delta,
                   int exclude_source) {
  const RankedView view = excluded_view(masked_query, base, delta,
                                        exclude_source);
  if (k < 1 || k > view.x.rows())
    throw UsageError("predict: k exceeds usable prototype count " +
                     std::to_string(view.x.rows()));
  std::vector<int> order;
  if (mode == SortMode::kHard) {
    order = hard_topk(view.v, k);
  } else {
    order = relaxed_argmax_order(view.v, k);
  }
  Prediction pred;
  pred.neighbors.reserve(static_cast<size_t>(k));
  for (int r : order)
    pred.neighbors.push_back({view.source[static_cast<size_t>(r)], view.y(r),
                              view.dist(r)});
  pred.label = majority_label(pred.neighbors, &pred.tie_broken);
  return pred;
}

double prediction_loss(const Vec& masked_query, int label,
                       const PrototypeBase& base, int k, double tau,
                       double delta, int exclude_source, bool scale_by_k) {
  const RankedView view = excluded_view(masked_query, base, delta,
                                        exclude_source);
  if (k < 1 || k > view.x.rows())
    throw UsageError("prediction_loss: k exceeds usable prototype count");
  const Mat p = relaxed_sort_topk(view.v, tau, k);
  double hit = 0.0;
  for (int row = 0; row < k; ++row)
    for (int m = 0; m < p.cols(); ++m)
      if (view.y(m) == label) hit += p(row, m);
  const double loss = static_cast<double>(k) - hit;
  return scale_by_k ? loss / static_cast<double>(k) : loss;
}

ParityReport hybrid_parity_check(const Mat& masked_queries,
                                 const PrototypeBase& base, int k, double tau,
                                 double delta) {
  ParityReport report;
  report.n_queries = static_cast<int>(masked_queries.rows());
  for (int qi = 0; qi < masked_queries.rows(); ++qi) {
    const Vec q = masked_queries.row(qi).transpose();
    const Vec v = similarity(q, base, delta);
    bool tied = false;
    std::vector<double> sorted(v.data(), v.data() + v.size());
    std::sort(sorted.begin(), sorted.end());
    for (size_t i = 1; i < sorted.size(); ++i)
      if (sorted[i] == sorted[i - 1]) tied = true;

    const Prediction hard =
        predict(q, base, k, SortMode::kHard, tau, delta);
    const Prediction relaxed =
        predict(q, base, k, SortMode::kRelaxedArgmax, tau, delta);
    std::vector<int> hl, rl;
    for (const auto& nb : hard.neighbors) hl.push_back(nb.label);
    for (const auto& nb : relaxed.neighbors) rl.push_back(nb.label);
    std::sort(hl.begin(), hl.end());
    std::sort(rl.begin(), rl.end());
    const bool agree = hard.label == relaxed.label && hl == rl;
    if (tied) {
      ++report.n_ties;
      if (agree) ++report.n_agree;
    } else if (agree) {
      ++report.n_agree;
    } else {
      report.mismatched_queries.push_back(qi);
    }
  }
  return report;
}

}  // namespace protogate
