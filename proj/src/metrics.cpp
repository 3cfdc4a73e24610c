#include "protogate/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>

#include "protogate/errors.hpp"

namespace protogate {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

double balanced_accuracy(const IVec& y_true, const IVec& y_pred,
                         int class_count) {
  if (y_true.size() == 0)
    throw UsageError("balanced_accuracy: empty input");
  if (y_true.size() != y_pred.size())
    throw UsageError("balanced_accuracy: y_true and y_pred lengths differ");
  std::vector<long long> total(static_cast<size_t>(class_count), 0);
  std::vector<long long> correct(static_cast<size_t>(class_count), 0);
  for (Eigen::Index i = 0; i < y_true.size(); ++i) {
    const int c = y_true(i);
    if (c < 0 || c >= class_count)
      throw UsageError("balanced_accuracy: label " + std::to_string(c) +
                       " outside [0, " + std::to_string(class_count) + ")");
    total[static_cast<size_t>(c)] += 1;
    if (y_pred(i) == c) correct[static_cast<size_t>(c)] += 1;
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < class_count; ++c) {
    if (total[static_cast<size_t>(c)] == 0) continue;
    sum += static_cast<double>(correct[static_cast<size_t>(c)]) /
           static_cast<double>(total[static_cast<size_t>(c)]);
    present += 1;
  }
  return sum / static_cast<double>(present);
}

double f1_select(const Mat& local_masks,
                 const std::vector<std::vector<int>>& truth) {
  const Eigen::Index n = local_masks.rows();
  if (n == 0) throw UsageError("f1_select: no samples");
  if (truth.size() != static_cast<size_t>(n))
    throw UsageError("f1_select: mask rows and truth entries differ");
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::set<int> want(truth[static_cast<size_t>(i)].begin(),
                             truth[static_cast<size_t>(i)].end());
    long long tp = 0, fp = 0;
    for (Eigen::Index d = 0; d < local_masks.cols(); ++d) {
      if (local_masks(i, d) <= 0.0) continue;
      if (want.count(static_cast<int>(d)))
        tp += 1;
      else
        fp += 1;
    }
    const long long fn = static_cast<long long>(want.size()) - tp;
    const long long denom = 2 * tp + fp + fn;
    sum += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) /
                                  static_cast<double>(denom);
  }
  return sum / static_cast<double>(n);
}

std::vector<double> competition_ranks(const std::vector<double>& values,
                                      bool higher_better) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return higher_better ? values[a] > values[b] : values[a] < values[b];
  });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    // positions i+1 .. j+1 share the average rank
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::vector<double> rank_difference(const std::vector<double>& f1_ranks,
                                    const std::vector<double>& acc_ranks) {
  if (f1_ranks.size() != acc_ranks.size())
    throw UsageError("rank_difference: rankings cover different method sets");
  std::vector<double> diff(f1_ranks.size());
  for (size_t i = 0; i < diff.size(); ++i) diff[i] = f1_ranks[i] - acc_ranks[i];
  return diff;
}

std::vector<double> rank_difference_from_scores(
    const std::vector<double>& f1_scores,
    const std::vector<double>& acc_scores) {
  return rank_difference(competition_ranks(f1_scores, true),
                         competition_ranks(acc_scores, true));
}

double degree_of_local_sparsity(const Mat& local_masks) {
  const Eigen::Index n = local_masks.rows();
  const Eigen::Index d = local_masks.cols();
  if (n == 0 || d == 0)
    throw UsageError("degree_of_local_sparsity: empty mask matrix");
  std::vector<char> in_union(static_cast<size_t>(d), 0);
  std::vector<long long> count(static_cast<size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j)
      if (local_masks(i, j) > 0.0) {
        in_union[static_cast<size_t>(j)] = 1;
        count[static_cast<size_t>(i)] += 1;
      }
  const long long u = std::accumulate(in_union.begin(), in_union.end(), 0LL);
  // sel(j) is a subset of the union, so |union \ sel(j)| = |union| - |sel(j)|
  long long deficits = 0;
  for (Eigen::Index i = 0; i < n; ++i)
    deficits += u - count[static_cast<size_t>(i)];
  return static_cast<double>(deficits) /
         (static_cast<double>(d) * static_cast<double>(n));
}

CompositionStats composition(const Vec& s_global, const Mat& local_masks) {
  if (s_global.size() != local_masks.cols())
    throw UsageError("composition: global mask width differs from local masks");
  CompositionStats out;
  long long both = 0, recovered = 0;
  for (Eigen::Index i = 0; i < local_masks.rows(); ++i) {
    for (Eigen::Index j = 0; j < local_masks.cols(); ++j) {
      const bool g = s_global(j) > 0.0;
      const bool l = local_masks(i, j) > 0.0;
      if (g && l)
        both += 1;
      else if (g && !l)
        out.locally_dropped += 1;
      else if (!g && l)
        recovered += 1;
      else
        out.both_dropped += 1;
    }
  }
  const long long selected = both + recovered;
  if (selected > 0) {
    out.both_selected_frac =
        static_cast<double>(both) / static_cast<double>(selected);
    out.locally_recovered_frac =
        static_cast<double>(recovered) / static_cast<double>(selected);
  }
  return out;
}

std::vector<double> adtm_aggregate(
    const std::vector<std::vector<double>>& per_dataset_scores,
    bool higher_better) {
  if (per_dataset_scores.empty())
    throw UsageError("adtm_aggregate: no datasets");
  const size_t methods = per_dataset_scores.front().size();
  if (methods == 0) throw UsageError("adtm_aggregate: no methods");
  std::vector<double> out(methods, 0.0);
  for (const auto& scores : per_dataset_scores) {
    if (scores.size() != methods)
      throw UsageError("adtm_aggregate: datasets score different method sets");
    const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *lo_it, hi = *hi_it;
    for (size_t m = 0; m < methods; ++m) {
      if (hi == lo) {
        out[m] += 1.0;  // all-equal dataset: everyone is at the optimum
      } else if (higher_better) {
        out[m] += (scores[m] - lo) / (hi - lo);
      } else {
        out[m] += (hi - scores[m]) / (hi - lo);
      }
    }
  }
  for (double& v : out) v /= static_cast<double>(per_dataset_scores.size());
  return out;
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw UsageError("mean_std: empty input");
  MeanStd r;
  for (double v : values) r.mean += v;
  r.mean /= static_cast<double>(values.size());
  double acc = 0.0;
  for (double v : values) acc += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(acc / static_cast<double>(values.size()));
  return r;
}

RunMetrics compute_run_metrics(const IVec& y_true, const IVec& y_pred,
                               int class_count, const Vec& s_global,
                               const Mat& local_masks,
                               const std::vector<std::vector<int>>* truth) {
  RunMetrics m;
  m.balanced_accuracy = balanced_accuracy(y_true, y_pred, class_count);
  std::vector<double> counts(static_cast<size_t>(local_masks.rows()), 0.0);
  for (Eigen::Index i = 0; i < local_masks.rows(); ++i)
    counts[static_cast<size_t>(i)] =
        static_cast<double>((local_masks.row(i).array() > 0.0).count());
  const MeanStd c = mean_std(counts);
  m.mean_selected = c.mean;
  m.std_selected = c.std;
  m.prop_selected = c.mean / static_cast<double>(local_masks.cols());
  if (truth != nullptr) {
    m.has_f1_select = true;
    m.f1_select = f1_select(local_masks, *truth);
  }
  m.composition = composition(s_global, local_masks);
  m.q_local_sparsity = degree_of_local_sparsity(local_masks);
  return m;
}

nlohmann::json run_metrics_json(const RunMetrics& m) {
  nlohmann::json j{
      {"balanced_accuracy", m.balanced_accuracy},
      {"mean_selected", m.mean_selected},
      {"std_selected", m.std_selected},
      {"prop_selected", m.prop_selected},
      {"q_local_sparsity", m.q_local_sparsity},
      {"composition",
       {{"both_selected_frac", m.composition.both_selected_frac},
        {"locally_recovered_frac", m.composition.locally_recovered_frac},
        {"locally_dropped", m.composition.locally_dropped},
        {"both_dropped", m.composition.both_dropped}}},
  };
  if (m.has_f1_select)
    j["f1_select"] = m.f1_select;
  else
    j["f1_select"] = nullptr;
  return j;
}

void write_aggregate_csv(const std::string& path,
                         const std::vector<AggregateRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write aggregate csv: " + path);
  out << "dataset,method,metric,mean,std\n";
  for (const AggregateRow& r : rows)
    out << r.dataset << ',' << r.method << ',' << r.metric << ','
        << fmt_double(r.mean) << ',' << fmt_double(r.std) << '\n';
  if (!out.good()) throw DataError("write failed for aggregate csv: " + path);
}

}  // namespace protogate
