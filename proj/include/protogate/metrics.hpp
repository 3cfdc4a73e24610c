#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "protogate/tape.hpp"

namespace protogate {

// Mask-interplay taxonomy over (sample, feature) cells. The fractions
// condition on locally selected cells only, so both_selected_frac +
// locally_recovered_frac = 1 whenever any cell is selected; the dropped
// categories are reported as raw counts because they have no shared
// denominator with the selected ones.
struct CompositionStats {
  double both_selected_frac = 0.0;
  double locally_recovered_frac = 0.0;
  long long locally_dropped = 0;
  long long both_dropped = 0;
};

// Everything reported for one train/evaluate run.
struct RunMetrics {
  double balanced_accuracy = 0.0;
  double mean_selected = 0.0;   // mean per-sample count of s_local > 0
  double std_selected = 0.0;    // population std of that count
  double prop_selected = 0.0;   // mean_selected / D
  bool has_f1_select = false;   // true when ground-truth feature sets exist
  double f1_select = 0.0;
  CompositionStats composition;
  double q_local_sparsity = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population (divide by n)
};

// One line of the aggregate table consumed by plot tooling.
struct AggregateRow {
  std::string dataset;
  std::string method;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
};

// Macro-averaged recall. Classes absent from y_true are excluded from the
// mean. Labels must lie in [0, class_count).
double balanced_accuracy(const IVec& y_true, const IVec& y_pred,
                         int class_count);

// Mean per-sample F1 between {d : local_masks(i,d) > 0} and truth[i]
// (0-based feature indices). Empty selection with nonempty truth scores 0.
double f1_select(const Mat& local_masks,
                 const std::vector<std::vector<int>>& truth);

// Competition-average ranks, rank 1 = best. Ties share the mean of the
// positions they would occupy.
std::vector<double> competition_ranks(const std::vector<double>& values,
                                      bool higher_better);

// Per method: rank(F1_select) - rank(ACC_pred). Positive values flag
// selections that rank worse on fidelity than on accuracy.
std::vector<double> rank_difference(const std::vector<double>& f1_ranks,
                                    const std::vector<double>& acc_ranks);
std::vector<double> rank_difference_from_scores(
    const std::vector<double>& f1_scores,
    const std::vector<double>& acc_scores);

// Q = (1/(D*N)) * sum_j |union_i sel(i) \ sel(j)|. Zero when every sample
// selects the same set; grows with cross-sample disagreement.
double degree_of_local_sparsity(const Mat& local_masks);

CompositionStats composition(const Vec& s_global, const Mat& local_masks);

// Per dataset, affine-normalize method scores so best -> 1 and worst -> 0,
// then average across datasets. A dataset where every method scores the
// same contributes 1.0 to each.
std::vector<double> adtm_aggregate(
    const std::vector<std::vector<double>>& per_dataset_scores,
    bool higher_better);

MeanStd mean_std(const std::vector<double>& values);

// truth may be null when the dataset has no informative-feature annotation.
RunMetrics compute_run_metrics(const IVec& y_true, const IVec& y_pred,
                               int class_count, const Vec& s_global,
                               const Mat& local_masks,
                               const std::vector<std::vector<int>>* truth);

nlohmann::json run_metrics_json(const RunMetrics& m);

// Rows are written in the order given: dataset,method,metric,mean,std.
void write_aggregate_csv(const std::string& path,
                         const std::vector<AggregateRow>& rows);

}  // namespace protogate
