#pragma once

#include <cstdint>
#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "protogate/tape.hpp"

namespace protogate {

struct Dataset {
  Mat x;   // n x d
  IVec y;  // 0..classes-1, factorized in first-appearance order
  int classes = 0;
  std::vector<std::string> feature_names;
  std::vector<std::string> label_names;        // index = class id
  std::vector<std::vector<int>> truth;         // optional, 0-based features
  std::string kind;                            // "Syn1".. or "csv"
  int class_one_label = -1;                    // synthetic quota bookkeeping
  int n() const { return static_cast<int>(x.rows()); }
  int dim() const { return static_cast<int>(x.cols()); }
};

enum class SynKind : uint8_t { kSyn1, kSyn2, kSyn3 };
const char* syn_kind_name(SynKind k);
SynKind syn_kind_from(const std::string& name);

// Branch-dependent odds ratio; x is one sample, 0-based (x[10] is the
// eleventh feature steering the branch).
double syn_logit(SynKind kind, const Vec& x);
// Label rule y = 1(1 / (1 + logit) > 0.5).
int syn_label(SynKind kind, const Vec& x);
// Informative features of the active branch plus the branch feature itself.
std::vector<int> syn_truth(SynKind kind, const Vec& x);

// Rejection-samples i.i.d. N(0, I) rows until the class quotas are met:
// n_class1 samples with label 1, n_class2 with label 0. dim >= 11.
Dataset gen_synthetic(SynKind kind, int n_class1, int n_class2, int dim,
                      uint64_t seed);

// Plain numeric CSV with a header row; the named label column is factorized
// in first-appearance order. Any unparseable or missing feature value is a
// DataError naming the offending rows.
Dataset load_csv(const std::string& path, const std::string& label_col);
// Label-free variant for query files: every column is a feature.
Mat load_features_csv(const std::string& path,
                      std::vector<std::string>* names = nullptr);
void write_csv(const std::string& path, const Dataset& ds,
               const std::string& label_col = "y");

// Ground-truth sidecar: per-sample informative features, 1-based on disk.
void write_truth_json(const std::string& path, const Dataset& ds);
void load_truth_json(const std::string& path, Dataset& ds);

struct Normalizer {
  Vec mean;
  Vec std;
  std::vector<uint8_t> constant;  // flagged features transform to 0
};

// Population statistics (1/N) over the given training rows only.
Normalizer fit_normalizer(const Mat& x, const std::vector<int>& rows);
Mat apply_normalizer(const Normalizer& nz, const Mat& x);
nlohmann::json normalizer_json(const Normalizer& nz);
Normalizer normalizer_from_json(const nlohmann::json& j);

struct SplitRun {
  int repeat = 0;
  int fold = 0;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

struct SplitPlan {
  int folds = 5;
  int repeats = 5;
  double val_frac = 0.1;
  uint64_t seed = 0;
  std::vector<SplitRun> runs;  // ordered by (repeat, fold)
};

// Stratified k-fold, repeated. Validation rows are drawn from the training
// folds only, stratified. Every class needs >= folds members.
SplitPlan make_splits(const IVec& y, int folds, int repeats, double val_frac,
                      uint64_t seed,
                      const std::vector<std::string>& label_names = {});
nlohmann::json split_plan_json(const SplitPlan& plan);

Mat subset_rows(const Mat& x, const std::vector<int>& rows);
Mat subset_cols(const Mat& x, const std::vector<int>& cols);
IVec subset_labels(const IVec& y, const std::vector<int>& rows);

}  // namespace protogate
