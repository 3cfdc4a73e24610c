#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "protogate/data.hpp"
#include "protogate/train.hpp"

namespace protogate {

struct DatasetSpec {
  std::string kind = "Syn1";  // Syn1 | Syn2 | Syn3 | csv
  std::string path;           // csv source
  std::string label_col = "y";
  std::string truth_path;  // optional informative-feature sidecar
  int n_class1 = 150;
  int n_class2 = 50;
  int dim = 100;
};

// A fully deterministic experiment description. The root seed feeds every
// random stage through labeled streams: dataset generation uses
// (seed, "dataset"), splits use (seed, "splits"), run training seeds derive
// from (seed, "train-run", config, repeat, fold).
struct Manifest {
  DatasetSpec dataset;
  TrainConfig config;
  bool use_grid = false;
  GridSpec grid;
  int folds = 5;
  int repeats = 5;
  double val_frac = 0.1;
  uint64_t seed = 0;
  std::string out_dir = "out";
  int jobs = 1;
  bool with_baselines = true;
  int baseline_topk = 10;  // features kept by the correlation selector
  int baseline_k = 3;      // neighbor count for both reference classifiers
  // True when config.hidden came from the manifest file; unpinned manifests
  // follow default_hidden_width even after dataset flag overrides.
  bool hidden_pinned = false;
};

// Selector hidden width tracks the dataset family: 100 for the synthetic
// generators, 200 for real-world CSVs. Manifests may pin any other value.
int default_hidden_width(const DatasetSpec& ds);

nlohmann::json manifest_json(const Manifest& m);
Manifest manifest_from_json(const nlohmann::json& j);
Manifest load_manifest(const std::string& path);

// Throws UsageError before any compute: bad kind, missing csv path, grid or
// train-config fields out of range, degenerate split parameters.
void validate_manifest(const Manifest& m);

Dataset load_manifest_dataset(const Manifest& m);
std::string dataset_display_name(const Manifest& m);

struct BaselineAggregate {
  std::string method;
  MeanStd balanced_accuracy;
  MeanStd f1;
  bool has_f1 = false;
};

struct ExperimentResult {
  Manifest manifest;
  SplitPlan plan;
  GridResult grid;
  std::vector<BaselineAggregate> baselines;
  std::vector<AggregateRow> aggregate;  // contents of aggregate.csv
};

// Full cross-validated protocol. Writes manifest.json, splits.json,
// grid_scores.csv, per-run metrics for the winning config under runs/, and
// aggregate.csv into manifest.out_dir.
ExperimentResult run_experiment(const Manifest& m);

// One training on the (repeat 0, fold 0) split. Writes model.json (weights
// + config + normalizer), base.json, history.csv, metrics.json, and
// explanations.json for the held-out queries.
struct TrainArtifacts {
  TrainConfig config;  // seed resolved to the run's derived stream
  RunMetrics test;
  std::string model_path;
  std::string base_path;
  std::string history_path;
  std::string metrics_path;
  std::string explain_path;
};
TrainArtifacts run_single_training(const Manifest& m);

// Per-query explanation records: predicted label, the k nearest prototypes
// (source row, label, distance), and every selected feature with its mask
// value and selection fate. Queries arrive unnormalized.
nlohmann::json explain_queries(const GatingParams& params, const Normalizer& nz,
                               const PrototypeBase& base, const Mat& queries,
                               const TrainConfig& cfg,
                               const std::vector<std::string>& label_names,
                               const std::vector<std::string>& feature_names);

inline constexpr const char* kBaseMagic = "PROTOGATE-BASE-v1";
void save_base(const std::string& path, const PrototypeBase& base,
               const std::vector<std::string>& label_names);
PrototypeBase load_base(const std::string& path,
                        std::vector<std::string>* label_names = nullptr);

// Fast bundled self-checks (gradients, sort limit, l0 surrogate, loss-count
// identity, hybrid parity, KNN oracle). Every check states its tolerance in
// the detail string.
struct VerifyCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};
std::vector<VerifyCheck> run_verification();

}  // namespace protogate
