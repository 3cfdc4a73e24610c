#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>
#include <vector>

#include "protogate/data.hpp"
#include "protogate/metrics.hpp"
#include "protogate/proto.hpp"
#include "protogate/selector.hpp"

namespace protogate {

struct TrainConfig {
  double lambda_global = 0.0;  // l1 strength on the first selector layer
  double lambda_local = 0.0;   // expected-l0 strength on local masks
  int k = 3;                   // neighbors per prediction
  double learning_rate = 0.1;
  double weight_decay = 1e-4;  // applies to every parameter
  int batch_size = 64;
  int max_iterations = 10000;  // optimizer steps
  int patience = 500;          // evaluations without improvement before stop
  int eval_every = 1;          // iterations between validation evaluations
  double sigma = 0.5;          // mask noise std (training only)
  double tau = 16.0;           // relaxed-sort temperature
  double delta = 1e-9;         // distance guard in similarities
  double eps_zero = 1e-12;     // |w| at or below this counts as a zero weight
  int hidden = 200;            // selector hidden width
  uint64_t seed = 0;
  bool penalize_bias = false;        // include b1 in the proximal l1 step
  bool val_loss_pred_only = false;   // drop R_select from validation loss
  bool loss_scale_by_k = false;      // divide the neighbor loss by k
};

// Throws UsageError on out-of-range fields (negative strengths,
// batch_size < 2, k >= batch_size, nonpositive rates).
void validate_train_config(const TrainConfig& c);

// JSON keys mirror the field names exactly; unknown keys are an error,
// missing keys keep their defaults.
nlohmann::json train_config_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct HistoryRow {
  int iter = 0;
  double train_loss = 0.0;  // batch loss + lambda_global * ||W1||_1, pre-step
  double val_loss = 0.0;    // last evaluated value (fresh when eval_every=1)
  double mean_l0 = 0.0;     // mean count of positive local mask entries
  double l1_norm = 0.0;     // ||W1||_1 entering this iteration
};

void write_history_csv(const std::string& path,
                       const std::vector<HistoryRow>& rows);

struct TrainResult {
  GatingParams params;  // snapshot with the lowest validation loss
  PrototypeBase base;   // full training set masked under those params
  std::vector<HistoryRow> history;
  double best_val_loss = 0.0;
  int best_iteration = 0;
  int iterations_run = 0;
  bool stopped_early = false;
};

// Disjoint training: the selector is the only trainable component; the
// predictor just scores its masks. Per iteration: shuffle-fed batch, noisy
// masks, in-batch prototypes with self-exclusion, backward, SGD step with
// weight decay, then proximal l1 on W1. Validation (deterministic masks,
// full-training-set prototypes) drives early stopping.
//
// Reproducibility contract: parameter init consumes the config seed via
// init_gating; batch shuffling draws from derive_seed(seed, "shuffle"), one
// fresh permutation per epoch; mask noise draws row-major per batch from
// derive_seed(seed, "noise"). A trailing batch shorter than k+1 merges into
// the previous one.
TrainResult train(const Mat& x_train, const IVec& y_train, const Mat& x_val,
                  const IVec& y_val, const TrainConfig& cfg);

// Mean relaxed neighbor loss of validation queries against the masked full
// training set (no noise, no self-exclusion), plus the selection
// regulariser on validation masks unless val_loss_pred_only.
double validation_loss(const GatingParams& p, const Mat& x_train,
                       const IVec& y_train, const Mat& x_val,
                       const IVec& y_val, const TrainConfig& cfg);

// w <- w - lr * (g + weight_decay * w) for every parameter, then the
// proximal soft-threshold on W1 (and b1 when penalize_bias).
void sgd_step(GatingParams& p, const GatingParams& g, double learning_rate,
              double weight_decay, double lambda_global,
              bool penalize_bias = false);

// Deterministic local masks for inference: clamp(mu) under the global mask.
Mat inference_masks(const GatingParams& p, const Mat& x,
                    double eps_zero = 1e-12);

PrototypeBase build_inference_base(const GatingParams& p, const Mat& x,
                                   const IVec& y, double eps_zero = 1e-12);

IVec predict_batch(const GatingParams& p, const PrototypeBase& base,
                   const Mat& x, int k, double tau, double delta,
                   double eps_zero = 1e-12);

// One batch's differentiable loss (relaxed neighbor loss + local sparsity
// surrogate; the l1 penalty lives in the proximal update, not the tape).
// Exposed so gradient checks can run against the exact production graph.
struct BatchLossGraph {
  Tape tape;
  SelectorNodes sel;
  NodeId x_raw = -1;
  NodeId eps = -1;
  NodeId match = -1;
  NodeId s_local = -1;
  NodeId loss_pred = -1;
  NodeId r_local = -1;
  NodeId root = -1;
  int batch = 0;
};

void build_batch_loss(BatchLossGraph& g, int batch, int input_dim,
                      const TrainConfig& cfg);
void set_batch_loss_inputs(BatchLossGraph& g, const GatingParams& p,
                           const Mat& xb, const IVec& yb, const Mat& eps,
                           double eps_zero);

// Hyperparameter grid, expanded as the cartesian product in declaration
// order (lambda_global, lambda_local, k, learning_rate).
struct GridSpec {
  std::vector<double> lambda_global;
  std::vector<double> lambda_local;
  std::vector<int> k;
  std::vector<double> learning_rate;
};

GridSpec synthetic_default_grid();
GridSpec real_world_default_grid();
std::vector<TrainConfig> expand_grid(const GridSpec& g,
                                     const TrainConfig& base);

// One cross-validation run: normalize on the train indices, train, score
// validation and test splits. The run's training seed is derived from
// (cfg.seed, "train-run", config_index, repeat, fold).
struct RunOutcome {
  int config_index = 0;
  int repeat = 0;
  int fold = 0;
  double val_balanced_accuracy = 0.0;
  RunMetrics test;
  double best_val_loss = 0.0;
  int best_iteration = 0;
  int iterations_run = 0;
  int global_selected = 0;  // features kept by the global mask
};

RunOutcome execute_run(const Dataset& ds, const SplitRun& split,
                       const TrainConfig& cfg, int config_index);

struct GridResult {
  std::vector<TrainConfig> configs;
  std::vector<std::vector<RunOutcome>> outcomes;  // [config][run]
  std::vector<double> mean_val_accuracy;
  int best_index = 0;
};

// Exhaustive evaluation of every config on every split run. Scored by mean
// validation balanced accuracy; ties keep the earliest config. Runs execute
// on `jobs` workers; results reduce in (config, run) order regardless of
// scheduling.
GridResult grid_search(const Dataset& ds, const SplitPlan& plan,
                       const std::vector<TrainConfig>& configs, int jobs);

}  // namespace protogate
