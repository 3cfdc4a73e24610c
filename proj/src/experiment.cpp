#include "protogate/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>
#include <string>

#include "protogate/baselines.hpp"
#include "protogate/errors.hpp"
#include "protogate/rng.hpp"

namespace protogate {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const char* what) {
  if (!j.is_object()) throw UsageError(std::string{what} + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw UsageError(std::string{what} + ": unknown key '" + it.key() + "'");
    }
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

json mat_json(const Mat& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Mat mat_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw DataError(std::string{what} + ": expected a nonempty array");
  const int rows = static_cast<int>(j.size());
  const int cols = static_cast<int>(j[0].size());
  Mat m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    if (static_cast<int>(j[i].size()) != cols) {
      throw DataError(std::string{what} + ": ragged rows");
    }
    for (int c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

json dataset_spec_json(const DatasetSpec& d) {
  return json{{"kind", d.kind},         {"path", d.path},
              {"label_col", d.label_col}, {"truth_path", d.truth_path},
              {"n_class1", d.n_class1},   {"n_class2", d.n_class2},
              {"dim", d.dim}};
}

DatasetSpec dataset_spec_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"kind", "path", "label_col", "truth_path", "n_class1",
                       "n_class2", "dim"},
                      "dataset");
  DatasetSpec d;
  if (j.contains("kind")) d.kind = j.at("kind").get<std::string>();
  if (j.contains("path")) d.path = j.at("path").get<std::string>();
  if (j.contains("label_col")) d.label_col = j.at("label_col").get<std::string>();
  if (j.contains("truth_path")) d.truth_path = j.at("truth_path").get<std::string>();
  if (j.contains("n_class1")) d.n_class1 = j.at("n_class1").get<int>();
  if (j.contains("n_class2")) d.n_class2 = j.at("n_class2").get<int>();
  if (j.contains("dim")) d.dim = j.at("dim").get<int>();
  return d;
}

json grid_spec_json(const GridSpec& g) {
  return json{{"lambda_global", g.lambda_global},
              {"lambda_local", g.lambda_local},
              {"k", g.k},
              {"learning_rate", g.learning_rate}};
}

GridSpec grid_spec_from_json(const json& j) {
  reject_unknown_keys(j, {"lambda_global", "lambda_local", "k", "learning_rate"},
                      "grid");
  GridSpec g;
  if (j.contains("lambda_global"))
    g.lambda_global = j.at("lambda_global").get<std::vector<double>>();
  if (j.contains("lambda_local"))
    g.lambda_local = j.at("lambda_local").get<std::vector<double>>();
  if (j.contains("k")) g.k = j.at("k").get<std::vector<int>>();
  if (j.contains("learning_rate"))
    g.learning_rate = j.at("learning_rate").get<std::vector<double>>();
  return g;
}

std::vector<std::vector<int>> subset_truth(
    const std::vector<std::vector<int>>& truth, const std::vector<int>& rows) {
  std::vector<std::vector<int>> out;
  out.reserve(rows.size());
  for (int r : rows) out.push_back(truth[static_cast<size_t>(r)]);
  return out;
}

struct BaselineRunScores {
  double knn_ba = 0.0;
  double knn_f1 = 0.0;
  double corr_ba = 0.0;
  double corr_f1 = 0.0;
};

// Reference classifiers see exactly the rows the prototype base is built
// from (the train split) under the same normalizer convention.
BaselineRunScores evaluate_baselines(const Dataset& ds, const SplitRun& split,
                                     int k, int topk) {
  const Normalizer nz = fit_normalizer(ds.x, split.train);
  const Mat xn = apply_normalizer(nz, ds.x);
  const Mat xtr = subset_rows(xn, split.train);
  const IVec ytr = subset_labels(ds.y, split.train);
  const Mat xte = subset_rows(xn, split.test);
  const IVec yte = subset_labels(ds.y, split.test);
  const int d = ds.dim();

  BaselineRunScores s;
  const IVec pred_all = knn_predict(xtr, ytr, xte, k);
  s.knn_ba = balanced_accuracy(yte, pred_all, ds.classes);

  const std::vector<int> feats = correlation_topk(xtr, ytr, topk);
  const IVec pred_top = knn_predict_on(xtr, ytr, xte, k, feats);
  s.corr_ba = balanced_accuracy(yte, pred_top, ds.classes);

  if (!ds.truth.empty()) {
    const auto truth_te = subset_truth(ds.truth, split.test);
    const int n_te = static_cast<int>(split.test.size());
    s.knn_f1 = f1_select(Mat::Ones(n_te, d), truth_te);
    Mat mask = Mat::Zero(n_te, d);
    for (int f : feats) mask.col(f).setOnes();
    s.corr_f1 = f1_select(mask, truth_te);
  }
  return s;
}

void push_row(std::vector<AggregateRow>& rows, const std::string& dataset,
              const std::string& method, const std::string& metric,
              const MeanStd& ms) {
  rows.push_back({dataset, method, metric, ms.mean, ms.std});
}

void write_grid_scores_csv(const std::string& path, const GridResult& grid) {
  std::ostringstream out;
  out << "config_index,lambda_global,lambda_local,k,learning_rate,"
         "mean_val_balanced_accuracy\n";
  for (size_t i = 0; i < grid.configs.size(); ++i) {
    const TrainConfig& c = grid.configs[i];
    out << i << ',' << fmt(c.lambda_global) << ',' << fmt(c.lambda_local)
        << ',' << c.k << ',' << fmt(c.learning_rate) << ','
        << fmt(grid.mean_val_accuracy[i]) << '\n';
  }
  write_text(path, out.str());
}

json outcome_json(const RunOutcome& o) {
  json j = json{{"repeat", o.repeat},
                {"fold", o.fold},
                {"config_index", o.config_index},
                {"val_balanced_accuracy", o.val_balanced_accuracy},
                {"best_val_loss", o.best_val_loss},
                {"best_iteration", o.best_iteration},
                {"iterations_run", o.iterations_run},
                {"global_selected", o.global_selected}};
  j["test"] = run_metrics_json(o.test);
  return j;
}

int brute_knn_oracle(const Mat& xtr, const IVec& ytr, const Vec& q, int k) {
  struct Entry {
    double dist;
    int idx;
  };
  std::vector<Entry> order(static_cast<size_t>(xtr.rows()));
  for (int i = 0; i < xtr.rows(); ++i) {
    order[static_cast<size_t>(i)] = {(xtr.row(i).transpose() - q).norm(), i};
  }
  std::sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    return a.idx < b.idx;
  });
  std::vector<int> votes;
  for (int n = 0; n < k; ++n) {
    const int label = ytr(order[static_cast<size_t>(n)].idx);
    if (label >= static_cast<int>(votes.size())) votes.resize(label + 1, 0);
    ++votes[label];
  }
  const int top = *std::max_element(votes.begin(), votes.end());
  for (int n = 0; n < k; ++n) {
    const int label = ytr(order[static_cast<size_t>(n)].idx);
    if (votes[label] == top) return label;
  }
  return -1;
}

}  // namespace

json manifest_json(const Manifest& m) {
  json j;
  j["dataset"] = dataset_spec_json(m.dataset);
  j["config"] = train_config_json(m.config);
  j["use_grid"] = m.use_grid;
  j["grid"] = grid_spec_json(m.grid);
  j["folds"] = m.folds;
  j["repeats"] = m.repeats;
  j["val_frac"] = m.val_frac;
  j["seed"] = m.seed;
  j["out_dir"] = m.out_dir;
  j["jobs"] = m.jobs;
  j["with_baselines"] = m.with_baselines;
  j["baseline_topk"] = m.baseline_topk;
  j["baseline_k"] = m.baseline_k;
  return j;
}

int default_hidden_width(const DatasetSpec& ds) {
  return ds.kind == "csv" ? 200 : 100;
}

Manifest manifest_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"dataset", "config", "use_grid", "grid", "folds",
                       "repeats", "val_frac", "seed", "out_dir", "jobs",
                       "with_baselines", "baseline_topk", "baseline_k"},
                      "manifest");
  Manifest m;
  if (j.contains("dataset")) m.dataset = dataset_spec_from_json(j.at("dataset"));
  if (j.contains("config")) m.config = train_config_from_json(j.at("config"));
  m.hidden_pinned = j.contains("config") && j.at("config").contains("hidden");
  if (!m.hidden_pinned) m.config.hidden = default_hidden_width(m.dataset);
  if (j.contains("use_grid")) m.use_grid = j.at("use_grid").get<bool>();
  if (j.contains("grid")) m.grid = grid_spec_from_json(j.at("grid"));
  if (j.contains("folds")) m.folds = j.at("folds").get<int>();
  if (j.contains("repeats")) m.repeats = j.at("repeats").get<int>();
  if (j.contains("val_frac")) m.val_frac = j.at("val_frac").get<double>();
  if (j.contains("seed")) m.seed = j.at("seed").get<uint64_t>();
  if (j.contains("out_dir")) m.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("jobs")) m.jobs = j.at("jobs").get<int>();
  if (j.contains("with_baselines"))
    m.with_baselines = j.at("with_baselines").get<bool>();
  if (j.contains("baseline_topk")) m.baseline_topk = j.at("baseline_topk").get<int>();
  if (j.contains("baseline_k")) m.baseline_k = j.at("baseline_k").get<int>();
  return m;
}

Manifest load_manifest(const std::string& path) {
  return manifest_from_json(read_json_file(path));
}

void validate_manifest(const Manifest& m) {
  if (m.dataset.kind == "csv") {
    if (m.dataset.path.empty()) {
      throw UsageError("manifest: dataset.path is required when kind=csv");
    }
    if (m.dataset.label_col.empty()) {
      throw UsageError("manifest: dataset.label_col must be nonempty");
    }
  } else {
    syn_kind_from(m.dataset.kind);  // throws on unknown kinds
    if (m.dataset.dim < 11) throw UsageError("manifest: dataset.dim must be >= 11");
    if (m.dataset.n_class1 < 1 || m.dataset.n_class2 < 1) {
      throw UsageError("manifest: class quotas must be positive");
    }
  }
  validate_train_config(m.config);
  if (m.use_grid) {
    if (m.grid.lambda_global.empty() || m.grid.lambda_local.empty() ||
        m.grid.k.empty() || m.grid.learning_rate.empty()) {
      throw UsageError("manifest: every grid axis needs at least one value");
    }
    for (const TrainConfig& c : expand_grid(m.grid, m.config)) {
      validate_train_config(c);
    }
  }
  if (m.folds < 2) throw UsageError("manifest: folds must be >= 2");
  if (m.repeats < 1) throw UsageError("manifest: repeats must be >= 1");
  if (!(m.val_frac > 0.0 && m.val_frac < 1.0)) {
    throw UsageError("manifest: val_frac must lie in (0, 1)");
  }
  if (m.jobs < 1) throw UsageError("manifest: jobs must be >= 1");
  if (m.out_dir.empty()) throw UsageError("manifest: out_dir must be nonempty");
  if (m.baseline_topk < 1) throw UsageError("manifest: baseline_topk must be >= 1");
  if (m.baseline_k < 1) throw UsageError("manifest: baseline_k must be >= 1");
}

Dataset load_manifest_dataset(const Manifest& m) {
  if (m.dataset.kind == "csv") {
    Dataset ds = load_csv(m.dataset.path, m.dataset.label_col);
    if (!m.dataset.truth_path.empty()) load_truth_json(m.dataset.truth_path, ds);
    return ds;
  }
  return gen_synthetic(syn_kind_from(m.dataset.kind), m.dataset.n_class1,
                       m.dataset.n_class2, m.dataset.dim,
                       derive_seed(m.seed, "dataset"));
}

std::string dataset_display_name(const Manifest& m) {
  if (m.dataset.kind != "csv") return m.dataset.kind;
  const std::string stem = fs::path(m.dataset.path).stem().string();
  return stem.empty() ? "csv" : stem;
}

ExperimentResult run_experiment(const Manifest& m) {
  validate_manifest(m);
  const Dataset ds = load_manifest_dataset(m);
  const fs::path out(m.out_dir);
  fs::create_directories(out / "runs");
  write_text((out / "manifest.json").string(), manifest_json(m).dump(2) + "\n");

  const SplitPlan plan =
      make_splits(ds.y, m.folds, m.repeats, m.val_frac,
                  derive_seed(m.seed, "splits"), ds.label_names);
  write_text((out / "splits.json").string(), split_plan_json(plan).dump(2) + "\n");

  TrainConfig base_cfg = m.config;
  base_cfg.seed = m.seed;
  const std::vector<TrainConfig> configs =
      m.use_grid ? expand_grid(m.grid, base_cfg)
                 : std::vector<TrainConfig>{base_cfg};

  ExperimentResult res;
  res.manifest = m;
  res.plan = plan;
  res.grid = grid_search(ds, plan, configs, m.jobs);
  write_grid_scores_csv((out / "grid_scores.csv").string(), res.grid);

  const std::vector<RunOutcome>& best = res.grid.outcomes[res.grid.best_index];
  for (const RunOutcome& o : best) {
    char name[64];
    std::snprintf(name, sizeof(name), "run_r%d_f%d.metrics.json", o.repeat, o.fold);
    write_text((out / "runs" / name).string(), outcome_json(o).dump(2) + "\n");
  }

  const std::string dname = dataset_display_name(m);
  const bool has_truth = !ds.truth.empty();
  std::vector<double> ba, f1, mean_sel, prop_sel, gsel, qloc, both, recov;
  for (const RunOutcome& o : best) {
    ba.push_back(o.test.balanced_accuracy);
    if (has_truth) f1.push_back(o.test.f1_select);
    mean_sel.push_back(o.test.mean_selected);
    prop_sel.push_back(o.test.prop_selected);
    gsel.push_back(static_cast<double>(o.global_selected));
    qloc.push_back(o.test.q_local_sparsity);
    both.push_back(o.test.composition.both_selected_frac);
    recov.push_back(o.test.composition.locally_recovered_frac);
  }

  std::vector<AggregateRow>& rows = res.aggregate;
  push_row(rows, dname, "protogate", "balanced_accuracy", mean_std(ba));
  if (has_truth) push_row(rows, dname, "protogate", "f1_select", mean_std(f1));
  push_row(rows, dname, "protogate", "mean_selected", mean_std(mean_sel));
  push_row(rows, dname, "protogate", "prop_selected", mean_std(prop_sel));
  push_row(rows, dname, "protogate", "global_selected", mean_std(gsel));
  push_row(rows, dname, "protogate", "q_local_sparsity", mean_std(qloc));
  push_row(rows, dname, "protogate", "both_selected_frac", mean_std(both));
  push_row(rows, dname, "protogate", "locally_recovered_frac", mean_std(recov));

  if (m.with_baselines) {
    std::vector<double> kba, kf1, cba, cf1;
    for (const SplitRun& split : plan.runs) {
      const BaselineRunScores s =
          evaluate_baselines(ds, split, m.baseline_k, m.baseline_topk);
      kba.push_back(s.knn_ba);
      cba.push_back(s.corr_ba);
      if (has_truth) {
        kf1.push_back(s.knn_f1);
        cf1.push_back(s.corr_f1);
      }
    }
    BaselineAggregate knn{"knn_all", mean_std(kba), {}, has_truth};
    BaselineAggregate corr{"corr_topk", mean_std(cba), {}, has_truth};
    if (has_truth) {
      knn.f1 = mean_std(kf1);
      corr.f1 = mean_std(cf1);
    }
    res.baselines = {knn, corr};

    const double d = static_cast<double>(ds.dim());
    push_row(rows, dname, "knn_all", "balanced_accuracy", knn.balanced_accuracy);
    if (has_truth) push_row(rows, dname, "knn_all", "f1_select", knn.f1);
    push_row(rows, dname, "knn_all", "prop_selected", {1.0, 0.0});
    push_row(rows, dname, "corr_topk", "balanced_accuracy", corr.balanced_accuracy);
    if (has_truth) push_row(rows, dname, "corr_topk", "f1_select", corr.f1);
    push_row(rows, dname, "corr_topk", "prop_selected",
             {std::min(static_cast<double>(m.baseline_topk), d) / d, 0.0});

    if (has_truth) {
      const std::vector<double> f1s{mean_std(f1).mean, knn.f1.mean, corr.f1.mean};
      const std::vector<double> bas{mean_std(ba).mean, knn.balanced_accuracy.mean,
                                    corr.balanced_accuracy.mean};
      const std::vector<double> diff = rank_difference_from_scores(f1s, bas);
      push_row(rows, dname, "protogate", "rank_difference", {diff[0], 0.0});
      push_row(rows, dname, "knn_all", "rank_difference", {diff[1], 0.0});
      push_row(rows, dname, "corr_topk", "rank_difference", {diff[2], 0.0});
    }
  }

  write_aggregate_csv((out / "aggregate.csv").string(), rows);
  return res;
}

TrainArtifacts run_single_training(const Manifest& m) {
  validate_manifest(m);
  const Dataset ds = load_manifest_dataset(m);
  const fs::path out(m.out_dir);
  fs::create_directories(out);
  write_text((out / "manifest.json").string(), manifest_json(m).dump(2) + "\n");

  const SplitPlan plan = make_splits(ds.y, m.folds, 1, m.val_frac,
                                     derive_seed(m.seed, "splits"),
                                     ds.label_names);
  const SplitRun& split = plan.runs.front();

  TrainConfig cfg = m.config;
  cfg.seed = derive_seed(m.seed, "train-run", {0, 0, 0});

  const Normalizer nz = fit_normalizer(ds.x, split.train);
  const Mat xn = apply_normalizer(nz, ds.x);
  const Mat xtr = subset_rows(xn, split.train);
  const IVec ytr = subset_labels(ds.y, split.train);
  const Mat xva = subset_rows(xn, split.val);
  const IVec yva = subset_labels(ds.y, split.val);
  const Mat xte = subset_rows(xn, split.test);
  const IVec yte = subset_labels(ds.y, split.test);

  TrainResult tr = train(xtr, ytr, xva, yva, cfg);

  const Mat masks = inference_masks(tr.params, xte, cfg.eps_zero);
  const IVec pred = predict_batch(tr.params, tr.base, xte, cfg.k, cfg.tau,
                                  cfg.delta, cfg.eps_zero);
  const Vec s_global = global_mask(tr.params, cfg.eps_zero);

  RunMetrics test;
  if (ds.truth.empty()) {
    test = compute_run_metrics(yte, pred, ds.classes, s_global, masks, nullptr);
  } else {
    const auto truth_te = subset_truth(ds.truth, split.test);
    test = compute_run_metrics(yte, pred, ds.classes, s_global, masks, &truth_te);
  }

  // Artifact bases reference original dataset rows, not train-subset slots.
  PrototypeBase base = tr.base;
  for (int& s : base.source) s = split.train[static_cast<size_t>(s)];

  TrainArtifacts art;
  art.config = cfg;
  art.test = test;
  art.model_path = (out / "model.json").string();
  art.base_path = (out / "base.json").string();
  art.history_path = (out / "history.csv").string();
  art.metrics_path = (out / "metrics.json").string();
  art.explain_path = (out / "explanations.json").string();

  json extra;
  extra["config"] = train_config_json(cfg);
  extra["normalizer"] = normalizer_json(nz);
  extra["label_names"] = ds.label_names;
  extra["feature_names"] = ds.feature_names;
  extra["dataset"] = dataset_display_name(m);
  save_checkpoint(art.model_path, tr.params, extra);
  save_base(art.base_path, base, ds.label_names);
  write_history_csv(art.history_path, tr.history);

  json mj;
  mj["test"] = run_metrics_json(test);
  mj["val_balanced_accuracy"] = balanced_accuracy(
      yva, predict_batch(tr.params, tr.base, xva, cfg.k, cfg.tau, cfg.delta,
                         cfg.eps_zero),
      ds.classes);
  mj["best_val_loss"] = tr.best_val_loss;
  mj["best_iteration"] = tr.best_iteration;
  mj["iterations_run"] = tr.iterations_run;
  mj["stopped_early"] = tr.stopped_early;
  write_text(art.metrics_path, mj.dump(2) + "\n");

  const Mat queries = subset_rows(ds.x, split.test);
  const json ex = explain_queries(tr.params, nz, base, queries, cfg,
                                  ds.label_names, ds.feature_names);
  write_text(art.explain_path, ex.dump(2) + "\n");
  return art;
}

json explain_queries(const GatingParams& params, const Normalizer& nz,
                     const PrototypeBase& base, const Mat& queries,
                     const TrainConfig& cfg,
                     const std::vector<std::string>& label_names,
                     const std::vector<std::string>& feature_names) {
  const int d = params.input_dim;
  if (queries.cols() != d) {
    throw DataError("explain: query dimension " +
                    std::to_string(queries.cols()) +
                    " does not match the model input dimension " +
                    std::to_string(d));
  }
  if (base.x.cols() != d) {
    throw DataError("explain: base dimension " + std::to_string(base.x.cols()) +
                    " does not match the model input dimension " +
                    std::to_string(d));
  }
  const Mat xn = apply_normalizer(nz, queries);
  const Mat masks = inference_masks(params, xn, cfg.eps_zero);
  const Vec s_global = global_mask(params, cfg.eps_zero);

  auto label_of = [&](int cls) -> std::string {
    if (cls >= 0 && cls < static_cast<int>(label_names.size())) {
      return label_names[static_cast<size_t>(cls)];
    }
    return std::to_string(cls);
  };
  auto name_of = [&](int f) -> std::string {
    if (f >= 0 && f < static_cast<int>(feature_names.size())) {
      return feature_names[static_cast<size_t>(f)];
    }
    return "x" + std::to_string(f + 1);
  };

  json out;
  out["k"] = cfg.k;
  json qs = json::array();
  for (int i = 0; i < queries.rows(); ++i) {
    const Vec masked = (xn.row(i).array() * masks.row(i).array()).transpose();
    const Prediction p =
        predict(masked, base, cfg.k, SortMode::kHard, cfg.tau, cfg.delta);
    json rec;
    rec["index"] = i;
    rec["predicted_class"] = p.label;
    rec["predicted_label"] = label_of(p.label);
    rec["tie_broken"] = p.tie_broken;
    json neigh = json::array();
    for (size_t n = 0; n < p.neighbors.size(); ++n) {
      const NeighborRef& r = p.neighbors[n];
      neigh.push_back(json{{"rank", n + 1},
                           {"source_row", r.source_index},
                           {"class", r.label},
                           {"label", label_of(r.label)},
                           {"distance", r.distance}});
    }
    rec["neighbors"] = std::move(neigh);
    json sel = json::array();
    int n_sel = 0;
    for (int f = 0; f < d; ++f) {
      if (masks(i, f) <= 0.0) continue;
      ++n_sel;
      const FeatureFate fate = classify_feature(s_global(f) > 0.0, true);
      sel.push_back(json{{"feature", f + 1},
                         {"name", name_of(f)},
                         {"mask", masks(i, f)},
                         {"fate", feature_fate_name(fate)}});
    }
    rec["selected"] = std::move(sel);
    rec["n_selected"] = n_sel;
    qs.push_back(std::move(rec));
  }
  out["queries"] = std::move(qs);
  return out;
}

void save_base(const std::string& path, const PrototypeBase& base,
               const std::vector<std::string>& label_names) {
  json j;
  j["magic"] = kBaseMagic;
  j["x"] = mat_json(base.x);
  std::vector<int> y(static_cast<size_t>(base.y.size()));
  for (int i = 0; i < base.y.size(); ++i) y[static_cast<size_t>(i)] = base.y(i);
  j["y"] = y;
  j["source"] = base.source;
  j["label_names"] = label_names;
  write_text(path, j.dump() + "\n");
}

PrototypeBase load_base(const std::string& path,
                        std::vector<std::string>* label_names) {
  const json j = read_json_file(path);
  if (!j.is_object() || !j.contains("magic") ||
      j.at("magic").get<std::string>() != kBaseMagic) {
    throw DataError(path + ": not a prototype base file");
  }
  PrototypeBase base;
  base.x = mat_from_json(j.at("x"), "base.x");
  const auto y = j.at("y").get<std::vector<int>>();
  const auto source = j.at("source").get<std::vector<int>>();
  if (static_cast<int>(y.size()) != base.x.rows() || source.size() != y.size()) {
    throw DataError(path + ": inconsistent base shapes");
  }
  base.y.resize(static_cast<int>(y.size()));
  for (size_t i = 0; i < y.size(); ++i) base.y(static_cast<int>(i)) = y[i];
  base.source = source;
  if (label_names && j.contains("label_names")) {
    *label_names = j.at("label_names").get<std::vector<std::string>>();
  }
  return base;
}

namespace {

VerifyCheck check_gradients() {
  const int b = 8, d = 10, hidden = 6;
  TrainConfig cfg;
  cfg.k = 3;
  cfg.hidden = hidden;
  cfg.lambda_local = 3e-4;
  double worst = 0.0;
  int checked = 0, skipped = 0;
  for (int trial = 0; trial < 20; ++trial) {
    cfg.tau = (trial % 2 == 0) ? 16.0 : 2.0;
    GatingParams p = init_gating(d, hidden, 1000 + trial);
    Rng rng(2000 + trial);
    Mat xb(b, d), eps(b, d);
    IVec yb(b);
    for (int i = 0; i < b; ++i) {
      yb(i) = static_cast<int>(rng.next_index(2));
      for (int j = 0; j < d; ++j) {
        xb(i, j) = rng.next_gaussian();
        eps(i, j) = cfg.sigma * rng.next_gaussian();
      }
    }
    BatchLossGraph g;
    build_batch_loss(g, b, d, cfg);
    set_batch_loss_inputs(g, p, xb, yb, eps, cfg.eps_zero);
    const GradCheckReport rep =
        grad_check(g.tape, {g.sel.w1, g.sel.b1, g.sel.w2, g.sel.b2, g.sel.w3,
                            g.sel.b3});
    worst = std::max(worst, rep.max_rel_err);
    checked += rep.n_checked;
    skipped += rep.n_skipped;
  }
  VerifyCheck c;
  c.name = "gradient-fidelity";
  c.pass = worst < 1e-4 && checked > 1000;
  c.detail = "max rel err " + fmt(worst) + " over " + std::to_string(checked) +
             " params, 20 instances, " + std::to_string(skipped) +
             " kink-adjacent skipped (tol 1e-4)";
  return c;
}

VerifyCheck check_relaxed_sort_limit() {
  Rng rng(31);
  double worst_sum = 0.0;
  int mismatches = 0, rows = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.next_index(63));
    Vec v(n);
    for (int i = 0; i < n; ++i) v(i) = rng.next_uniform();
    const Mat perm = relaxed_sort(v, 1e-4);
    const std::vector<int> expect = hard_topk(v, n);
    for (int r = 0; r < n; ++r, ++rows) {
      int arg = 0;
      perm.row(r).maxCoeff(&arg);
      if (arg != expect[static_cast<size_t>(r)]) ++mismatches;
      worst_sum = std::max(worst_sum, std::abs(perm.row(r).sum() - 1.0));
    }
  }
  VerifyCheck c;
  c.name = "relaxed-sort-limit";
  c.pass = mismatches == 0 && worst_sum < 1e-9;
  c.detail = std::to_string(mismatches) + " argmax mismatches over " +
             std::to_string(rows) + " rows; max |row sum - 1| = " +
             fmt(worst_sum) + " (tol 1e-9)";
  return c;
}

VerifyCheck check_loss_count() {
  Rng rng(47);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 4 + static_cast<int>(rng.next_index(17));
    const int d = 4;
    const int k = 1 + static_cast<int>(rng.next_index(3));
    Mat x(n, d);
    IVec y(n);
    for (int i = 0; i < n; ++i) {
      y(i) = static_cast<int>(rng.next_index(3));
      for (int j = 0; j < d; ++j) x(i, j) = rng.next_gaussian();
    }
    std::vector<int> src(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) src[static_cast<size_t>(i)] = i;
    const PrototypeBase base = build_base(x, y, src);
    Vec q(d);
    for (int j = 0; j < d; ++j) q(j) = rng.next_gaussian();
    const int label = static_cast<int>(rng.next_index(3));
    const double loss = prediction_loss(q, label, base, k, 1e-4, 1e-9);
    const Prediction p = predict(q, base, k, SortMode::kHard, 1.0, 1e-9);
    int mismatch = 0;
    for (const NeighborRef& r : p.neighbors) mismatch += (r.label != label);
    worst = std::max(worst, std::abs(loss - mismatch));
  }
  VerifyCheck c;
  c.name = "loss-count-identity";
  c.pass = worst < 1e-2;
  c.detail = "50 bases: max |loss - mismatch count| = " + fmt(worst) +
             " (tol 1e-2)";
  return c;
}

VerifyCheck check_l0_surrogate() {
  const int d = 20;
  const double sigma = 0.5;
  const int draws = 100000;
  Rng rng(59);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    Vec mu(d);
    for (int j = 0; j < d; ++j) mu(j) = rng.next_gaussian();
    double analytic = 0.0;
    for (int j = 0; j < d; ++j) {
      analytic += 0.5 * std::erfc((-mu(j) / sigma) / std::sqrt(2.0));
    }
    double mc = 0.0;
    for (int s = 0; s < draws; ++s) {
      int count = 0;
      for (int j = 0; j < d; ++j) {
        const double m = mu(j) + sigma * rng.next_gaussian();
        count += (std::min(std::max(m, 0.0), 1.0) > 0.0);
      }
      mc += count;
    }
    mc /= draws;
    worst = std::max(worst, std::abs(mc - analytic) / analytic);
  }
  VerifyCheck c;
  c.name = "l0-surrogate-mc";
  c.pass = worst < 0.01;
  c.detail = "10 mean vectors, 1e5 draws each: max rel deviation " +
             fmt(worst) + " (tol 0.01)";
  return c;
}

VerifyCheck check_hybrid_parity() {
  // Small separable blobs, short training, then agreement of hard and
  // relaxed-argmax rankings on held-out queries.
  const int per = 40, d = 10;
  Rng rng(73);
  Mat x(2 * per, d);
  IVec y(2 * per);
  for (int i = 0; i < 2 * per; ++i) {
    const int cls = i < per ? 0 : 1;
    y(i) = cls;
    for (int j = 0; j < d; ++j) {
      x(i, j) = (cls == 0 ? -2.0 : 2.0) + rng.next_gaussian();
    }
  }
  Mat q(30, d);
  for (int i = 0; i < 30; ++i) {
    const int cls = i % 2;
    for (int j = 0; j < d; ++j) {
      q(i, j) = (cls == 0 ? -2.0 : 2.0) + rng.next_gaussian();
    }
  }
  TrainConfig cfg;
  cfg.k = 3;
  cfg.hidden = 16;
  cfg.batch_size = 32;
  cfg.max_iterations = 300;
  cfg.eval_every = 50;
  cfg.patience = 100;
  cfg.seed = 5;
  const TrainResult tr = train(x.topRows(per + per / 2),
                               y.head(per + per / 2),
                               x.bottomRows(per / 2), y.tail(per / 2), cfg);
  const Mat masks = inference_masks(tr.params, q, cfg.eps_zero);
  const Mat masked = q.array() * masks.array();
  const ParityReport rep =
      hybrid_parity_check(masked, tr.base, cfg.k, cfg.tau, cfg.delta);
  VerifyCheck c;
  c.name = "hybrid-parity";
  c.pass = rep.ok();
  c.detail = std::to_string(rep.n_agree) + "/" + std::to_string(rep.n_queries) +
             " queries agree between hard and relaxed ranking, " +
             std::to_string(rep.n_ties) + " exact ties reported";
  return c;
}

VerifyCheck check_knn_degeneracy() {
  Rng rng(89);
  const int n = 50, d = 8, k = 5;
  Mat x(n, d);
  IVec y(n);
  for (int i = 0; i < n; ++i) {
    y(i) = static_cast<int>(rng.next_index(3));
    for (int j = 0; j < d; ++j) x(i, j) = rng.next_gaussian();
  }
  std::vector<int> src(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) src[static_cast<size_t>(i)] = i;
  const PrototypeBase base = build_base(x, y, src);
  int agree = 0;
  const int queries = 200;
  for (int t = 0; t < queries; ++t) {
    Vec q(d);
    for (int j = 0; j < d; ++j) q(j) = rng.next_gaussian();
    const Prediction p = predict(q, base, k, SortMode::kHard, 1.0, 1e-9);
    agree += (p.label == brute_knn_oracle(x, y, q, k));
  }
  VerifyCheck c;
  c.name = "knn-degeneracy";
  c.pass = agree == queries;
  c.detail = std::to_string(agree) + "/" + std::to_string(queries) +
             " all-ones-mask predictions equal the brute-force KNN oracle";
  return c;
}

}  // namespace

std::vector<VerifyCheck> run_verification() {
  return {check_gradients(),    check_relaxed_sort_limit(), check_loss_count(),
          check_l0_surrogate(), check_hybrid_parity(),      check_knn_degeneracy()};
}

}  // namespace protogate
