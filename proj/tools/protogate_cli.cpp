// Command-line surface: dataset generation, training, cross-validated
// evaluation, grid search, prediction explanation, and self-verification.
// Every command is a pure function of (flags, input files, seed).

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>

#include "protogate/baselines.hpp"
#include "protogate/data.hpp"
#include "protogate/errors.hpp"
#include "protogate/experiment.hpp"
#include "protogate/rng.hpp"

namespace {

using namespace protogate;
using nlohmann::json;

struct CommonFlags {
  std::string config_path;
  uint64_t seed = 0;
  std::string out;
  std::string dataset;
  std::string label_col;
  std::string kind;
  int folds = 5;
  int repeats = 5;
  double val_frac = 0.1;
  int jobs = 1;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* out_opt = nullptr;
  CLI::Option* dataset_opt = nullptr;
  CLI::Option* label_opt = nullptr;
  CLI::Option* kind_opt = nullptr;
  CLI::Option* folds_opt = nullptr;
  CLI::Option* repeats_opt = nullptr;
  CLI::Option* val_opt = nullptr;
  CLI::Option* jobs_opt = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_cv_flags) {
  cmd->add_option("--config", f.config_path,
                  "experiment manifest JSON (defaults apply when omitted)");
  f.seed_opt = cmd->add_option("--seed", f.seed, "root seed (default 0)");
  f.out_opt = cmd->add_option("--out", f.out, "output directory (default out)");
  f.dataset_opt = cmd->add_option(
      "--dataset", f.dataset, "CSV dataset path (sets dataset kind to csv)");
  f.label_opt = cmd->add_option("--label-col", f.label_col,
                                "label column name (default y)");
  f.kind_opt = cmd->add_option(
      "--kind", f.kind, "dataset kind: Syn1, Syn2, Syn3, or csv (default Syn1)");
  f.val_opt = cmd->add_option(
      "--val-frac", f.val_frac,
      "fraction of training rows held out for validation (default 0.1)");
  f.folds_opt =
      cmd->add_option("--folds", f.folds, "cross-validation folds (default 5)");
  if (with_cv_flags) {
    f.repeats_opt = cmd->add_option("--repeats", f.repeats,
                                    "cross-validation repeats (default 5)");
    f.jobs_opt =
        cmd->add_option("--jobs", f.jobs, "parallel workers (default 1)");
  }
}

Manifest resolve_manifest(const CommonFlags& f) {
  Manifest m;
  if (!f.config_path.empty()) m = load_manifest(f.config_path);
  if (f.seed_opt->count()) m.seed = f.seed;
  if (f.out_opt->count()) m.out_dir = f.out;
  if (f.kind_opt->count()) m.dataset.kind = f.kind;
  if (f.dataset_opt->count()) {
    m.dataset.kind = "csv";
    m.dataset.path = f.dataset;
  }
  if (f.label_opt->count()) m.dataset.label_col = f.label_col;
  if (f.folds_opt->count()) m.folds = f.folds;
  if (f.repeats_opt && f.repeats_opt->count()) m.repeats = f.repeats;
  if (f.val_opt->count()) m.val_frac = f.val_frac;
  if (f.jobs_opt && f.jobs_opt->count()) m.jobs = f.jobs;
  if (!m.hidden_pinned) m.config.hidden = default_hidden_width(m.dataset);
  return m;
}

void print_aggregate(const ExperimentResult& r) {
  std::printf("%-28s %-10s %12s %12s\n", "metric", "method", "mean", "std");
  for (const AggregateRow& row : r.aggregate) {
    std::printf("%-28s %-10s %12.6f %12.6f\n", row.metric.c_str(),
                row.method.c_str(), row.mean, row.std);
  }
}

int cmd_gen_synth(const std::string& kind, uint64_t seed,
                  const std::string& out) {
  if (out.empty()) throw UsageError("gen-synth: --out <file.csv> is required");
  const Dataset ds = gen_synthetic(syn_kind_from(kind), 150, 50, 100, seed);
  write_csv(out, ds);
  std::filesystem::path sidecar(out);
  sidecar.replace_extension(".truth.json");
  write_truth_json(sidecar.string(), ds);
  std::printf("wrote %s (%d x %d) and %s\n", out.c_str(), ds.n(), ds.dim(),
              sidecar.string().c_str());
  return 0;
}

int cmd_train(const Manifest& m) {
  const TrainArtifacts art = run_single_training(m);
  std::printf("test balanced accuracy %.6f, %.2f features selected per sample"
              " (%.1f%% of inputs)\n",
              art.test.balanced_accuracy, art.test.mean_selected,
              100.0 * art.test.prop_selected);
  std::printf("artifacts: %s %s %s %s %s\n", art.model_path.c_str(),
              art.base_path.c_str(), art.history_path.c_str(),
              art.metrics_path.c_str(), art.explain_path.c_str());
  return 0;
}

int cmd_cv(const Manifest& m) {
  const ExperimentResult r = run_experiment(m);
  std::printf("%zu configs x %zu runs, best config %d\n",
              r.grid.configs.size(), r.plan.runs.size(), r.grid.best_index);
  print_aggregate(r);
  std::printf("aggregate written to %s/aggregate.csv\n", m.out_dir.c_str());
  return 0;
}

int cmd_grid(Manifest m) {
  m.use_grid = true;
  if (m.grid.lambda_global.empty() && m.grid.lambda_local.empty() &&
      m.grid.k.empty() && m.grid.learning_rate.empty()) {
    m.grid = m.dataset.kind == "csv" ? real_world_default_grid()
                                     : synthetic_default_grid();
  }
  return cmd_cv(m);
}

int cmd_explain(const std::string& model_path, const std::string& base_path,
                const std::string& query_path, const std::string& out) {
  json extra;
  const GatingParams params = load_checkpoint(model_path, &extra);
  TrainConfig cfg;
  if (extra.contains("config")) cfg = train_config_from_json(extra.at("config"));
  Normalizer nz;
  if (extra.contains("normalizer")) {
    nz = normalizer_from_json(extra.at("normalizer"));
  } else {
    nz.mean = Vec::Zero(params.input_dim);
    nz.std = Vec::Ones(params.input_dim);
    nz.constant.assign(static_cast<size_t>(params.input_dim), 0);
  }
  std::vector<std::string> label_names;
  const PrototypeBase base = load_base(base_path, &label_names);
  std::vector<std::string> feature_names;
  if (extra.contains("feature_names")) {
    feature_names =
        extra.at("feature_names").get<std::vector<std::string>>();
  }
  const Mat queries = load_features_csv(query_path);
  const json ex = explain_queries(params, nz, base, queries, cfg, label_names,
                                  feature_names);
  const std::string path = out.empty() ? "explanations.json" : out;
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("cannot write " + path);
  file << ex.dump(2) << "\n";
  std::printf("explained %d queries -> %s\n",
              static_cast<int>(queries.rows()), path.c_str());
  return 0;
}

int cmd_verify() {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<VerifyCheck> checks = run_verification();
  bool all = true;
  for (const VerifyCheck& c : checks) {
    std::printf("%-20s %s  %s\n", c.name.c_str(), c.pass ? "PASS" : "FAIL",
                c.detail.c_str());
    all = all && c.pass;
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  std::printf("%zu checks in %.1fs: %s\n", checks.size(), secs,
              all ? "all passed" : "FAILURES PRESENT");
  return all ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prototype-gated local feature selection for tabular"
               " classification"};
  app.require_subcommand(1);

  CLI::App* gen = app.add_subcommand(
      "gen-synth", "generate a synthetic benchmark CSV plus its"
                   " ground-truth sidecar (150/50 class quotas, 100 features)");
  std::string gen_kind = "Syn1";
  uint64_t gen_seed = 0;
  std::string gen_out;
  gen->add_option("--kind", gen_kind, "Syn1, Syn2, or Syn3 (default Syn1)");
  gen->add_option("--seed", gen_seed, "generator seed (default 0)");
  gen->add_option("--out", gen_out, "output CSV path")->required();

  CLI::App* train_cmd = app.add_subcommand(
      "train", "train once on the first fold split and write model, base,"
               " history, metrics, and explanations");
  CommonFlags train_flags;
  add_common(train_cmd, train_flags, false);

  CLI::App* cv = app.add_subcommand(
      "cv", "repeated stratified cross-validation with aggregate reporting");
  CommonFlags cv_flags;
  add_common(cv, cv_flags, true);

  CLI::App* grid = app.add_subcommand(
      "grid", "cross-validated hyperparameter grid search (default grid"
              " chosen by dataset kind when the manifest leaves it empty)");
  CommonFlags grid_flags;
  add_common(grid, grid_flags, true);

  CLI::App* explain = app.add_subcommand(
      "explain", "nearest-prototype explanations for query rows");
  std::string ex_model, ex_base, ex_queries, ex_out;
  explain->add_option("model", ex_model, "model JSON checkpoint")->required();
  explain->add_option("base", ex_base, "prototype base JSON")->required();
  explain->add_option("queries", ex_queries, "query CSV (features only)")
      ->required();
  explain->add_option("--out", ex_out,
                      "output path (default explanations.json)");

  CLI::App* verify = app.add_subcommand(
      "verify", "run the bundled numerical self-checks (gradients, sort"
                " limit, l0 surrogate, loss-count identity, ranking parity,"
                " KNN equivalence)");

  try {
    app.parse(argc, argv);
    if (gen->parsed()) return cmd_gen_synth(gen_kind, gen_seed, gen_out);
    if (train_cmd->parsed()) return cmd_train(resolve_manifest(train_flags));
    if (cv->parsed()) return cmd_cv(resolve_manifest(cv_flags));
    if (grid->parsed()) return cmd_grid(resolve_manifest(grid_flags));
    if (explain->parsed())
      return cmd_explain(ex_model, ex_base, ex_queries, ex_out);
    if (verify->parsed()) return cmd_verify();
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 1;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  }
}
