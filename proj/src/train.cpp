#include "protogate/train.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <thread>

#include "protogate/errors.hpp"
#include "protogate/rng.hpp"

namespace protogate {

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

GatingParams extract_grads(const BatchLossGraph& g) {
  GatingParams out;
  const Tape& t = g.tape;
  out.input_dim = static_cast<int>(t.value(g.sel.w1).cols());
  out.hidden = static_cast<int>(t.value(g.sel.w1).rows());
  out.w1 = t.grad(g.sel.w1);
  out.w2 = t.grad(g.sel.w2);
  out.w3 = t.grad(g.sel.w3);
  out.b1 = t.grad(g.sel.b1).row(0).transpose();
  out.b2 = t.grad(g.sel.b2).row(0).transpose();
  out.b3 = t.grad(g.sel.b3).row(0).transpose();
  return out;
}

}  // namespace

void validate_train_config(const TrainConfig& c) {
  auto fail = [](const std::string& msg) { throw UsageError("config: " + msg); };
  if (c.lambda_global < 0.0) fail("lambda_global must be >= 0");
  if (c.lambda_local < 0.0) fail("lambda_local must be >= 0");
  if (c.weight_decay < 0.0) fail("weight_decay must be >= 0");
  if (c.learning_rate <= 0.0) fail("learning_rate must be > 0");
  if (c.batch_size < 2) fail("batch_size must be >= 2");
  if (c.k < 1) fail("k must be >= 1");
  if (c.k >= c.batch_size) fail("k must be < batch_size");
  if (c.max_iterations < 1) fail("max_iterations must be >= 1");
  if (c.patience < 1) fail("patience must be >= 1");
  if (c.eval_every < 1) fail("eval_every must be >= 1");
  if (c.sigma < 0.0) fail("sigma must be >= 0");
  if (c.tau <= 0.0) fail("tau must be > 0");
  if (c.delta <= 0.0) fail("delta must be > 0");
  if (c.eps_zero < 0.0) fail("eps_zero must be >= 0");
  if (c.hidden < 1) fail("hidden must be >= 1");
}

nlohmann::json train_config_json(const TrainConfig& c) {
  return nlohmann::json{{"lambda_global", c.lambda_global},
                        {"lambda_local", c.lambda_local},
                        {"k", c.k},
                        {"learning_rate", c.learning_rate},
                        {"weight_decay", c.weight_decay},
                        {"batch_size", c.batch_size},
                        {"max_iterations", c.max_iterations},
                        {"patience", c.patience},
                        {"eval_every", c.eval_every},
                        {"sigma", c.sigma},
                        {"tau", c.tau},
                        {"delta", c.delta},
                        {"eps_zero", c.eps_zero},
                        {"hidden", c.hidden},
                        {"seed", c.seed},
                        {"penalize_bias", c.penalize_bias},
                        {"val_loss_pred_only", c.val_loss_pred_only},
                        {"loss_scale_by_k", c.loss_scale_by_k}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& key = it.key();
    const nlohmann::json& v = it.value();
    if (key == "lambda_global") {
      c.lambda_global = v.get<double>();
    } else if (key == "lambda_local") {
      c.lambda_local = v.get<double>();
    } else if (key == "k") {
      c.k = v.get<int>();
    } else if (key == "learning_rate") {
      c.learning_rate = v.get<double>();
    } else if (key == "weight_decay") {
      c.weight_decay = v.get<double>();
    } else if (key == "batch_size") {
      c.batch_size = v.get<int>();
    } else if (key == "max_iterations") {
      c.max_iterations = v.get<int>();
    } else if (key == "patience") {
      c.patience = v.get<int>();
    } else if (key == "eval_every") {
      c.eval_every = v.get<int>();
    } else if (key == "sigma") {
      c.sigma = v.get<double>();
    } else if (key == "tau") {
      c.tau = v.get<double>();
    } else if (key == "delta") {
      c.delta = v.get<double>();
    } else if (key == "eps_zero") {
      c.eps_zero = v.get<double>();
    } else if (key == "hidden") {
      c.hidden = v.get<int>();
    } else if (key == "seed") {
      c.seed = v.get<uint64_t>();
    } else if (key == "penalize_bias") {
      c.penalize_bias = v.get<bool>();
    } else if (key == "val_loss_pred_only") {
      c.val_loss_pred_only = v.get<bool>();
    } else if (key == "loss_scale_by_k") {
      c.loss_scale_by_k = v.get<bool>();
    } else {
      throw UsageError("unknown config key: " + key);
    }
  }
  return c;
}

void write_history_csv(const std::string& path,
                       const std::vector<HistoryRow>& rows) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write history csv: " + path);
  out << "iter,train_loss,val_loss,mean_l0,l1_norm\n";
  for (const HistoryRow& r : rows)
    out << r.iter << ',' << fmt_double(r.train_loss) << ','
        << fmt_double(r.val_loss) << ',' << fmt_double(r.mean_l0) << ','
        << fmt_double(r.l1_norm) << '\n';
  if (!out.good()) throw DataError("write failed for history csv: " + path);
}

void build_batch_loss(BatchLossGraph& g, int batch, int input_dim,
                      const TrainConfig& cfg) {
  if (batch < cfg.k + 1)
    throw UsageError("batch of " + std::to_string(batch) +
                     " cannot rank k=" + std::to_string(cfg.k) +
                     " neighbors after self-exclusion");
  Tape& t = g.tape;
  g.batch = batch;
  g.sel = build_selector_graph(t, batch, input_dim, cfg.hidden);
  g.eps = t.input(batch, input_dim, "eps");
  g.x_raw = t.input(batch, input_dim, "x_raw");
  g.s_local = t.hard_clamp(t.add(g.sel.mu, g.eps));
  const NodeId xm = t.mul(g.x_raw, g.s_local);

  // Pairwise squared distances by the Gram identity; |.| guards the tiny
  // negatives rounding can produce.
  const NodeId gram = t.matmul(xm, xm, false, true);
  const NodeId rsq = t.sum(t.square(xm), SumAxis::kRows);
  std::vector<int> row_idx(static_cast<size_t>(batch) * batch);
  std::vector<int> col_idx(row_idx.size());
  for (int i = 0; i < batch; ++i)
    for (int j = 0; j < batch; ++j) {
      row_idx[static_cast<size_t>(i) * batch + j] = i;
      col_idx[static_cast<size_t>(i) * batch + j] = j;
    }
  const NodeId ri = t.gather(rsq, row_idx, batch, batch);
  const NodeId rj = t.gather(rsq, col_idx, batch, batch);
  const NodeId d2_full = t.add(t.add(ri, rj), t.scale(gram, -2.0));

  // Row q keeps the batch - 1 other samples as its prototype list. The
  // diagonal (self-distance, rounding noise around zero) is dropped before
  // the |.| guard so its sign kink never enters the graph.
  const int m = batch - 1;
  std::vector<int> excl(static_cast<size_t>(batch) * m);
  for (int q = 0; q < batch; ++q)
    for (int i = 0; i < m; ++i)
      excl[static_cast<size_t>(q) * m + i] = q * batch + (i < q ? i : i + 1);
  const NodeId d2 = t.gather(d2_full, excl, batch, m);
  const NodeId dist = t.sqrt(t.sqrt(t.square(d2)));

  const NodeId delta_mat = t.input(batch, m, "delta");
  t.value_mut(delta_mat).setConstant(cfg.delta);
  const NodeId v = t.reciprocal(t.add(dist, delta_mat));

  // a1[q, i] = sum_j |v[q, i] - v[q, j]| via two replication gathers.
  std::vector<int> rep_p(static_cast<size_t>(batch) * m * m);
  std::vector<int> rep_r(rep_p.size());
  for (int q = 0; q < batch; ++q)
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < m; ++j) {
        const size_t r = (static_cast<size_t>(q) * m + i) * m + j;
        rep_p[r] = q * m + i;
        rep_r[r] = q * m + j;
      }
  const NodeId vp = t.gather(v, rep_p, batch * m, m);
  const NodeId vr = t.gather(v, rep_r, batch * m, m);
  const NodeId absdiff = t.sqrt(t.square(t.add(vp, t.negate(vr))));
  const NodeId a1 = t.reshape(t.sum(absdiff, SumAxis::kRows), batch, m);

  g.match = t.input(batch, m, "match");
  NodeId total = -1;
  for (int n = 1; n <= cfg.k; ++n) {
    const double coef = static_cast<double>(m + 1 - 2 * n);
    const NodeId scores =
        t.scale(t.add(t.scale(v, coef), t.negate(a1)), 1.0 / cfg.tau);
    const NodeId contrib =
        t.sum(t.mul(t.row_softmax(scores), g.match), SumAxis::kAll);
    total = total < 0 ? contrib : t.add(total, contrib);
  }
  const NodeId k_const = t.input(1, 1, "k_const");
  t.value_mut(k_const)(0, 0) = static_cast<double>(cfg.k);
  g.loss_pred = t.add(k_const, t.scale(total, -1.0 / batch));
  if (cfg.loss_scale_by_k)
    g.loss_pred = t.scale(g.loss_pred, 1.0 / cfg.k);

  const NodeId tail = t.gaussian_tail(t.scale(g.sel.mu, -1.0 / cfg.sigma));
  g.r_local = t.scale(t.sum(tail, SumAxis::kAll), cfg.lambda_local / batch);
  g.root = t.add(g.loss_pred, g.r_local);
  t.set_root(g.root);
}

void set_batch_loss_inputs(BatchLossGraph& g, const GatingParams& p,
                           const Mat& xb, const IVec& yb, const Mat& eps,
                           double eps_zero) {
  const Vec gmask = global_mask(p, eps_zero);
  set_selector_inputs(g.tape, g.sel, p, xb * gmask.asDiagonal());
  g.tape.set_value(g.x_raw, xb);
  g.tape.set_value(g.eps, eps);
  const int b = g.batch;
  Mat match(b, b - 1);
  for (int q = 0; q < b; ++q)
    for (int i = 0; i < b - 1; ++i) {
      const int j = i < q ? i : i + 1;
      match(q, i) = yb(j) == yb(q) ? 1.0 : 0.0;
    }
  g.tape.set_value(g.match, match);
}

double validation_loss(const GatingParams& p, const Mat& x_train,
                       const IVec& y_train, const Mat& x_val,
                       const IVec& y_val, const TrainConfig& cfg) {
  if (x_val.rows() == 0) throw UsageError("validation set is empty");
  const Vec gmask = global_mask(p, cfg.eps_zero);
  const Mat s_train = local_mask_infer_batch(forward_mu_batch(p, x_train, gmask));
  std::vector<int> source(static_cast<size_t>(x_train.rows()));
  std::iota(source.begin(), source.end(), 0);
  const PrototypeBase base =
      build_base(x_train.cwiseProduct(s_train), y_train, source);
  const Mat mu_val = forward_mu_batch(p, x_val, gmask);
  const Mat s_val = local_mask_infer_batch(mu_val);
  double loss = 0.0;
  for (Eigen::Index q = 0; q < x_val.rows(); ++q) {
    const Vec masked = x_val.row(q).cwiseProduct(s_val.row(q)).transpose();
    loss += prediction_loss(masked, y_val(q), base, cfg.k, cfg.tau, cfg.delta,
                            -1, cfg.loss_scale_by_k);
  }
  loss /= static_cast<double>(x_val.rows());
  if (!cfg.val_loss_pred_only)
    loss += sparsity_regulariser(p, mu_val, cfg.lambda_global,
                                 cfg.lambda_local, cfg.sigma,
                                 cfg.penalize_bias)
                .total();
  return loss;
}

void sgd_step(GatingParams& p, const GatingParams& g, double learning_rate,
              double weight_decay, double lambda_global, bool penalize_bias) {
  auto step = [&](Mat& w, const Mat& grad) {
    w -= learning_rate * (grad + weight_decay * w);
  };
  auto step_vec = [&](Vec& w, const Vec& grad) {
    w -= learning_rate * (grad + weight_decay * w);
  };
  step(p.w1, g.w1);
  step(p.w2, g.w2);
  step(p.w3, g.w3);
  step_vec(p.b1, g.b1);
  step_vec(p.b2, g.b2);
  step_vec(p.b3, g.b3);
  prox_l1(p, lambda_global, learning_rate, penalize_bias);
}

Mat inference_masks(const GatingParams& p, const Mat& x, double eps_zero) {
  const Vec gmask = global_mask(p, eps_zero);
  return local_mask_infer_batch(forward_mu_batch(p, x, gmask));
}

PrototypeBase build_inference_base(const GatingParams& p, const Mat& x,
                                   const IVec& y, double eps_zero) {
  const Mat s = inference_masks(p, x, eps_zero);
  std::vector<int> source(static_cast<size_t>(x.rows()));
  std::iota(source.begin(), source.end(), 0);
  return build_base(x.cwiseProduct(s), y, source);
}

IVec predict_batch(const GatingParams& p, const PrototypeBase& base,
                   const Mat& x, int k, double tau, double delta,
                   double eps_zero) {
  const Mat s = inference_masks(p, x, eps_zero);
  IVec out(x.rows());
  for (Eigen::Index q = 0; q < x.rows(); ++q) {
    const Vec masked = x.row(q).cwiseProduct(s.row(q)).transpose();
    out(q) = predict(masked, base, k, SortMode::kHard, tau, delta).label;
  }
  return out;
}

TrainResult train(const Mat& x_train, const IVec& y_train, const Mat& x_val,
                  const IVec& y_val, const TrainConfig& cfg) {
  validate_train_config(cfg);
  const int n = static_cast<int>(x_train.rows());
  const int d = static_cast<int>(x_train.cols());
  if (n < cfg.k + 1)
    throw UsageError("training set of " + std::to_string(n) +
                     " cannot serve k=" + std::to_string(cfg.k) +
                     " neighbors");
  if (y_train.size() != n || y_val.size() != x_val.rows())
    throw UsageError("label count does not match sample count");
  if (x_val.rows() == 0) throw UsageError("validation set is empty");
  if (x_val.cols() != d)
    throw UsageError("train and validation feature widths differ");

  GatingParams params = init_gating(d, cfg.hidden, cfg.seed);
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  Rng noise_rng(derive_seed(cfg.seed, "noise"));

  std::vector<int> order(static_cast<size_t>(n));
  std::vector<std::pair<int, int>> batches;  // (offset, length) into order
  auto reshuffle = [&] {
    std::iota(order.begin(), order.end(), 0);
    shuffle_rng.shuffle(order);
    batches.clear();
    int pos = 0;
    while (pos < n) {
      const int len = std::min(cfg.batch_size, n - pos);
      batches.emplace_back(pos, len);
      pos += len;
    }
    if (batches.size() > 1 && batches.back().second < cfg.k + 1) {
      batches[batches.size() - 2].second += batches.back().second;
      batches.pop_back();
    }
  };

  std::map<int, BatchLossGraph> graphs;
  TrainResult result;
  result.history.reserve(static_cast<size_t>(cfg.max_iterations));
  double best_val = std::numeric_limits<double>::infinity();
  GatingParams best = params;
  int best_iter = 0;
  int evals_since_improve = 0;
  double last_val = std::numeric_limits<double>::quiet_NaN();
  size_t cursor = 0;
  bool have_batches = false;

  Mat xb, eps;
  IVec yb;
  int iterations = 0;
  for (int t = 1; t <= cfg.max_iterations; ++t) {
    if (!have_batches || cursor >= batches.size()) {
      reshuffle();
      cursor = 0;
      have_batches = true;
    }
    const auto [offset, len] = batches[cursor];
    xb.resize(len, d);
    yb.resize(len);
    for (int i = 0; i < len; ++i) {
      xb.row(i) = x_train.row(order[static_cast<size_t>(offset + i)]);
      yb(i) = y_train(order[static_cast<size_t>(offset + i)]);
    }
    eps.resize(len, d);
    for (int i = 0; i < len; ++i)
      for (int j = 0; j < d; ++j)
        eps(i, j) = cfg.sigma * noise_rng.next_gaussian();

    BatchLossGraph& g = graphs[len];
    if (g.batch == 0) build_batch_loss(g, len, d, cfg);
    set_batch_loss_inputs(g, params, xb, yb, eps, cfg.eps_zero);

    const double root_val = g.tape.forward();
    const double l1 = params.w1.cwiseAbs().sum();
    if (!std::isfinite(root_val)) {
      std::ostringstream msg;
      msg << "training diverged at iteration " << t << ", batch " << cursor
          << ": neighbor_loss=" << g.tape.value(g.loss_pred)(0, 0)
          << " local_term=" << g.tape.value(g.r_local)(0, 0)
          << " l1_term=" << cfg.lambda_global * l1;
      throw NumericalError(msg.str());
    }
    const double mean_l0 =
        static_cast<double>((g.tape.value(g.s_local).array() > 0.0).count()) /
        static_cast<double>(len);

    g.tape.backward();
    sgd_step(params, extract_grads(g), cfg.learning_rate, cfg.weight_decay,
             cfg.lambda_global, cfg.penalize_bias);

    if ((t - 1) % cfg.eval_every == 0) {
      const double vl =
          validation_loss(params, x_train, y_train, x_val, y_val, cfg);
      if (!std::isfinite(vl))
        throw NumericalError("validation loss not finite at iteration " +
                             std::to_string(t));
      last_val = vl;
      if (vl < best_val) {
        best_val = vl;
        best = params;
        best_iter = t;
        evals_since_improve = 0;
      } else {
        evals_since_improve += 1;
      }
    }
    result.history.push_back(
        {t, root_val + cfg.lambda_global * l1, last_val, mean_l0, l1});
    iterations = t;
    ++cursor;
    if (evals_since_improve >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }

  result.params = best;
  result.base = build_inference_base(best, x_train, y_train, cfg.eps_zero);
  result.best_val_loss = best_val;
  result.best_iteration = best_iter;
  result.iterations_run = iterations;
  return result;
}

GridSpec synthetic_default_grid() {
  GridSpec g;
  g.lambda_global = {1e-2, 1.5e-2, 2e-2};
  g.lambda_local = {0.0, 1e-4, 3e-4};
  g.k = {3};
  g.learning_rate = {0.1};
  return g;
}

GridSpec real_world_default_grid() {
  GridSpec g;
  g.lambda_global = {1e-4, 2e-4, 3e-4, 4e-4, 6e-4};
  g.lambda_local = {1e-3};
  g.k = {1, 2, 3, 4, 5};
  g.learning_rate = {5e-2, 7.5e-2, 1e-1};
  return g;
}

std::vector<TrainConfig> expand_grid(const GridSpec& g,
                                     const TrainConfig& base) {
  if (g.lambda_global.empty() || g.lambda_local.empty() || g.k.empty() ||
      g.learning_rate.empty())
    throw UsageError("grid has an empty dimension");
  std::vector<TrainConfig> out;
  out.reserve(g.lambda_global.size() * g.lambda_local.size() * g.k.size() *
              g.learning_rate.size());
  for (double lg : g.lambda_global)
    for (double ll : g.lambda_local)
      for (int k : g.k)
        for (double lr : g.learning_rate) {
          TrainConfig c = base;
          c.lambda_global = lg;
          c.lambda_local = ll;
          c.k = k;
          c.learning_rate = lr;
          out.push_back(c);
        }
  return out;
}

RunOutcome execute_run(const Dataset& ds, const SplitRun& split,
                       const TrainConfig& cfg, int config_index) {
  RunOutcome out;
  out.config_index = config_index;
  out.repeat = split.repeat;
  out.fold = split.fold;

  const Normalizer nz = fit_normalizer(ds.x, split.train);
  const Mat x_tr = apply_normalizer(nz, subset_rows(ds.x, split.train));
  const Mat x_va = apply_normalizer(nz, subset_rows(ds.x, split.val));
  const Mat x_te = apply_normalizer(nz, subset_rows(ds.x, split.test));
  const IVec y_tr = subset_labels(ds.y, split.train);
  const IVec y_va = subset_labels(ds.y, split.val);
  const IVec y_te = subset_labels(ds.y, split.test);

  TrainConfig run_cfg = cfg;
  run_cfg.seed = derive_seed(
      cfg.seed, "train-run",
      {static_cast<uint64_t>(config_index), static_cast<uint64_t>(split.repeat),
       static_cast<uint64_t>(split.fold)});
  const TrainResult r = train(x_tr, y_tr, x_va, y_va, run_cfg);

  const IVec val_pred = predict_batch(r.params, r.base, x_va, run_cfg.k,
                                      run_cfg.tau, run_cfg.delta,
                                      run_cfg.eps_zero);
  out.val_balanced_accuracy = balanced_accuracy(y_va, val_pred, ds.classes);

  const IVec te_pred = predict_batch(r.params, r.base, x_te, run_cfg.k,
                                     run_cfg.tau, run_cfg.delta,
                                     run_cfg.eps_zero);
  const Mat te_masks = inference_masks(r.params, x_te, run_cfg.eps_zero);
  const Vec gmask = global_mask(r.params, run_cfg.eps_zero);
  std::vector<std::vector<int>> truth;
  const std::vector<std::vector<int>>* truth_ptr = nullptr;
  if (!ds.truth.empty()) {
    truth.reserve(split.test.size());
    for (int idx : split.test)
      truth.push_back(ds.truth[static_cast<size_t>(idx)]);
    truth_ptr = &truth;
  }
  out.test =
      compute_run_metrics(y_te, te_pred, ds.classes, gmask, te_masks, truth_ptr);
  out.best_val_loss = r.best_val_loss;
  out.best_iteration = r.best_iteration;
  out.iterations_run = r.iterations_run;
  out.global_selected = static_cast<int>((gmask.array() > 0.0).count());
  return out;
}

GridResult grid_search(const Dataset& ds, const SplitPlan& plan,
                       const std::vector<TrainConfig>& configs, int jobs) {
  if (configs.empty()) throw UsageError("grid_search: no configurations");
  if (plan.runs.empty()) throw UsageError("grid_search: no split runs");
  GridResult result;
  result.configs = configs;
  result.outcomes.assign(configs.size(),
                         std::vector<RunOutcome>(plan.runs.size()));

  const size_t total = configs.size() * plan.runs.size();
  const int workers =
      std::max(1, std::min<int>(jobs, static_cast<int>(total)));
  std::atomic<size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto work = [&] {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= total) return;
      const size_t ci = i / plan.runs.size();
      const size_t ri = i % plan.runs.size();
      try {
        result.outcomes[ci][ri] =
            execute_run(ds, plan.runs[ri], configs[ci], static_cast<int>(ci));
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(total);  // drain remaining work
        return;
      }
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) pool.emplace_back(work);
    for (std::thread& th : pool) th.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  result.mean_val_accuracy.resize(configs.size());
  for (size_t ci = 0; ci < configs.size(); ++ci) {
    double sum = 0.0;
    for (const RunOutcome& o : result.outcomes[ci])
      sum += o.val_balanced_accuracy;
    result.mean_val_accuracy[ci] = sum / static_cast<double>(plan.runs.size());
  }
  result.best_index = static_cast<int>(
      std::max_element(result.mean_val_accuracy.begin(),
                       result.mean_val_accuracy.end()) -
      result.mean_val_accuracy.begin());
  return result;
}

}  // namespace protogate
