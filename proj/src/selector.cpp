#include "protogate/selector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "protogate/errors.hpp"
#include "protogate/rng.hpp"

namespace protogate {
namespace {

constexpr double kInitStd = 0.1;
constexpr double kInvSqrt2 = 0.70710678118654752440;

double gauss_tail(double x) { return 0.5 * std::erfc(x * kInvSqrt2); }

void fill_gauss(Mat& m, Rng& rng, double sd) {
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = sd * rng.next_gaussian();
}

std::vector<double> to_flat(const Mat& m) {
  return {m.data(), m.data() + m.size()};
}

std::vector<double> to_flat(const Vec& v) {
  return {v.data(), v.data() + v.size()};
}

Mat mat_from(const nlohmann::json& j, int rows, int cols, const char* key) {
  const auto flat = j.at(key).get<std::vector<double>>();
  if (static_cast<long>(flat.size()) != static_cast<long>(rows) * cols)
    throw DataError(std::string("checkpoint field '") + key +
                    "' has wrong length");
  Mat m(rows, cols);
  std::copy(flat.begin(), flat.end(), m.data());
  return m;
}

Vec vec_from(const nlohmann::json& j, int n, const char* key) {
  const auto flat = j.at(key).get<std::vector<double>>();
  if (static_cast<long>(flat.size()) != n)
    throw DataError(std::string("checkpoint field '") + key +
                    "' has wrong length");
  return Eigen::Map<const Vec>(flat.data(), n);
}

}  // namespace

GatingParams init_gating(int input_dim, int hidden, uint64_t seed) {
  if (input_dim <= 0 || hidden <= 0)
    throw UsageError("gating network needs positive input_dim and hidden");
  GatingParams p;
  p.input_dim = input_dim;
  p.hidden = hidden;
  p.w1.resize(hidden, input_dim);
  p.w2.resize(hidden, hidden);
  p.w3.resize(input_dim, hidden);
  Rng rng(derive_seed(seed, "gating-init"));
  fill_gauss(p.w1, rng, kInitStd);
  fill_gauss(p.w2, rng, kInitStd);
  fill_gauss(p.w3, rng, kInitStd);
  p.b1 = Vec::Zero(hidden);
  p.b2 = Vec::Zero(hidden);
  p.b3 = Vec::Zero(input_dim);
  return p;
}

Vec global_mask(const GatingParams& p, double eps_zero) {
  Vec s(p.input_dim);
  for (int d = 0; d < p.input_dim; ++d)
    s(d) = p.w1.col(d).cwiseAbs().maxCoeff() <= eps_zero ? 0.0 : 1.0;
  return s;
}

Mat forward_mu_batch(const GatingParams& p, const Mat& x,
                     const Vec& s_global) {
  if (x.cols() != p.input_dim)
    throw UsageError("forward_mu: input width " + std::to_string(x.cols()) +
                     " does not match gating input_dim " +
                     std::to_string(p.input_dim));
  Mat xg = x * s_global.asDiagonal();
  Mat z1 = (xg * p.w1.transpose()).rowwise() + p.b1.transpose();
  z1.array() = z1.array().tanh();
  Mat z2 = (z1 * p.w2.transpose()).rowwise() + p.b2.transpose();
  z2.array() = z2.array().tanh();
  Mat mu = (z2 * p.w3.transpose()).rowwise() + p.b3.transpose();
  return mu;
}

Vec forward_mu(const GatingParams& p, const Vec& x, const Vec& s_global) {
  Mat row = x.transpose();
  return forward_mu_batch(p, row, s_global).row(0).transpose();
}

Vec local_mask_train(const Vec& mu, const Vec& eps) {
  if (mu.size() != eps.size())
    throw UsageError("local_mask_train: mu and eps sizes differ");
  return (mu + eps).cwiseMax(0.0).cwiseMin(1.0);
}

Vec local_mask_infer(const Vec& mu) {
  return mu.cwiseMax(0.0).cwiseMin(1.0);
}

Mat local_mask_infer_batch(const Mat& mu) {
  return mu.cwiseMax(0.0).cwiseMin(1.0);
}

RegulariserValue sparsity_regulariser(const GatingParams& p,
                                      const Mat& mu_batch,
                                      double lambda_global,
                                      double lambda_local, double sigma,
                                      bool penalize_bias) {
  if (sigma <= 0.0) throw UsageError("sparsity_regulariser: sigma <= 0");
  RegulariserValue r;
  double l1 = p.w1.cwiseAbs().sum();
  if (penalize_bias) l1 += p.b1.cwiseAbs().sum();
  r.l1_term = lambda_global * l1;
  if (mu_batch.rows() > 0 && lambda_local != 0.0) {
    const double q_sum =
        mu_batch.unaryExpr([sigma](double m) { return gauss_tail(-m / sigma); })
            .sum();
    r.local_term = lambda_local * q_sum / static_cast<double>(mu_batch.rows());
  }
  return r;
}

void prox_l1(GatingParams& p, double lambda_global, double lr,
             bool penalize_bias) {
  const double thr = lambda_global * lr;
  if (thr < 0.0) throw UsageError("prox_l1: negative threshold");
  if (thr == 0.0) return;
  auto soft = [thr](double w) {
    const double a = std::abs(w) - thr;
    return a <= 0.0 ? 0.0 : (w > 0.0 ? a : -a);
  };
  p.w1 = p.w1.unaryExpr(soft);
  if (penalize_bias) p.b1 = p.b1.unaryExpr(soft);
}

FeatureFate classify_feature(bool global_on, bool local_on) {
  if (global_on) {
    return local_on ? FeatureFate::kBothSelected : FeatureFate::kLocallyDropped;
  }
  return local_on ? FeatureFate::kLocallyRecovered : FeatureFate::kBothDropped;
}

const char* feature_fate_name(FeatureFate f) {
  switch (f) {
    case FeatureFate::kBothSelected:
      return "both_selected";
    case FeatureFate::kLocallyDropped:
      return "locally_dropped";
    case FeatureFate::kLocallyRecovered:
      return "locally_recovered";
    case FeatureFate::kBothDropped:
      return "both_dropped";
  }
  return "unknown";
}

nlohmann::json checkpoint_json(const GatingParams& p,
                               const nlohmann::json& extra) {
  nlohmann::json j;
  j["magic"] = kCheckpointMagic;
  j["input_dim"] = p.input_dim;
  j["hidden"] = p.hidden;
  j["w1"] = to_flat(p.w1);
  j["w2"] = to_flat(p.w2);
  j["w3"] = to_flat(p.w3);
  j["b1"] = to_flat(p.b1);
  j["b2"] = to_flat(p.b2);
  j["b3"] = to_flat(p.b3);
  if (!extra.is_null()) j["extra"] = extra;
  return j;
}

GatingParams checkpoint_params(const nlohmann::json& j,
                               nlohmann::json* extra) {
  if (!j.contains("magic") || j.at("magic") != kCheckpointMagic)
    throw DataError("not a gating checkpoint (bad or missing magic)");
  GatingParams p;
  p.input_dim = j.at("input_dim").get<int>();
  p.hidden = j.at("hidden").get<int>();
  if (p.input_dim <= 0 || p.hidden <= 0)
    throw DataError("checkpoint has non-positive dimensions");
  p.w1 = mat_from(j, p.hidden, p.input_dim, "w1");
  p.w2 = mat_from(j, p.hidden, p.hidden, "w2");
  p.w3 = mat_from(j, p.input_dim, p.hidden, "w3");
  p.b1 = vec_from(j, p.hidden, "b1");
  p.b2 = vec_from(j, p.hidden, "b2");
  p.b3 = vec_from(j, p.input_dim, "b3");
  if (extra) *extra = j.contains("extra") ? j.at("extra") : nlohmann::json();
  return p;
}

void save_checkpoint(const std::string& path, const GatingParams& p,
                     const nlohmann::json& extra) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out << checkpoint_json(p, extra).dump(2) << "\n";
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

GatingParams load_checkpoint(const std::string& path, nlohmann::json* extra) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint JSON in " + path + ": " + e.what());
  }
  return checkpoint_params(j, extra);
}

SelectorNodes build_selector_graph(Tape& tape, int batch, int input_dim,
                                   int hidden) {
  SelectorNodes n;
  n.w1 = tape.input(hidden, input_dim, "w1");
  n.b1 = tape.input(1, hidden, "b1");
  n.w2 = tape.input(hidden, hidden, "w2");
  n.b2 = tape.input(1, hidden, "b2");
  n.w3 = tape.input(input_dim, hidden, "w3");
  n.b3 = tape.input(1, input_dim, "b3");
  n.x_masked = tape.input(batch, input_dim, "x_masked");
  const NodeId ones = tape.input(batch, 1, "ones");
  tape.value_mut(ones).setOnes();

  const NodeId z1 = tape.tanh(
      tape.add(tape.matmul(n.x_masked, n.w1, false, true),
               tape.matmul(ones, n.b1)));
  const NodeId z2 = tape.tanh(
      tape.add(tape.matmul(z1, n.w2, false, true), tape.matmul(ones, n.b2)));
  n.mu = tape.add(tape.matmul(z2, n.w3, false, true), tape.matmul(ones, n.b3));
  return n;
}

void set_selector_inputs(Tape& tape, const SelectorNodes& nodes,
                         const GatingParams& p, const Mat& x_masked) {
  tape.set_value(nodes.w1, p.w1);
  tape.set_value(nodes.b1, p.b1.transpose());
  tape.set_value(nodes.w2, p.w2);
  tape.set_value(nodes.b2, p.b2.transpose());
  tape.set_value(nodes.w3, p.w3);
  tape.set_value(nodes.b3, p.b3.transpose());
  tape.set_value(nodes.x_masked, x_masked);
}

}  // namespace protogate
