#pragma once

#include <nlohmann/json_fwd.hpp>
#include <string>

#include "protogate/tape.hpp"

namespace protogate {

// Three-layer gating network producing per-sample mask means mu. Hidden
// activations are tanh, the output layer is linear; mu is clamped to [0,1]
// (with additive Gaussian noise during training) to give the local mask.
struct GatingParams {
  int input_dim = 0;
  int hidden = 0;
  Mat w1;  // hidden x input_dim
  Mat w2;  // hidden x hidden
  Mat w3;  // input_dim x hidden
  Vec b1;  // hidden
  Vec b2;  // hidden
  Vec b3;  // input_dim
};

// Weights ~ N(0, 0.1^2), biases zero. Fill order (w1, w2, w3 row-major) is
// part of the reproducibility contract.
GatingParams init_gating(int input_dim, int hidden, uint64_t seed);

// s_global[d] = 0 iff every first-layer weight into feature d has
// |w| <= eps_zero, else 1. Exact zeros come from the proximal step.
Vec global_mask(const GatingParams& p, double eps_zero = 1e-12);

// mu = W3 tanh(W2 tanh(W1 (x .* s_global) + b1) + b2) + b3.
Vec forward_mu(const GatingParams& p, const Vec& x, const Vec& s_global);
Mat forward_mu_batch(const GatingParams& p, const Mat& x,
                     const Vec& s_global);

// Training mask: clamp(mu + eps, 0, 1) with eps ~ N(0, sigma^2 I) supplied
// by the caller. Inference mask: clamp(mu, 0, 1), no noise.
Vec local_mask_train(const Vec& mu, const Vec& eps);
Vec local_mask_infer(const Vec& mu);
Mat local_mask_infer_batch(const Mat& mu);

struct RegulariserValue {
  double l1_term = 0.0;     // lambda_global * ||W1||_1
  double local_term = 0.0;  // lambda_local * mean_i sum_d Q(-mu_id / sigma)
  double total() const { return l1_term + local_term; }
};

// Reporting-side value of the selection regulariser. The l1 term never
// enters the training tape; the proximal step owns it.
RegulariserValue sparsity_regulariser(const GatingParams& p,
                                      const Mat& mu_batch,
                                      double lambda_global,
                                      double lambda_local, double sigma,
                                      bool penalize_bias = false);

// Soft-threshold of W1 by lr * lambda_global (and b1 when penalize_bias).
void prox_l1(GatingParams& p, double lambda_global, double lr,
             bool penalize_bias = false);

// Local-mask fate of one feature given both selection stages.
enum class FeatureFate : uint8_t {
  kBothSelected,     // global 1, local > 0
  kLocallyDropped,   // global 1, local = 0
  kLocallyRecovered,  // global 0, local > 0
  kBothDropped,      // global 0, local = 0
};
FeatureFate classify_feature(bool global_on, bool local_on);
const char* feature_fate_name(FeatureFate f);

// Checkpoint JSON, magic-tagged. `extra` is carried verbatim (train config
// echo, normalizer); absent keys load as defaults.
inline constexpr const char* kCheckpointMagic = "PROTOGATE-CKPT-v1";
nlohmann::json checkpoint_json(const GatingParams& p,
                               const nlohmann::json& extra);
GatingParams checkpoint_params(const nlohmann::json& j,
                               nlohmann::json* extra = nullptr);
void save_checkpoint(const std::string& path, const GatingParams& p,
                     const nlohmann::json& extra);
GatingParams load_checkpoint(const std::string& path,
                             nlohmann::json* extra = nullptr);

// Tape fragment: selector forward for a batch. Returns the mu node; the
// parameter node ids are written to the out-params. `x_masked` must already
// carry x .* s_global.
struct SelectorNodes {
  NodeId w1 = -1, b1 = -1, w2 = -1, b2 = -1, w3 = -1, b3 = -1;
  NodeId x_masked = -1;
  NodeId mu = -1;
};
SelectorNodes build_selector_graph(Tape& tape, int batch, int input_dim,
                                   int hidden);
void set_selector_inputs(Tape& tape, const SelectorNodes& nodes,
                         const GatingParams& p, const Mat& x_masked);

}  // namespace protogate
