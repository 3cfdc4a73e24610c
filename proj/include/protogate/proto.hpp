#pragma once

#include <vector>

#include "protogate/tape.hpp"

namespace protogate {

// Non-parametric predictor over masked samples. Prototypes are (x .* s, y)
// pairs; similarity is inverse guarded distance; ranking is either a hard
// top-k sort (inference) or the temperature-relaxed permutation (training).
struct PrototypeBase {
  Mat x;                    // n x d masked samples
  IVec y;                   // labels 0..classes-1
  std::vector<int> source;  // originating dataset row per prototype
  int n() const { return static_cast<int>(x.rows()); }
};

PrototypeBase build_base(const Mat& masked_rows, const IVec& labels,
                         const std::vector<int>& source_rows);

// v[n] = 1 / (||q - x_n|| + delta). delta guards exact duplicates.
Vec similarity(const Vec& masked_query, const PrototypeBase& base,
               double delta);

// Row n of the relaxed permutation: softmax(((N+1-2n) v - A 1) / tau) with
// A[n][m] = |v_n - v_m| and 1-based n. Rows sum to 1.
Mat relaxed_sort(const Vec& v, double tau);

// Only the first k rows of the relaxed permutation; O(kN) after the O(N^2)
// shared |v_n - v_m| row sums.
Mat relaxed_sort_topk(const Vec& v, double tau, int k);

// Indices of the k largest entries, descending; exact ties keep the lower
// index first.
std::vector<int> hard_topk(const Vec& v, int k);

struct NeighborRef {
  int source_index = -1;
  int label = -1;
  double distance = 0.0;
};

struct Prediction {
  int label = -1;
  std::vector<NeighborRef> neighbors;  // rank order, nearest first
  bool tie_broken = false;  // majority vote needed the nearest-label rule
};

enum class SortMode : uint8_t { kHard, kRelaxedArgmax };

// Majority label over the k nearest prototypes. exclude_source >= 0 removes
// prototypes with that source index before ranking (self-exclusion). A tied
// vote resolves to the nearest prototype whose label is among the tied
// classes.
Prediction predict(const Vec& masked_query, const PrototypeBase& base, int k,
                   SortMode mode, double tau, double delta,
                   int exclude_source = -1);

// Eq-style relaxed loss: k - sum_{n<=k} sum_m P[n][m] 1(y_m == label).
// In [0, k]; divide by k when scale_by_k.
double prediction_loss(const Vec& masked_query, int label,
                       const PrototypeBase& base, int k, double tau,
                       double delta, int exclude_source = -1,
                       bool scale_by_k = false);

struct ParityReport {
  int n_queries = 0;
  int n_agree = 0;
  int n_ties = 0;  // exact duplicate similarities; reported, not failed
  std::vector<int> mismatched_queries;
  bool ok() const { return mismatched_queries.empty(); }
};

// Checks that hard ranking and relaxed-argmax ranking give the same
// predicted label (and top-k label multiset) for every query.
ParityReport hybrid_parity_check(const Mat& masked_queries,
                                 const PrototypeBase& base, int k, double tau,
                                 double delta);

// Shared helper: A 1 vector, a1[m] = sum_j |v[m] - v[j]|.
Vec abs_diff_rowsum(const Vec& v);

}  // namespace protogate
