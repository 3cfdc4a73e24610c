#pragma once

#include <vector>

#include "protogate/tape.hpp"

namespace protogate {

// Reference classifiers for fidelity comparisons. Both reuse the prototype
// predictor's ranking and tie-break rules so differences come from feature
// selection alone.

// Plain k-nearest-neighbor vote over every feature.
IVec knn_predict(const Mat& x_train, const IVec& y_train, const Mat& x_query,
                 int k, double delta = 1e-9);

// Feature indices ranked by |Pearson correlation| with the label, strongest
// first; ties keep the lower index. Constant features rank last (score 0).
std::vector<int> correlation_ranking(const Mat& x_train, const IVec& y_train);

// The top `count` entries of correlation_ranking, clamped to the width.
std::vector<int> correlation_topk(const Mat& x_train, const IVec& y_train,
                                  int count);

// KNN restricted to the given feature subset.
IVec knn_predict_on(const Mat& x_train, const IVec& y_train,
                    const Mat& x_query, int k, const std::vector<int>& features,
                    double delta = 1e-9);

}  // namespace protogate
