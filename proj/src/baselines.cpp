#include "protogate/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protogate/data.hpp"
#include "protogate/errors.hpp"
#include "protogate/proto.hpp"

namespace protogate {

IVec knn_predict(const Mat& x_train, const IVec& y_train, const Mat& x_query,
                 int k, double delta) {
  std::vector<int> source(static_cast<size_t>(x_train.rows()));
  std::iota(source.begin(), source.end(), 0);
  const PrototypeBase base = build_base(x_train, y_train, source);
  IVec out(x_query.rows());
  for (Eigen::Index q = 0; q < x_query.rows(); ++q)
    out(q) = predict(x_query.row(q).transpose(), base, k, SortMode::kHard,
                     1.0, delta)
                 .label;
  return out;
}

std::vector<int> correlation_ranking(const Mat& x_train, const IVec& y_train) {
  const Eigen::Index n = x_train.rows();
  if (n < 2) throw UsageError("correlation ranking needs at least 2 samples");
  const double y_mean =
      y_train.cast<double>().sum() / static_cast<double>(n);
  Vec yc(n);
  for (Eigen::Index i = 0; i < n; ++i)
    yc(i) = static_cast<double>(y_train(i)) - y_mean;
  const double y_ss = yc.squaredNorm();
  const Eigen::Index d = x_train.cols();
  std::vector<double> score(static_cast<size_t>(d), 0.0);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double x_mean = x_train.col(j).sum() / static_cast<double>(n);
    double cov = 0.0, x_ss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double xc = x_train(i, j) - x_mean;
      cov += xc * yc(i);
      x_ss += xc * xc;
    }
    const double denom = std::sqrt(x_ss * y_ss);
    score[static_cast<size_t>(j)] = denom > 0.0 ? std::abs(cov / denom) : 0.0;
  }
  std::vector<int> order(static_cast<size_t>(d));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return score[static_cast<size_t>(a)] > score[static_cast<size_t>(b)];
  });
  return order;
}

std::vector<int> correlation_topk(const Mat& x_train, const IVec& y_train,
                                  int count) {
  if (count < 1) throw UsageError("correlation_topk: count must be >= 1");
  std::vector<int> order = correlation_ranking(x_train, y_train);
  if (static_cast<size_t>(count) < order.size())
    order.resize(static_cast<size_t>(count));
  return order;
}

IVec knn_predict_on(const Mat& x_train, const IVec& y_train,
                    const Mat& x_query, int k, const std::vector<int>& features,
                    double delta) {
  if (features.empty()) throw UsageError("knn_predict_on: no features given");
  return knn_predict(subset_cols(x_train, features), y_train,
                     subset_cols(x_query, features), k, delta);
}

}  // namespace protogate
