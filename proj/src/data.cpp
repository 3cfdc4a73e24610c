#include "protogate/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>

#include "protogate/errors.hpp"
#include "protogate/rng.hpp"

namespace protogate {
namespace {

constexpr long kMaxRejectionDraws = 1000000;

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_double(const std::string& s, double* out) {
  const std::string t = trim(s);
  if (t.empty()) return false;
  char* end = nullptr;
  *out = std::strtod(t.c_str(), &end);
  return end == t.c_str() + t.size();
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const char* syn_kind_name(SynKind k) {
  switch (k) {
    case SynKind::kSyn1:
      return "Syn1";
    case SynKind::kSyn2:
      return "Syn2";
    case SynKind::kSyn3:
      return "Syn3";
  }
  return "?";
}

SynKind syn_kind_from(const std::string& name) {
  if (name == "Syn1" || name == "syn1") return SynKind::kSyn1;
  if (name == "Syn2" || name == "syn2") return SynKind::kSyn2;
  if (name == "Syn3" || name == "syn3") return SynKind::kSyn3;
  throw UsageError("unknown synthetic kind: " + name +
                   " (expected Syn1, Syn2, or Syn3)");
}

double syn_logit(SynKind kind, const Vec& x) {
  if (x.size() < 11)
    throw UsageError("synthetic rules need at least 11 features");
  const bool first = x(10) < 0.0;
  // second branch of Syn2 and Syn3 share one rule
  const auto second_common = [&x] {
    return std::exp(-10.0 * std::sin(0.2 * x(6)) + std::abs(x(7)) +
                    x(8) * x(8) + std::exp(-x(9)) - 2.4);
  };
  switch (kind) {
    case SynKind::kSyn1:
      return first ? std::exp(x(0) * x(1) - x(2))
                   : std::exp(x(2) * x(2) + x(3) * x(3) + x(4) * x(4) +
                              x(5) * x(5) - 4.0);
    case SynKind::kSyn2:
      return first ? std::exp(x(2) * x(2) + x(3) * x(3) + x(4) * x(4) +
                              x(5) * x(5) + x(6) * x(6) - 4.0)
                   : second_common();
    case SynKind::kSyn3:
      return first ? std::exp(x(0) * x(1) + std::abs(x(8)))
                   : second_common();
  }
  throw UsageError("unreachable synthetic kind");
}

int syn_label(SynKind kind, const Vec& x) {
  const double logit = syn_logit(kind, x);
  return (1.0 / (1.0 + logit)) > 0.5 ? 1 : 0;
}

std::vector<int> syn_truth(SynKind kind, const Vec& x) {
  const bool first = x(10) < 0.0;
  switch (kind) {
    case SynKind::kSyn1:
      return first ? std::vector<int>{0, 1, 2, 10}
                   : std::vector<int>{2, 3, 4, 5, 10};
    case SynKind::kSyn2:
      return first ? std::vector<int>{2, 3, 4, 5, 6, 10}
                   : std::vector<int>{6, 7, 8, 9, 10};
    case SynKind::kSyn3:
      return first ? std::vector<int>{0, 1, 8, 10}
                   : std::vector<int>{6, 7, 8, 9, 10};
  }
  throw UsageError("unreachable synthetic kind");
}

Dataset gen_synthetic(SynKind kind, int n_class1, int n_class2, int dim,
                      uint64_t seed) {
  if (dim < 11)
    throw UsageError("synthetic datasets need dim >= 11, got " +
                     std::to_string(dim));
  if (n_class1 <= 0 || n_class2 <= 0)
    throw UsageError("synthetic class quotas must be positive");
  Dataset ds;
  ds.kind = syn_kind_name(kind);
  ds.classes = 2;
  ds.class_one_label = 1;  // the n_class1 quota holds threshold label 1
  ds.label_names = {"0", "1"};
  const int total = n_class1 + n_class2;
  ds.x.resize(total, dim);
  ds.y.resize(total);
  ds.truth.reserve(static_cast<size_t>(total));

  Rng rng(derive_seed(seed, "gen-synthetic", {static_cast<uint64_t>(kind)}));
  int have1 = 0, have0 = 0, row = 0;
  for (long draw = 0; draw < kMaxRejectionDraws && row < total; ++draw) {
    Vec x(dim);
    for (int d = 0; d < dim; ++d) x(d) = rng.next_gaussian();
    const int label = syn_label(kind, x);
    if (label == 1 && have1 >= n_class1) continue;
    if (label == 0 && have0 >= n_class2) continue;
    (label == 1 ? have1 : have0) += 1;
    ds.x.row(row) = x.transpose();
    ds.y(row) = label;
    ds.truth.push_back(syn_truth(kind, x));
    ++row;
  }
  if (row < total)
    throw DataError("class quotas unreachable within 1e6 draws for " +
                    std::string(syn_kind_name(kind)) + ": got " +
                    std::to_string(have1) + "/" + std::to_string(n_class1) +
                    " of label 1 and " + std::to_string(have0) + "/" +
                    std::to_string(n_class2) + " of label 0");
  ds.feature_names.reserve(static_cast<size_t>(dim));
  for (int d = 0; d < dim; ++d)
    ds.feature_names.push_back("x" + std::to_string(d + 1));
  return ds;
}

Dataset load_csv(const std::string& path, const std::string& label_col) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw DataError("CSV is empty (header row required): " + path);
  const std::vector<std::string> header_raw = split_fields(line);
  std::vector<std::string> header;
  header.reserve(header_raw.size());
  for (const auto& h : header_raw) header.push_back(trim(h));
  int label_idx = -1;
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == label_col) label_idx = static_cast<int>(i);
  if (label_idx < 0)
    throw DataError("label column '" + label_col + "' not found in " + path);
  const int dim = static_cast<int>(header.size()) - 1;
  if (dim < 1) throw DataError("CSV has no feature columns: " + path);

  Dataset ds;
  ds.kind = "csv";
  for (size_t i = 0; i < header.size(); ++i)
    if (static_cast<int>(i) != label_idx)
      ds.feature_names.push_back(header[i]);

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::map<std::string, int> label_ids;
  std::vector<long> bad_rows;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    if (fields.size() != header.size()) {
      bad_rows.push_back(line_no);
      continue;
    }
    std::vector<double> feats;
    feats.reserve(static_cast<size_t>(dim));
    bool ok = true;
    for (size_t i = 0; i < fields.size(); ++i) {
      if (static_cast<int>(i) == label_idx) continue;
      double v;
      if (!parse_double(fields[i], &v)) {
        ok = false;
        break;
      }
      feats.push_back(v);
    }
    if (!ok) {
      bad_rows.push_back(line_no);
      continue;
    }
    const std::string lab = trim(fields[static_cast<size_t>(label_idx)]);
    if (lab.empty()) {
      bad_rows.push_back(line_no);
      continue;
    }
    auto [it, inserted] =
        label_ids.insert({lab, static_cast<int>(ds.label_names.size())});
    if (inserted) ds.label_names.push_back(lab);
    labels.push_back(it->second);
    rows.push_back(std::move(feats));
  }
  if (!bad_rows.empty()) {
    std::string msg = "CSV rows with missing or non-numeric values in " +
                      path + " (line numbers):";
    const size_t shown = std::min<size_t>(bad_rows.size(), 20);
    for (size_t i = 0; i < shown; ++i)
      msg += " " + std::to_string(bad_rows[i]);
    if (bad_rows.size() > shown)
      msg += " (+" + std::to_string(bad_rows.size() - shown) + " more)";
    throw DataError(msg);
  }
  if (rows.empty()) throw DataError("CSV has no data rows: " + path);
  ds.x.resize(static_cast<int>(rows.size()), dim);
  ds.y.resize(static_cast<int>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int d = 0; d < dim; ++d) ds.x(static_cast<int>(i), d) = rows[i][d];
    ds.y(static_cast<int>(i)) = labels[i];
  }
  ds.classes = static_cast<int>(ds.label_names.size());
  if (ds.classes < 2)
    throw DataError("CSV has a single class; need at least two: " + path);
  return ds;
}

Mat load_features_csv(const std::string& path,
                      std::vector<std::string>* names) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open CSV: " + path);
  std::string line;
  if (!std::getline(in, line))
    throw DataError("CSV is empty (header row required): " + path);
  const std::vector<std::string> header = split_fields(line);
  const int dim = static_cast<int>(header.size());
  if (dim < 1) throw DataError("CSV has no feature columns: " + path);
  if (names) {
    names->clear();
    for (const auto& h : header) names->push_back(trim(h));
  }
  std::vector<std::vector<double>> rows;
  std::vector<long> bad_rows;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> fields = split_fields(line);
    std::vector<double> feats;
    feats.reserve(static_cast<size_t>(dim));
    bool ok = fields.size() == header.size();
    for (size_t i = 0; ok && i < fields.size(); ++i) {
      double v;
      ok = parse_double(fields[i], &v);
      if (ok) feats.push_back(v);
    }
    if (!ok) {
      bad_rows.push_back(line_no);
      continue;
    }
    rows.push_back(std::move(feats));
  }
  if (!bad_rows.empty()) {
    std::string msg = "CSV rows with missing or non-numeric values in " +
                      path + " (line numbers):";
    const size_t shown = std::min<size_t>(bad_rows.size(), 20);
    for (size_t i = 0; i < shown; ++i) msg += " " + std::to_string(bad_rows[i]);
    if (bad_rows.size() > shown)
      msg += " (+" + std::to_string(bad_rows.size() - shown) + " more)";
    throw DataError(msg);
  }
  if (rows.empty()) throw DataError("CSV has no data rows: " + path);
  Mat x(static_cast<int>(rows.size()), dim);
  for (size_t i = 0; i < rows.size(); ++i)
    for (int d = 0; d < dim; ++d) x(static_cast<int>(i), d) = rows[i][d];
  return x;
}

void write_csv(const std::string& path, const Dataset& ds,
               const std::string& label_col) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open CSV for writing: " + path);
  for (const auto& name : ds.feature_names) out << name << ",";
  out << label_col << "\n";
  for (int i = 0; i < ds.n(); ++i) {
    for (int d = 0; d < ds.dim(); ++d) out << fmt_double(ds.x(i, d)) << ",";
    const int label = ds.y(i);
    if (label >= 0 && label < static_cast<int>(ds.label_names.size()))
      out << ds.label_names[static_cast<size_t>(label)];
    else
      out << label;
    out << "\n";
  }
  if (!out) throw DataError("failed writing CSV: " + path);
}

void write_truth_json(const std::string& path, const Dataset& ds) {
  nlohmann::json j;
  j["kind"] = ds.kind;
  j["n"] = ds.n();
  j["dim"] = ds.dim();
  j["class_one_label"] = ds.class_one_label;
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : ds.truth) {
    nlohmann::json row = nlohmann::json::array();
    for (int f : t) row.push_back(f + 1);  // 1-based on disk
    rows.push_back(row);
  }
  j["informative_features_1based"] = rows;
  std::ofstream out(path);
  if (!out) throw DataError("cannot open truth sidecar for writing: " + path);
  out << j.dump(2) << "\n";
}

void load_truth_json(const std::string& path, Dataset& ds) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open truth sidecar: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed truth sidecar " + path + ": " + e.what());
  }
  const auto& rows = j.at("informative_features_1based");
  if (static_cast<int>(rows.size()) != ds.n())
    throw DataError("truth sidecar row count does not match dataset: " +
                    path);
  ds.truth.clear();
  for (const auto& row : rows) {
    std::vector<int> t;
    for (const auto& f : row) {
      const int idx = f.get<int>() - 1;
      if (idx < 0 || idx >= ds.dim())
        throw DataError("truth sidecar feature index out of range in " +
                        path);
      t.push_back(idx);
    }
    ds.truth.push_back(std::move(t));
  }
}

Normalizer fit_normalizer(const Mat& x, const std::vector<int>& rows) {
  if (rows.empty()) throw UsageError("fit_normalizer: no training rows");
  const int d = static_cast<int>(x.cols());
  Normalizer nz;
  nz.mean = Vec::Zero(d);
  nz.std = Vec::Zero(d);
  nz.constant.assign(static_cast<size_t>(d), 0);
  const double n = static_cast<double>(rows.size());
  for (int r : rows) nz.mean += x.row(r).transpose();
  nz.mean /= n;
  for (int r : rows)
    nz.std.array() +=
        (x.row(r).transpose() - nz.mean).array().square();
  nz.std = (nz.std / n).cwiseSqrt();  // population denominator
  for (int j = 0; j < d; ++j) {
    // exact-zero test plus a round-off guard: identical values can leave a
    // ~1e-17 residual std that would explode the transform
    if (nz.std(j) <= 1e-12 * std::max(1.0, std::abs(nz.mean(j)))) {
      nz.constant[static_cast<size_t>(j)] = 1;
      nz.std(j) = 0.0;
    }
  }
  return nz;
}

Mat apply_normalizer(const Normalizer& nz, const Mat& x) {
  if (x.cols() != nz.mean.size())
    throw UsageError("apply_normalizer: width mismatch");
  Mat out(x.rows(), x.cols());
  for (int j = 0; j < x.cols(); ++j) {
    if (nz.constant[static_cast<size_t>(j)]) {
      out.col(j).setZero();
    } else {
      out.col(j) = (x.col(j).array() - nz.mean(j)) / nz.std(j);
    }
  }
  return out;
}

nlohmann::json normalizer_json(const Normalizer& nz) {
  nlohmann::json j;
  j["mean"] = std::vector<double>(nz.mean.data(),
                                  nz.mean.data() + nz.mean.size());
  j["std"] =
      std::vector<double>(nz.std.data(), nz.std.data() + nz.std.size());
  j["constant"] = nz.constant;
  return j;
}

Normalizer normalizer_from_json(const nlohmann::json& j) {
  Normalizer nz;
  const auto mean = j.at("mean").get<std::vector<double>>();
  const auto sd = j.at("std").get<std::vector<double>>();
  nz.constant = j.at("constant").get<std::vector<uint8_t>>();
  if (mean.size() != sd.size() || mean.size() != nz.constant.size())
    throw DataError("normalizer JSON has inconsistent lengths");
  nz.mean = Eigen::Map<const Vec>(mean.data(),
                                  static_cast<long>(mean.size()));
  nz.std = Eigen::Map<const Vec>(sd.data(), static_cast<long>(sd.size()));
  return nz;
}

SplitPlan make_splits(const IVec& y, int folds, int repeats, double val_frac,
                      uint64_t seed,
                      const std::vector<std::string>& label_names) {
  if (folds < 2) throw UsageError("make_splits: folds must be >= 2");
  if (repeats < 1) throw UsageError("make_splits: repeats must be >= 1");
  if (val_frac <= 0.0 || val_frac >= 1.0)
    throw UsageError("make_splits: val_frac must be in (0, 1)");
  const int n = static_cast<int>(y.size());
  int classes = 0;
  for (int i = 0; i < n; ++i) classes = std::max(classes, y(i) + 1);
  std::vector<std::vector<int>> by_class(static_cast<size_t>(classes));
  for (int i = 0; i < n; ++i)
    by_class[static_cast<size_t>(y(i))].push_back(i);
  for (int c = 0; c < classes; ++c) {
    if (static_cast<int>(by_class[static_cast<size_t>(c)].size()) < folds) {
      const std::string name =
          c < static_cast<int>(label_names.size())
              ? "'" + label_names[static_cast<size_t>(c)] + "'"
              : std::to_string(c);
      throw DataError("class " + name + " has only " +
                      std::to_string(by_class[static_cast<size_t>(c)].size()) +
                      " samples; stratified " + std::to_string(folds) +
                      "-fold CV needs at least " + std::to_string(folds));
    }
  }

  SplitPlan plan;
  plan.folds = folds;
  plan.repeats = repeats;
  plan.val_frac = val_frac;
  plan.seed = seed;
  for (int r = 0; r < repeats; ++r) {
    // per-repeat stratified fold assignment
    std::vector<int> fold_of(static_cast<size_t>(n), -1);
    for (int c = 0; c < classes; ++c) {
      std::vector<int> members = by_class[static_cast<size_t>(c)];
      Rng rng(derive_seed(seed, "fold-assign",
                          {static_cast<uint64_t>(r), static_cast<uint64_t>(c)}));
      rng.shuffle(members);
      for (size_t k = 0; k < members.size(); ++k)
        fold_of[static_cast<size_t>(members[k])] =
            static_cast<int>(k % static_cast<size_t>(folds));
    }
    for (int f = 0; f < folds; ++f) {
      SplitRun run;
      run.repeat = r;
      run.fold = f;
      std::vector<std::vector<int>> trainval_by_class(
          static_cast<size_t>(classes));
      for (int i = 0; i < n; ++i) {
        if (fold_of[static_cast<size_t>(i)] == f)
          run.test.push_back(i);
        else
          trainval_by_class[static_cast<size_t>(y(i))].push_back(i);
      }
      for (int c = 0; c < classes; ++c) {
        std::vector<int>& members = trainval_by_class[static_cast<size_t>(c)];
        Rng rng(derive_seed(seed, "val-pick",
                            {static_cast<uint64_t>(r), static_cast<uint64_t>(f),
                             static_cast<uint64_t>(c)}));
        rng.shuffle(members);
        long want = std::lround(val_frac * static_cast<double>(members.size()));
        want = std::max<long>(1, want);
        want = std::min<long>(want, static_cast<long>(members.size()) - 1);
        for (size_t k = 0; k < members.size(); ++k) {
          if (static_cast<long>(k) < want)
            run.val.push_back(members[k]);
          else
            run.train.push_back(members[k]);
        }
      }
      std::sort(run.train.begin(), run.train.end());
      std::sort(run.val.begin(), run.val.end());
      std::sort(run.test.begin(), run.test.end());
      plan.runs.push_back(std::move(run));
    }
  }
  return plan;
}

nlohmann::json split_plan_json(const SplitPlan& plan) {
  nlohmann::json j;
  j["folds"] = plan.folds;
  j["repeats"] = plan.repeats;
  j["val_frac"] = plan.val_frac;
  j["seed"] = plan.seed;
  nlohmann::json runs = nlohmann::json::array();
  for (const SplitRun& r : plan.runs) {
    nlohmann::json run;
    run["repeat"] = r.repeat;
    run["fold"] = r.fold;
    run["train_idx"] = r.train;
    run["val_idx"] = r.val;
    run["test_idx"] = r.test;
    runs.push_back(run);
  }
  j["runs"] = runs;
  return j;
}

Mat subset_rows(const Mat& x, const std::vector<int>& rows) {
  Mat out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
  return out;
}

Mat subset_cols(const Mat& x, const std::vector<int>& cols) {
  Mat out(x.rows(), static_cast<Eigen::Index>(cols.size()));
  for (size_t j = 0; j < cols.size(); ++j)
    out.col(static_cast<Eigen::Index>(j)) = x.col(cols[j]);
  return out;
}

IVec subset_labels(const IVec& y, const std::vector<int>& rows) {
  IVec out(static_cast<Eigen::Index>(rows.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = y(rows[i]);
  return out;
}

}  // namespace protogate
