#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "protogate/errors.hpp"

namespace protogate {

// Dense row-major matrices everywhere: flat indices used by gather/reshape
// are row-major, and sample-per-row batches gather by contiguous rows.
using Mat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using IVec = Eigen::VectorXi;

struct TapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Op : uint8_t {
  kInput,
  kMatMul,
  kAdd,
  kTanh,
  kHardClamp,
  kMul,
  kRowSoftmax,
  kGaussianTail,
  kSum,
  kScale,
  kGather,
  kNegate,
  kReciprocal,
  kSqrt,
  kSquare,
};

enum class SumAxis : uint8_t { kAll, kRows, kCols };

using NodeId = int;

struct Node {
  Op op = Op::kInput;
  int rows = 0;
  int cols = 0;
  NodeId a = -1;
  NodeId b = -1;
  double factor = 1.0;           // kScale
  SumAxis axis = SumAxis::kAll;  // kSum
  bool trans_a = false;          // kMatMul
  bool trans_b = false;
  int gather_pool = -1;  // kGather; -1: plain reshape
  bool abs_pattern = false;  // kSqrt directly over kSquare, i.e. |x|
  std::string name;
  Mat value;
  Mat adjoint;
};

// Reverse-mode tape. Nodes are evaluated in creation order (parents always
// precede children), backward walks the reverse order. Scalars are 1x1.
// Structure is reusable: overwrite input values with set_value() and call
// forward()/backward() again; no reallocation happens after construction.
//
// Subgradient conventions at nondifferentiable points:
//   hard-clamp passes gradient only on the open interval (0, 1);
//   sqrt backward is 0 at input 0 (so sqrt(square(x)) == |x| has
//   d|x|/dx = sign(x) with sign(0) = 0).
class Tape {
 public:
  NodeId input(int rows, int cols, std::string name);
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false,
                bool trans_b = false);
  NodeId add(NodeId a, NodeId b);
  NodeId tanh(NodeId a);
  NodeId hard_clamp(NodeId a);
  NodeId mul(NodeId a, NodeId b);
  NodeId row_softmax(NodeId a);
  NodeId gaussian_tail(NodeId a);  // Q(x) = P(Z > x), Z standard normal
  NodeId sum(NodeId a, SumAxis axis = SumAxis::kAll);
  NodeId scale(NodeId a, double factor);
  NodeId gather(NodeId a, std::vector<int> flat_indices, int rows, int cols);
  NodeId reshape(NodeId a, int rows, int cols);
  NodeId negate(NodeId a);
  NodeId reciprocal(NodeId a);
  NodeId sqrt(NodeId a);
  NodeId square(NodeId a);

  void set_value(NodeId id, const Mat& v);
  void set_root(NodeId id);  // must be 1x1
  NodeId root() const { return root_; }

  // Evaluates every node in order; returns the root value when set.
  double forward();
  // Requires a prior forward on the current values.
  void backward();

  const Mat& value(NodeId id) const { return at(id).value; }
  Mat& value_mut(NodeId id);  // inputs only; for in-place fills
  const Mat& grad(NodeId id) const;
  const Node& node(NodeId id) const { return at(id); }
  int size() const { return static_cast<int>(nodes_.size()); }

  // When enabled, forward() records a per-entry region code at every
  // nondifferentiable site (clamp side, |.| sign, near-zero sqrt input).
  // grad_check compares these codes across perturbed evaluations to skip
  // kink-adjacent parameters.
  void set_collect_regions(bool on) { collect_regions_ = on; }
  const std::vector<uint8_t>& regions() const { return regions_; }

 private:
  NodeId push(Node n);
  Node& at(NodeId id);
  const Node& at(NodeId id) const;
  void check_shape(NodeId id, const char* what) const;

  std::vector<Node> nodes_;
  std::vector<std::vector<int>> gather_pool_;
  NodeId root_ = -1;
  bool forward_done_ = false;
  bool collect_regions_ = false;
  std::vector<uint8_t> regions_;
};

struct GradCheckEntry {
  NodeId param = -1;
  int index = 0;  // flat row-major index within the parameter
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
  bool skipped = false;  // kink-adjacent: finite differences unreliable
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_err = 0.0;  // over non-skipped entries
  int n_checked = 0;
  int n_skipped = 0;
  bool ok(double tol) const { return n_checked > 0 && max_rel_err < tol; }
};

// Central finite differences against the tape's analytic gradients.
// rel_err = |a - f| / max(|a|, |f|, floor); the floor absorbs the finite-
// difference noise floor (~eps * |L| / h) for near-zero gradients.
GradCheckReport grad_check(Tape& tape, const std::vector<NodeId>& params,
                           double h = 1e-5, double floor_denom = 1e-5);

}  // namespace protogate
