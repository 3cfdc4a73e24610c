#include "protogate/tape.hpp"

#include <cmath>
#include <cstring>
#include <utility>

namespace protogate {
namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
constexpr double kSqrtRegionEps = 1e-8;  // bare-sqrt inputs below are kinky

double gauss_tail(double x) { return 0.5 * std::erfc(x * kInvSqrt2); }
double gauss_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

}  // namespace

Node& Tape::at(NodeId id) {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw TapeError("node id out of range: " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

const Node& Tape::at(NodeId id) const {
  if (id < 0 || id >= static_cast<int>(nodes_.size()))
    throw TapeError("node id out of range: " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

NodeId Tape::push(Node n) {
  if (n.rows <= 0 || n.cols <= 0)
    throw TapeError("node '" + n.name + "' has empty shape");
  n.value = Mat::Zero(n.rows, n.cols);
  n.adjoint = Mat::Zero(n.rows, n.cols);
  nodes_.push_back(std::move(n));
  forward_done_ = false;
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::input(int rows, int cols, std::string name) {
  Node n;
  n.op = Op::kInput;
  n.rows = rows;
  n.cols = cols;
  n.name = std::move(name);
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  const int ar = trans_a ? na.cols : na.rows;
  const int ac = trans_a ? na.rows : na.cols;
  const int br = trans_b ? nb.cols : nb.rows;
  const int bc = trans_b ? nb.rows : nb.cols;
  if (ac != br)
    throw TapeError("matmul inner-dimension mismatch between '" + na.name +
                    "' (" + std::to_string(na.rows) + "x" +
                    std::to_string(na.cols) + (trans_a ? "^T" : "") +
                    ") and '" + nb.name + "' (" + std::to_string(nb.rows) +
                    "x" + std::to_string(nb.cols) + (trans_b ? "^T" : "") +
                    ")");
  Node n;
  n.op = Op::kMatMul;
  n.rows = ar;
  n.cols = bc;
  n.a = a;
  n.b = b;
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  n.name = "matmul(" + na.name + "," + nb.name + ")";
  return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.rows != nb.rows || na.cols != nb.cols)
    throw TapeError("add shape mismatch between '" + na.name + "' (" +
                    std::to_string(na.rows) + "x" + std::to_string(na.cols) +
                    ") and '" + nb.name + "' (" + std::to_string(nb.rows) +
                    "x" + std::to_string(nb.cols) + ")");
  Node n;
  n.op = Op::kAdd;
  n.rows = na.rows;
  n.cols = na.cols;
  n.a = a;
  n.b = b;
  n.name = "add(" + na.name + "," + nb.name + ")";
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Node& na = at(a);
  const Node& nb = at(b);
  if (na.rows != nb.rows || na.cols != nb.cols)
    throw TapeError("mul shape mismatch between '" + na.name + "' and '" +
                    nb.name + "'");
  Node n;
  n.op = Op::kMul;
  n.rows = na.rows;
  n.cols = na.cols;
  n.a = a;
  n.b = b;
  n.name = "mul(" + na.name + "," + nb.name + ")";
  return push(std::move(n));
}

namespace {
Node unary(Op op, const Node& na, NodeId a, const char* tag) {
  Node n;
  n.op = op;
  n.rows = na.rows;
  n.cols = na.cols;
  n.a = a;
  n.name = std::string(tag) + "(" + na.name + ")";
  return n;
}
}  // namespace

NodeId Tape::tanh(NodeId a) { return push(unary(Op::kTanh, at(a), a, "tanh")); }

NodeId Tape::hard_clamp(NodeId a) {
  return push(unary(Op::kHardClamp, at(a), a, "clamp"));
}

NodeId Tape::row_softmax(NodeId a) {
  return push(unary(Op::kRowSoftmax, at(a), a, "softmax"));
}

NodeId Tape::gaussian_tail(NodeId a) {
  return push(unary(Op::kGaussianTail, at(a), a, "qtail"));
}

NodeId Tape::negate(NodeId a) {
  return push(unary(Op::kNegate, at(a), a, "neg"));
}

NodeId Tape::reciprocal(NodeId a) {
  return push(unary(Op::kReciprocal, at(a), a, "recip"));
}

NodeId Tape::sqrt(NodeId a) {
  Node n = unary(Op::kSqrt, at(a), a, "sqrt");
  n.abs_pattern = at(a).op == Op::kSquare;  // sqrt(square(x)) encodes |x|
  return push(std::move(n));
}

NodeId Tape::square(NodeId a) {
  return push(unary(Op::kSquare, at(a), a, "square"));
}

NodeId Tape::sum(NodeId a, SumAxis axis) {
  const Node& na = at(a);
  Node n;
  n.op = Op::kSum;
  n.axis = axis;
  n.rows = axis == SumAxis::kCols ? 1 : (axis == SumAxis::kAll ? 1 : na.rows);
  n.cols = axis == SumAxis::kRows ? 1 : (axis == SumAxis::kAll ? 1 : na.cols);
  n.a = a;
  n.name = "sum(" + na.name + ")";
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double factor) {
  Node n = unary(Op::kScale, at(a), a, "scale");
  n.factor = factor;
  return push(std::move(n));
}

NodeId Tape::gather(NodeId a, std::vector<int> flat_indices, int rows,
                    int cols) {
  const Node& na = at(a);
  if (static_cast<long>(flat_indices.size()) !=
      static_cast<long>(rows) * cols)
    throw TapeError("gather index count does not match output shape for '" +
                    na.name + "'");
  const long limit = static_cast<long>(na.rows) * na.cols;
  for (int idx : flat_indices)
    if (idx < 0 || idx >= limit)
      throw TapeError("gather index out of range for '" + na.name + "'");
  Node n;
  n.op = Op::kGather;
  n.rows = rows;
  n.cols = cols;
  n.a = a;
  n.name = "gather(" + na.name + ")";
  gather_pool_.push_back(std::move(flat_indices));
  n.gather_pool = static_cast<int>(gather_pool_.size() - 1);
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, int rows, int cols) {
  const Node& na = at(a);
  if (static_cast<long>(rows) * cols !=
      static_cast<long>(na.rows) * na.cols)
    throw TapeError("reshape element-count mismatch for '" + na.name + "'");
  Node n;
  n.op = Op::kGather;
  n.rows = rows;
  n.cols = cols;
  n.a = a;
  n.gather_pool = -1;  // identity
  n.name = "reshape(" + na.name + ")";
  return push(std::move(n));
}

void Tape::set_value(NodeId id, const Mat& v) {
  Node& n = at(id);
  if (n.op != Op::kInput)
    throw TapeError("set_value on non-input node '" + n.name + "'");
  if (v.rows() != n.rows || v.cols() != n.cols)
    throw TapeError("set_value shape mismatch on '" + n.name + "': expected " +
                    std::to_string(n.rows) + "x" + std::to_string(n.cols) +
                    ", got " + std::to_string(v.rows()) + "x" +
                    std::to_string(v.cols()));
  n.value = v;
  forward_done_ = false;
}

Mat& Tape::value_mut(NodeId id) {
  Node& n = at(id);
  if (n.op != Op::kInput)
    throw TapeError("value_mut on non-input node '" + n.name + "'");
  forward_done_ = false;
  return n.value;
}

void Tape::set_root(NodeId id) {
  const Node& n = at(id);
  if (n.rows != 1 || n.cols != 1)
    throw TapeError("root node '" + n.name + "' is not a scalar");
  root_ = id;
}

const Mat& Tape::grad(NodeId id) const {
  if (!forward_done_)
    throw TapeError("grad requested before forward/backward");
  return at(id).adjoint;
}

double Tape::forward() {
  regions_.clear();
  for (Node& n : nodes_) {
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kMatMul: {
        const Mat& A = nodes_[n.a].value;
        const Mat& B = nodes_[n.b].value;
        if (!n.trans_a && !n.trans_b)
          n.value.noalias() = A * B;
        else if (!n.trans_a && n.trans_b)
          n.value.noalias() = A * B.transpose();
        else if (n.trans_a && !n.trans_b)
          n.value.noalias() = A.transpose() * B;
        else
          n.value.noalias() = A.transpose() * B.transpose();
        break;
      }
      case Op::kAdd:
        n.value = nodes_[n.a].value + nodes_[n.b].value;
        break;
      case Op::kTanh:
        n.value.array() = nodes_[n.a].value.array().tanh();
        break;
      case Op::kHardClamp: {
        const Mat& x = nodes_[n.a].value;
        n.value.array() = x.array().max(0.0).min(1.0);
        if (collect_regions_) {
          const double* p = x.data();
          for (long k = 0; k < x.size(); ++k)
            regions_.push_back(p[k] <= 0.0 ? 0 : (p[k] >= 1.0 ? 2 : 1));
        }
        break;
      }
      case Op::kMul:
        n.value.array() =
            nodes_[n.a].value.array() * nodes_[n.b].value.array();
        break;
      case Op::kRowSoftmax: {
        const Mat& x = nodes_[n.a].value;
        for (int i = 0; i < x.rows(); ++i) {
          const double m = x.row(i).maxCoeff();
          n.value.row(i).array() = (x.row(i).array() - m).exp();
          n.value.row(i) /= n.value.row(i).sum();
        }
        break;
      }
      case Op::kGaussianTail:
        n.value = nodes_[n.a].value.unaryExpr(&gauss_tail);
        break;
      case Op::kSum: {
        const Mat& x = nodes_[n.a].value;
        if (n.axis == SumAxis::kAll)
          n.value(0, 0) = x.sum();
        else if (n.axis == SumAxis::kRows)
          n.value.col(0) = x.rowwise().sum();
        else
          n.value.row(0) = x.colwise().sum();
        break;
      }
      case Op::kScale:
        n.value = nodes_[n.a].value * n.factor;
        break;
      case Op::kGather: {
        const double* src = nodes_[n.a].value.data();
        double* dst = n.value.data();
        if (n.gather_pool < 0) {
          std::memcpy(dst, src, sizeof(double) * n.value.size());
        } else {
          const std::vector<int>& idx =
              gather_pool_[static_cast<size_t>(n.gather_pool)];
          for (size_t k = 0; k < idx.size(); ++k)
            dst[k] = src[idx[k]];
        }
        break;
      }
      case Op::kNegate:
        n.value = -nodes_[n.a].value;
        break;
      case Op::kReciprocal:
        n.value.array() = nodes_[n.a].value.array().inverse();
        break;
      case Op::kSqrt: {
        const Node& pa = nodes_[n.a];
        const Mat& x = pa.value;
        if ((x.array() < 0.0).any())
          throw TapeError("sqrt of negative input in '" + n.name + "'");
        n.value.array() = x.array().sqrt();
        if (collect_regions_) {
          if (n.abs_pattern) {
            // |x| kink tracked by the sign of the squared quantity.
            const Mat& z = nodes_[pa.a].value;
            const double* p = z.data();
            for (long k = 0; k < z.size(); ++k)
              regions_.push_back(p[k] < 0.0 ? 0 : (p[k] > 0.0 ? 2 : 1));
          } else {
            const double* p = x.data();
            for (long k = 0; k < x.size(); ++k)
              regions_.push_back(p[k] < kSqrtRegionEps ? 0 : 1);
          }
        }
        break;
      }
      case Op::kSquare:
        n.value.array() = nodes_[n.a].value.array().square();
        break;
    }
  }
  forward_done_ = true;
  return root_ >= 0 ? nodes_[root_].value(0, 0) : 0.0;
}

void Tape::backward() {
  if (!forward_done_)
    throw TapeError("backward called before forward");
  if (root_ < 0) throw TapeError("backward called without a root node");
  for (Node& n : nodes_) n.adjoint.setZero();
  nodes_[root_].adjoint(0, 0) = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = *it;
    const Mat& g = n.adjoint;
    switch (n.op) {
      case Op::kInput:
        break;
      case Op::kMatMul: {
        Node& na = nodes_[n.a];
        Node& nb = nodes_[n.b];
        const Mat& A = na.value;
        const Mat& B = nb.value;
        if (!n.trans_a && !n.trans_b) {
          na.adjoint.noalias() += g * B.transpose();
          nb.adjoint.noalias() += A.transpose() * g;
        } else if (!n.trans_a && n.trans_b) {
          na.adjoint.noalias() += g * B;
          nb.adjoint.noalias() += g.transpose() * A;
        } else if (n.trans_a && !n.trans_b) {
          na.adjoint.noalias() += B * g.transpose();
          nb.adjoint.noalias() += A * g;
        } else {
          na.adjoint.noalias() += B.transpose() * g.transpose();
          nb.adjoint.noalias() += g.transpose() * A.transpose();
        }
        break;
      }
      case Op::kAdd:
        nodes_[n.a].adjoint += g;
        nodes_[n.b].adjoint += g;
        break;
      case Op::kTanh:
        nodes_[n.a].adjoint.array() +=
            g.array() * (1.0 - n.value.array().square());
        break;
      case Op::kHardClamp: {
        const Mat& x = nodes_[n.a].value;
        nodes_[n.a].adjoint.array() +=
            g.array() *
            ((x.array() > 0.0) && (x.array() < 1.0)).cast<double>();
        break;
      }
      case Op::kMul:
        nodes_[n.a].adjoint.array() += g.array() * nodes_[n.b].value.array();
        nodes_[n.b].adjoint.array() += g.array() * nodes_[n.a].value.array();
        break;
      case Op::kRowSoftmax: {
        Node& na = nodes_[n.a];
        for (int i = 0; i < g.rows(); ++i) {
          const double dot = g.row(i).cwiseProduct(n.value.row(i)).sum();
          na.adjoint.row(i).array() +=
              n.value.row(i).array() * (g.row(i).array() - dot);
        }
        break;
      }
      case Op::kGaussianTail: {
        const Mat& x = nodes_[n.a].value;
        nodes_[n.a].adjoint.array() -=
            g.array() * x.unaryExpr(&gauss_pdf).array();
        break;
      }
      case Op::kSum: {
        Node& na = nodes_[n.a];
        if (n.axis == SumAxis::kAll)
          na.adjoint.array() += g(0, 0);
        else if (n.axis == SumAxis::kRows)
          na.adjoint.colwise() += g.col(0);
        else
          na.adjoint.rowwise() += g.row(0);
        break;
      }
      case Op::kScale:
        nodes_[n.a].adjoint += g * n.factor;
        break;
      case Op::kGather: {
        double* dst = nodes_[n.a].adjoint.data();
        const double* src = g.data();
        if (n.gather_pool < 0) {
          Eigen::Map<Eigen::ArrayXd>(dst, g.size()) +=
              Eigen::Map<const Eigen::ArrayXd>(src, g.size());
        } else {
          const std::vector<int>& idx =
              gather_pool_[static_cast<size_t>(n.gather_pool)];
          for (size_t k = 0; k < idx.size(); ++k)
            dst[idx[k]] += src[k];
        }
        break;
      }
      case Op::kNegate:
        nodes_[n.a].adjoint -= g;
        break;
      case Op::kReciprocal:
        nodes_[n.a].adjoint.array() -=
            g.array() * n.value.array().square();
        break;
      case Op::kSqrt: {
        // d sqrt(x)/dx = 1/(2 sqrt(x)) for x > 0, taken as 0 at x = 0.
        const Mat& x = nodes_[n.a].value;
        nodes_[n.a].adjoint.array() +=
            (x.array() > 0.0)
                .select(g.array() * 0.5 / n.value.array().max(1e-300), 0.0);
        break;
      }
      case Op::kSquare:
        nodes_[n.a].adjoint.array() +=
            g.array() * 2.0 * nodes_[n.a].value.array();
        break;
    }
  }
}

GradCheckReport grad_check(Tape& tape, const std::vector<NodeId>& params,
                           double h, double floor_denom) {
  GradCheckReport report;
  tape.set_collect_regions(true);
  tape.forward();
  const std::vector<uint8_t> base_regions = tape.regions();
  tape.backward();
  std::vector<Mat> analytic;
  analytic.reserve(params.size());
  for (NodeId p : params) analytic.push_back(tape.grad(p));

  for (size_t pi = 0; pi < params.size(); ++pi) {
    const NodeId p = params[pi];
    Mat& v = tape.value_mut(p);
    for (long k = 0; k < v.size(); ++k) {
      const double saved = v.data()[k];
      v.data()[k] = saved + h;
      const double f_plus = tape.forward();
      const std::vector<uint8_t> r_plus = tape.regions();
      v.data()[k] = saved - h;
      const double f_minus = tape.forward();
      const bool crossed = r_plus != base_regions ||
                           tape.regions() != base_regions;
      v.data()[k] = saved;

      GradCheckEntry e;
      e.param = p;
      e.index = static_cast<int>(k);
      e.analytic = analytic[pi].data()[k];
      e.numeric = (f_plus - f_minus) / (2.0 * h);
      e.skipped = crossed;
      const double denom = std::max(
          {std::abs(e.analytic), std::abs(e.numeric), floor_denom});
      e.rel_err = std::abs(e.analytic - e.numeric) / denom;
      if (e.skipped) {
        ++report.n_skipped;
      } else {
        ++report.n_checked;
        report.max_rel_err = std::max(report.max_rel_err, e.rel_err);
      }
      report.entries.push_back(e);
    }
  }
  tape.set_collect_regions(false);
  tape.forward();  // leave values consistent with the unperturbed inputs
  return report;
}

}  // namespace protogate
