#ifndef COPFORGE_AUTODIFF_HPP_
#define COPFORGE_AUTODIFF_HPP_

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace copforge::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::RowVectorXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

// Handle to a node on a Tape.
struct Var {
  int id = -1;
};

// Query row r attends to key rows [key_begin[r], key_begin[r] + key_count[r]).
// When `mask` is non-empty it holds key_count[r] flags for row r starting at
// mask_offset[r]; zero flags receive probability 0.
struct AttentionLayout {
  std::vector<int> key_begin;
  std::vector<int> key_count;
  std::vector<uint8_t> mask;
  std::vector<int> mask_offset;
};

// Per-feature batch statistics captured by a training-mode batch norm.
struct BatchStats {
  RowVector mean;
  RowVector var;  // biased
  int rows = 0;
};

// Reverse-mode tape over dense row-major matrices. Nodes are appended by the
// op methods; Backward() runs the recorded adjoints in reverse order. Leaf
// parameters accumulate into caller-owned gradient buffers.
class Tape {
 public:
  Var Constant(Matrix value);
  // `grad_sink` must hold rows*cols doubles and outlive Backward().
  Var Parameter(const Matrix& value, double* grad_sink);

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  size_t size() const { return nodes_.size(); }

  Var MatMul(Var a, Var b);
  Var Add(Var a, Var b);
  Var AddRowBroadcast(Var a, Var row);  // row is 1 x cols
  Var Scale(Var a, double s);
  Var Relu(Var a);
  Var ConcatCols(std::span<const Var> parts);
  Var GatherRows(Var a, std::vector<int> rows);

  // Training mode: normalize each column over all rows.
  Var BatchNorm(Var x, Var gamma, Var beta, double eps, BatchStats* stats);
  // Inference mode with fixed statistics.
  Var BatchNormFixed(Var x, Var gamma, Var beta, const RowVector& mean,
                     const RowVector& var, double eps);

  // Multi-head scaled dot-product attention. q is R x d, k and v are M x d;
  // d splits into `heads` equal slices.
  Var MultiHeadAttention(Var q, Var k, Var v, int heads, AttentionLayout layout);

  // out(r, j) = clip * tanh(<g_r, h_{begin[r]+j}> * scale), j < count.
  // Every row must have the same count.
  Var ClippedCompatibility(Var g, Var h, std::vector<int> key_begin, int count,
                           double scale, double clip);

  // Row-wise log-softmax over entries with mask != 0 (R x C flags, row-major).
  // Masked entries are -inf.
  Var MaskedLogSoftmax(Var logits, std::vector<uint8_t> mask);

  // Column vector of a(rows[i], cols[i]).
  Var Pick(Var a, std::vector<int> rows, std::vector<int> cols);

  // 1x1: sum_i w[i] * a(i, 0).
  Var WeightedSum(Var a, std::vector<double> w);
  // 1x1 sum of 1x1 nodes.
  Var SumScalars(std::span<const Var> parts);

  // Seeds d(root)=1 and propagates. root must be 1x1.
  void Backward(Var root);

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    double* sink = nullptr;
    std::function<void()> backward;
  };

  Var Push(Matrix value, bool requires_grad);
  Matrix& Grad(int id);
  bool Needs(Var v) const { return nodes_[v.id].requires_grad; }
  bool AnyNeeds(std::span<const Var> vs) const;

  std::vector<Node> nodes_;
};

}  // namespace copforge::ad

#endif  // COPFORGE_AUTODIFF_HPP_
