#include "copforge/autodiff.hpp"

#include <cassert>
#include <cmath>
#include <limits>

#include "copforge/errors.hpp"

namespace copforge::ad {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}  // namespace

Var Tape::Push(Matrix value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::Grad(int id) {
  Node& node = nodes_[id];
  if (node.grad.size() == 0) node.grad = Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

bool Tape::AnyNeeds(std::span<const Var> vs) const {
  for (Var v : vs) {
    if (Needs(v)) return true;
  }
  return false;
}

Var Tape::Constant(Matrix value) { return Push(std::move(value), false); }

Var Tape::Parameter(const Matrix& value, double* grad_sink) {
  Var v = Push(value, true);
  nodes_[v.id].sink = grad_sink;
  return v;
}

Var Tape::MatMul(Var a, Var b) {
  if (value(a).cols() != value(b).rows()) {
    throw DimensionMismatch("matmul " + std::to_string(value(a).rows()) + "x" +
                            std::to_string(value(a).cols()) + " by " +
                            std::to_string(value(b).rows()) + "x" +
                            std::to_string(value(b).cols()));
  }
  Matrix out = value(a) * value(b);
  Var c = Push(std::move(out), Needs(a) || Needs(b));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, b, c] {
      const Matrix& dc = nodes_[c.id].grad;
      if (Needs(a)) Grad(a.id).noalias() += dc * nodes_[b.id].value.transpose();
      if (Needs(b)) Grad(b.id).noalias() += nodes_[a.id].value.transpose() * dc;
    };
  }
  return c;
}

Var Tape::Add(Var a, Var b) {
  Var c = Push(value(a) + value(b), Needs(a) || Needs(b));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, b, c] {
      const Matrix& dc = nodes_[c.id].grad;
      if (Needs(a)) Grad(a.id) += dc;
      if (Needs(b)) Grad(b.id) += dc;
    };
  }
  return c;
}

Var Tape::AddRowBroadcast(Var a, Var row) {
  Matrix out = value(a);
  out.rowwise() += value(row).row(0);
  Var c = Push(std::move(out), Needs(a) || Needs(row));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, row, c] {
      const Matrix& dc = nodes_[c.id].grad;
      if (Needs(a)) Grad(a.id) += dc;
      if (Needs(row)) Grad(row.id).row(0) += dc.colwise().sum();
    };
  }
  return c;
}

Var Tape::Scale(Var a, double s) {
  Var c = Push(value(a) * s, Needs(a));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, c, s] { Grad(a.id) += nodes_[c.id].grad * s; };
  }
  return c;
}

Var Tape::Relu(Var a) {
  Var c = Push(value(a).cwiseMax(0.0), Needs(a));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, c] {
      const Matrix& x = nodes_[a.id].value;
      Grad(a.id) += (x.array() > 0.0).select(nodes_[c.id].grad, 0.0);
    };
  }
  return c;
}

Var Tape::ConcatCols(std::span<const Var> parts) {
  const Eigen::Index rows = value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (value(p).rows() != rows) throw DimensionMismatch("concat row count differs");
    cols += value(p).cols();
  }
  Matrix out(rows, cols);
  Eigen::Index offset = 0;
  for (Var p : parts) {
    out.middleCols(offset, value(p).cols()) = value(p);
    offset += value(p).cols();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  Var c = Push(std::move(out), AnyNeeds(parts));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, inputs, c] {
      const Matrix& dc = nodes_[c.id].grad;
      Eigen::Index off = 0;
      for (Var p : inputs) {
        const Eigen::Index w = nodes_[p.id].value.cols();
        if (Needs(p)) Grad(p.id) += dc.middleCols(off, w);
        off += w;
      }
    };
  }
  return c;
}

Var Tape::GatherRows(Var a, std::vector<int> rows) {
  const Matrix& x = value(a);
  Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(i) = x.row(rows[i]);
  Var c = Push(std::move(out), Needs(a));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, c, rows = std::move(rows)] {
      const Matrix& dc = nodes_[c.id].grad;
      Matrix& da = Grad(a.id);
      for (size_t i = 0; i < rows.size(); ++i) da.row(rows[i]) += dc.row(i);
    };
  }
  return c;
}

Var Tape::BatchNorm(Var x, Var gamma, Var beta, double eps, BatchStats* stats) {
  const Matrix& in = value(x);
  const double rows = static_cast<double>(in.rows());
  RowVector mean = in.colwise().mean();
  Matrix centered = in.rowwise() - mean;
  RowVector var = centered.array().square().colwise().sum() / rows;
  RowVector inv_std = (var.array() + eps).rsqrt();
  Matrix xhat = centered.array().rowwise() * inv_std.array();
  Matrix out = xhat.array().rowwise() * value(gamma).row(0).array();
  out.rowwise() += value(beta).row(0);
  if (stats) {
    stats->mean = mean;
    stats->var = var;
    stats->rows = static_cast<int>(in.rows());
  }
  Var c = Push(std::move(out), Needs(x) || Needs(gamma) || Needs(beta));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, x, gamma, beta, c, xhat = std::move(xhat),
                             inv_std = std::move(inv_std), rows] {
      const Matrix& dy = nodes_[c.id].grad;
      if (Needs(beta)) Grad(beta.id).row(0) += dy.colwise().sum();
      if (Needs(gamma)) {
        Grad(gamma.id).row(0) += (dy.array() * xhat.array()).matrix().colwise().sum();
      }
      if (Needs(x)) {
        Matrix dxhat = dy.array().rowwise() * nodes_[gamma.id].value.row(0).array();
        const RowVector sum_dxhat = dxhat.colwise().sum();
        const RowVector sum_dxhat_xhat =
            (dxhat.array() * xhat.array()).matrix().colwise().sum();
        Matrix dx = (dxhat * rows).rowwise() - sum_dxhat;
        dx.array() -= xhat.array().rowwise() * sum_dxhat_xhat.array();
        dx.array().rowwise() *= (inv_std.array() / rows);
        Grad(x.id) += dx;
      }
    };
  }
  return c;
}

Var Tape::BatchNormFixed(Var x, Var gamma, Var beta, const RowVector& mean,
                         const RowVector& var, double eps) {
  const RowVector inv_std = (var.array() + eps).rsqrt();
  const RowVector scale = inv_std.array() * value(gamma).row(0).array();
  Matrix xhat = (value(x).rowwise() - mean).array().rowwise() * inv_std.array();
  Matrix out = xhat.array().rowwise() * value(gamma).row(0).array();
  out.rowwise() += value(beta).row(0);
  Var c = Push(std::move(out), Needs(x) || Needs(gamma) || Needs(beta));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, x, gamma, beta, c, xhat = std::move(xhat), scale] {
      const Matrix& dy = nodes_[c.id].grad;
      if (Needs(beta)) Grad(beta.id).row(0) += dy.colwise().sum();
      if (Needs(gamma)) {
        Grad(gamma.id).row(0) += (dy.array() * xhat.array()).matrix().colwise().sum();
      }
      if (Needs(x)) Grad(x.id).array() += dy.array().rowwise() * scale.array();
    };
  }
  return c;
}

Var Tape::MultiHeadAttention(Var q, Var k, Var v, int heads, AttentionLayout layout) {
  const Matrix& Q = value(q);
  const Matrix& K = value(k);
  const Matrix& V = value(v);
  const Eigen::Index rows = Q.rows();
  const Eigen::Index dim = Q.cols();
  if (K.cols() != dim || V.cols() != dim || dim % heads != 0) {
    throw DimensionMismatch("attention width mismatch");
  }
  const Eigen::Index dk = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const bool masked = !layout.mask.empty();

  // probs[prob_offset[r] + h * count + j]
  std::vector<int> prob_offset(rows);
  int total = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    prob_offset[r] = total;
    total += heads * layout.key_count[r];
  }
  std::vector<double> probs(total, 0.0);
  Matrix out = Matrix::Zero(rows, dim);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const int begin = layout.key_begin[r];
    const int count = layout.key_count[r];
    const uint8_t* m = masked ? &layout.mask[layout.mask_offset[r]] : nullptr;
    for (int h = 0; h < heads; ++h) {
      double* p = &probs[prob_offset[r] + h * count];
      const auto qh = Q.row(r).segment(h * dk, dk);
      double max_score = kNegInf;
      for (int j = 0; j < count; ++j) {
        if (m && !m[j]) continue;
        p[j] = scale * qh.dot(K.row(begin + j).segment(h * dk, dk));
        max_score = std::max(max_score, p[j]);
      }
      if (max_score == kNegInf) continue;  // fully masked row: zero output
      double z = 0.0;
      for (int j = 0; j < count; ++j) {
        if (m && !m[j]) continue;
        p[j] = std::exp(p[j] - max_score);
        z += p[j];
      }
      auto oh = out.row(r).segment(h * dk, dk);
      for (int j = 0; j < count; ++j) {
        if (m && !m[j]) continue;
        p[j] /= z;
        oh += p[j] * V.row(begin + j).segment(h * dk, dk);
      }
    }
  }
  Var c = Push(std::move(out), Needs(q) || Needs(k) || Needs(v));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, q, k, v, c, heads, dk, scale, masked,
                             layout = std::move(layout), probs = std::move(probs),
                             prob_offset = std::move(prob_offset)] {
      const Matrix& dout = nodes_[c.id].grad;
      const Matrix& Qv = nodes_[q.id].value;
      const Matrix& Kv = nodes_[k.id].value;
      const Matrix& Vv = nodes_[v.id].value;
      Matrix* dq = Needs(q) ? &Grad(q.id) : nullptr;
      Matrix* dkm = Needs(k) ? &Grad(k.id) : nullptr;
      Matrix* dv = Needs(v) ? &Grad(v.id) : nullptr;
      std::vector<double> dscore;
      for (Eigen::Index r = 0; r < dout.rows(); ++r) {
        const int begin = layout.key_begin[r];
        const int count = layout.key_count[r];
        const uint8_t* m = masked ? &layout.mask[layout.mask_offset[r]] : nullptr;
        dscore.assign(count, 0.0);
        for (int h = 0; h < heads; ++h) {
          const double* p = &probs[prob_offset[r] + h * count];
          const auto doh = dout.row(r).segment(h * dk, dk);
          double weighted = 0.0;
          for (int j = 0; j < count; ++j) {
            if (m && !m[j]) continue;
            dscore[j] = doh.dot(Vv.row(begin + j).segment(h * dk, dk));
            weighted += p[j] * dscore[j];
            if (dv) dv->row(begin + j).segment(h * dk, dk) += p[j] * doh;
          }
          for (int j = 0; j < count; ++j) {
            if (m && !m[j]) continue;
            const double ds = p[j] * (dscore[j] - weighted) * scale;
            if (dq) dq->row(r).segment(h * dk, dk) += ds * Kv.row(begin + j).segment(h * dk, dk);
            if (dkm) dkm->row(begin + j).segment(h * dk, dk) += ds * Qv.row(r).segment(h * dk, dk);
          }
        }
      }
    };
  }
  return c;
}

Var Tape::ClippedCompatibility(Var g, Var h, std::vector<int> key_begin, int count,
                               double scale, double clip) {
  const Matrix& G = value(g);
  const Matrix& H = value(h);
  if (G.cols() != H.cols()) throw DimensionMismatch("compatibility width mismatch");
  const Eigen::Index rows = G.rows();
  Matrix tanh_z(rows, count);
  for (Eigen::Index r = 0; r < rows; ++r) {
    tanh_z.row(r) = (H.middleRows(key_begin[r], count) * G.row(r).transpose() * scale)
                        .array()
                        .tanh()
                        .transpose();
  }
  Matrix out = tanh_z * clip;
  Var c = Push(std::move(out), Needs(g) || Needs(h));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, g, h, c, key_begin = std::move(key_begin), count, scale,
                             clip, tanh_z = std::move(tanh_z)] {
      const Matrix& dout = nodes_[c.id].grad;
      const Matrix dz =
          (dout.array() * (1.0 - tanh_z.array().square()) * (clip * scale)).matrix();
      Matrix* dg = Needs(g) ? &Grad(g.id) : nullptr;
      Matrix* dh = Needs(h) ? &Grad(h.id) : nullptr;
      const Matrix& Gv = nodes_[g.id].value;
      const Matrix& Hv = nodes_[h.id].value;
      for (Eigen::Index r = 0; r < dz.rows(); ++r) {
        if (dg) dg->row(r).noalias() += dz.row(r) * Hv.middleRows(key_begin[r], count);
        if (dh) dh->middleRows(key_begin[r], count).noalias() += dz.row(r).transpose() * Gv.row(r);
      }
    };
  }
  return c;
}

Var Tape::MaskedLogSoftmax(Var logits, std::vector<uint8_t> mask) {
  const Matrix& u = value(logits);
  Matrix out(u.rows(), u.cols());
  for (Eigen::Index r = 0; r < u.rows(); ++r) {
    const uint8_t* m = &mask[r * u.cols()];
    double max_u = kNegInf;
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
      if (m[j]) max_u = std::max(max_u, u(r, j));
    }
    if (max_u == kNegInf) {
      throw CopError("all_masked", "log-softmax over a fully masked row");
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
      if (m[j]) z += std::exp(u(r, j) - max_u);
    }
    const double log_z = max_u + std::log(z);
    for (Eigen::Index j = 0; j < u.cols(); ++j) {
      out(r, j) = m[j] ? u(r, j) - log_z : kNegInf;
    }
  }
  Var c = Push(std::move(out), Needs(logits));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, logits, c, mask = std::move(mask)] {
      const Matrix& dout = nodes_[c.id].grad;
      const Matrix& lp = nodes_[c.id].value;
      Matrix& du = Grad(logits.id);
      for (Eigen::Index r = 0; r < dout.rows(); ++r) {
        const uint8_t* m = &mask[r * dout.cols()];
        double total = 0.0;
        for (Eigen::Index j = 0; j < dout.cols(); ++j) {
          if (m[j]) total += dout(r, j);
        }
        for (Eigen::Index j = 0; j < dout.cols(); ++j) {
          if (m[j]) du(r, j) += dout(r, j) - std::exp(lp(r, j)) * total;
        }
      }
    };
  }
  return c;
}

Var Tape::Pick(Var a, std::vector<int> rows, std::vector<int> cols) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), 1);
  for (size_t i = 0; i < rows.size(); ++i) out(i, 0) = value(a)(rows[i], cols[i]);
  Var c = Push(std::move(out), Needs(a));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, c, rows = std::move(rows), cols = std::move(cols)] {
      const Matrix& dc = nodes_[c.id].grad;
      Matrix& da = Grad(a.id);
      for (size_t i = 0; i < rows.size(); ++i) da(rows[i], cols[i]) += dc(i, 0);
    };
  }
  return c;
}

Var Tape::WeightedSum(Var a, std::vector<double> w) {
  const Matrix& x = value(a);
  double total = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) total += w[i] * x(i, 0);
  Var c = Push(Matrix::Constant(1, 1, total), Needs(a));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, a, c, w = std::move(w)] {
      const double dc = nodes_[c.id].grad(0, 0);
      Matrix& da = Grad(a.id);
      for (Eigen::Index i = 0; i < da.rows(); ++i) da(i, 0) += w[i] * dc;
    };
  }
  return c;
}

Var Tape::SumScalars(std::span<const Var> parts) {
  double total = 0.0;
  for (Var p : parts) total += value(p)(0, 0);
  std::vector<Var> inputs(parts.begin(), parts.end());
  Var c = Push(Matrix::Constant(1, 1, total), AnyNeeds(parts));
  if (Needs(c)) {
    nodes_[c.id].backward = [this, inputs, c] {
      const double dc = nodes_[c.id].grad(0, 0);
      for (Var p : inputs) {
        if (Needs(p)) Grad(p.id)(0, 0) += dc;
      }
    };
  }
  return c;
}

void Tape::Backward(Var root) {
  if (value(root).size() != 1) throw InvalidArgument("backward root must be a scalar");
  if (!Needs(root)) return;
  Grad(root.id)(0, 0) += 1.0;
  for (int id = root.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.grad.size() == 0) continue;
    if (node.backward) node.backward();
    if (node.sink) {
      MatrixMap sink(node.sink, node.value.rows(), node.value.cols());
      sink += node.grad;
    }
  }
}

}  // namespace copforge::ad
