#include "flip/autodiff.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <utility>

namespace flip {

namespace {

void check(bool ok, const char* msg) {
  if (!ok) throw std::logic_error(std::string("tape: ") + msg);
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Row softmax over the leading `n` entries, in place into `out`.
void softmax_head(const Eigen::Ref<const Eigen::RowVectorXd>& logits, int n,
                  Eigen::Ref<Eigen::RowVectorXd> out) {
  double m = logits.head(n).maxCoeff();
  out.head(n) = (logits.head(n).array() - m).exp();
  out.head(n) /= out.head(n).sum();
}

}  // namespace

Var Tape::make(Matrix value, bool needs_grad) {
  check(!swept_, "graph extended after backward()");
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Parameter& p) {
  check(!swept_, "graph extended after backward()");
  Node n;
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  nodes_[id].backprop = [this, id] {
    nodes_[id].param->grad += nodes_[id].grad;
  };
  return Var{id};
}

Var Tape::constant(Matrix m) { return make(std::move(m), false); }

const Matrix& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  return n.param ? n.param->value : n.value;
}

Matrix& Tape::grad_buf(int id) {
  Node& n = nodes_[id];
  if (!n.grad_live) {
    const Matrix& v = n.param ? n.param->value : n.value;
    n.grad = Matrix::Zero(v.rows(), v.cols());
    n.grad_live = true;
  }
  return n.grad;
}

void Tape::accum(int id, const Matrix& g) {
  if (!nodes_[id].needs_grad) return;
  grad_buf(id) += g;
}

void Tape::backward(Var root) {
  check(root.valid(), "backward on invalid var");
  check(value(root).rows() == 1 && value(root).cols() == 1,
        "backward root must be 1x1");
  check(!swept_, "backward called twice");
  swept_ = true;
  grad_buf(root.id)(0, 0) = 1.0;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad_live && n.backprop) n.backprop();
  }
}

// ---------------------------------------------------------------------------
// elementwise / broadcast

Var Tape::add(Var a, Var b) {
  check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
        "add: shape mismatch");
  Var out = make(value(a) + value(b), needs(a) || needs(b));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, b, out] {
    accum(a.id, nodes_[out.id].grad);
    accum(b.id, nodes_[out.id].grad);
  };
  return out;
}

Var Tape::add_rowvec(Var a, Var bias) {
  check(value(bias).rows() == 1 && value(bias).cols() == value(a).cols(),
        "add_rowvec: bias must be 1 x cols(a)");
  Matrix y = value(a);
  y.rowwise() += value(bias).row(0);
  Var out = make(std::move(y), needs(a) || needs(bias));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, bias, out] {
    const Matrix& g = nodes_[out.id].grad;
    accum(a.id, g);
    accum(bias.id, g.colwise().sum());
  };
  return out;
}

Var Tape::sub(Var a, Var b) {
  check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
        "sub: shape mismatch");
  Var out = make(value(a) - value(b), needs(a) || needs(b));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, b, out] {
    accum(a.id, nodes_[out.id].grad);
    accum(b.id, -nodes_[out.id].grad);
  };
  return out;
}

Var Tape::mul(Var a, Var b) {
  check(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
        "mul: shape mismatch");
  Var out = make(value(a).cwiseProduct(value(b)), needs(a) || needs(b));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, b, out] {
    const Matrix& g = nodes_[out.id].grad;
    accum(a.id, g.cwiseProduct(value(b)));
    accum(b.id, g.cwiseProduct(value(a)));
  };
  return out;
}

Var Tape::scale(Var a, double s) {
  Var out = make(value(a) * s, needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, s, out] {
    accum(a.id, nodes_[out.id].grad * s);
  };
  return out;
}

Var Tape::scale_by(Var a, Var s) {
  check(value(s).rows() == 1 && value(s).cols() == 1, "scale_by: s must be 1x1");
  double sv = value(s)(0, 0);
  Var out = make(value(a) * sv, needs(a) || needs(s));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, s, sv, out] {
    const Matrix& g = nodes_[out.id].grad;
    accum(a.id, g * sv);
    Matrix ds(1, 1);
    ds(0, 0) = g.cwiseProduct(value(a)).sum();
    accum(s.id, ds);
  };
  return out;
}

Var Tape::sigmoid(Var a) {
  Matrix y = value(a).unaryExpr([](double x) { return sigmoid_scalar(x); });
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    const Matrix& y = nodes_[out.id].value;
    accum(a.id, nodes_[out.id].grad.cwiseProduct(
                    y.cwiseProduct(Matrix::Ones(y.rows(), y.cols()) - y)));
  };
  return out;
}

Var Tape::relu(Var a) {
  Var out = make(value(a).cwiseMax(0.0), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    Matrix mask = (value(a).array() > 0.0).cast<double>();
    accum(a.id, nodes_[out.id].grad.cwiseProduct(mask));
  };
  return out;
}

Var Tape::gelu(Var a) {
  Matrix y = value(a).unaryExpr(
      [](double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); });
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    Matrix d = value(a).unaryExpr([](double x) {
      double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return cdf + x * pdf;
    });
    accum(a.id, nodes_[out.id].grad.cwiseProduct(d));
  };
  return out;
}

Var Tape::softplus(Var a) {
  Matrix y = value(a).unaryExpr([](double x) { return softplus_scalar(x); });
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    Matrix d = value(a).unaryExpr([](double x) { return sigmoid_scalar(x); });
    accum(a.id, nodes_[out.id].grad.cwiseProduct(d));
  };
  return out;
}

Var Tape::dropout(Var a, const Matrix& keep_mask, double keep_prob) {
  check(keep_mask.rows() == value(a).rows() && keep_mask.cols() == value(a).cols(),
        "dropout: mask shape mismatch");
  check(keep_prob > 0.0, "dropout: keep_prob must be positive");
  Var out = make(value(a).cwiseProduct(keep_mask) / keep_prob, needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  Matrix mask = keep_mask;  // closure keeps its own copy
  nodes_[out.id].backprop = [this, a, out, mask, keep_prob] {
    accum(a.id, nodes_[out.id].grad.cwiseProduct(mask) / keep_prob);
  };
  return out;
}

// ---------------------------------------------------------------------------
// shape / gather

Var Tape::transpose(Var a) {
  Var out = make(value(a).transpose(), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    accum(a.id, nodes_[out.id].grad.transpose());
  };
  return out;
}

Var Tape::concat_cols(Var a, Var b) {
  check(value(a).rows() == value(b).rows(), "concat_cols: row mismatch");
  Matrix y(value(a).rows(), value(a).cols() + value(b).cols());
  y << value(a), value(b);
  Var out = make(std::move(y), needs(a) || needs(b));
  if (!nodes_[out.id].needs_grad) return out;
  long ca = value(a).cols();
  long cb = value(b).cols();
  nodes_[out.id].backprop = [this, a, b, ca, cb, out] {
    const Matrix& g = nodes_[out.id].grad;
    accum(a.id, g.leftCols(ca));
    accum(b.id, g.rightCols(cb));
  };
  return out;
}

Var Tape::slice_cols(Var a, int start, int n) {
  check(start >= 0 && n >= 0 && start + n <= value(a).cols(),
        "slice_cols: out of range");
  Var out = make(value(a).middleCols(start, n), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, start, n, out] {
    Matrix g = Matrix::Zero(value(a).rows(), value(a).cols());
    g.middleCols(start, n) = nodes_[out.id].grad;
    accum(a.id, g);
  };
  return out;
}

Var Tape::select_rows(Var a, std::vector<int> rows) {
  Matrix y(static_cast<long>(rows.size()), value(a).cols());
  for (size_t i = 0; i < rows.size(); ++i) {
    check(rows[i] >= 0 && rows[i] < value(a).rows(), "select_rows: out of range");
    y.row(static_cast<long>(i)) = value(a).row(rows[i]);
  }
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, rows = std::move(rows), out] {
    Matrix g = Matrix::Zero(value(a).rows(), value(a).cols());
    const Matrix& go = nodes_[out.id].grad;
    for (size_t i = 0; i < rows.size(); ++i)
      g.row(rows[i]) += go.row(static_cast<long>(i));
    accum(a.id, g);
  };
  return out;
}

Var Tape::reshape_rows(Var a, int group) {
  const Matrix& x = value(a);
  check(group > 0 && x.rows() % group == 0, "reshape_rows: bad group");
  long R = x.rows() / group, C = x.cols();
  Matrix y(R, group * C);
  for (long r = 0; r < R; ++r)
    for (int j = 0; j < group; ++j)
      y.block(r, j * C, 1, C) = x.row(r * group + j);
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, group, R, C, out] {
    const Matrix& go = nodes_[out.id].grad;
    Matrix g(R * group, C);
    for (long r = 0; r < R; ++r)
      for (int j = 0; j < group; ++j)
        g.row(r * group + j) = go.block(r, j * C, 1, C);
    accum(a.id, g);
  };
  return out;
}

Var Tape::group_sum_rows(Var a, int group) {
  const Matrix& x = value(a);
  check(group > 0 && x.rows() % group == 0, "group_sum_rows: bad group");
  long R = x.rows() / group, C = x.cols();
  Matrix y = Matrix::Zero(R, C);
  for (long r = 0; r < R; ++r)
    for (int j = 0; j < group; ++j) y.row(r) += x.row(r * group + j);
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, group, R, C, out] {
    const Matrix& go = nodes_[out.id].grad;
    Matrix g(R * group, C);
    for (long r = 0; r < R; ++r)
      for (int j = 0; j < group; ++j) g.row(r * group + j) = go.row(r);
    accum(a.id, g);
  };
  return out;
}

// ---------------------------------------------------------------------------
// reductions

Var Tape::sum(Var a) {
  Matrix y(1, 1);
  y(0, 0) = value(a).sum();
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    double g = nodes_[out.id].grad(0, 0);
    accum(a.id, Matrix::Constant(value(a).rows(), value(a).cols(), g));
  };
  return out;
}

Var Tape::row_sum(Var a) {
  Var out = make(value(a).rowwise().sum(), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    accum(a.id, nodes_[out.id].grad.col(0).replicate(1, value(a).cols()));
  };
  return out;
}

Var Tape::mean(Var a) {
  Matrix y(1, 1);
  y(0, 0) = value(a).mean();
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, out] {
    double g = nodes_[out.id].grad(0, 0) / static_cast<double>(value(a).size());
    accum(a.id, Matrix::Constant(value(a).rows(), value(a).cols(), g));
  };
  return out;
}

// ---------------------------------------------------------------------------
// linear algebra

Var Tape::matmul(Var a, Var b) {
  check(value(a).cols() == value(b).rows(), "matmul: inner dim mismatch");
  Var out = make(value(a) * value(b), needs(a) || needs(b));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, b, out] {
    const Matrix& g = nodes_[out.id].grad;
    accum(a.id, g * value(b).transpose());
    accum(b.id, value(a).transpose() * g);
  };
  return out;
}

// ---------------------------------------------------------------------------
// fused blocks

Var Tape::embedding(Parameter& table, std::vector<int> ids) {
  Matrix y(static_cast<long>(ids.size()), table.value.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    check(ids[i] >= 0 && ids[i] < table.value.rows(), "embedding: id out of range");
    y.row(static_cast<long>(i)) = table.value.row(ids[i]);
  }
  Var out = make(std::move(y), true);
  Parameter* tp = &table;
  nodes_[out.id].backprop = [this, tp, ids = std::move(ids), out] {
    const Matrix& g = nodes_[out.id].grad;
    for (size_t i = 0; i < ids.size(); ++i)
      tp->grad.row(ids[i]) += g.row(static_cast<long>(i));
  };
  return out;
}

Var Tape::softmax_xent(Var logits, std::vector<int> targets) {
  const Matrix& x = value(logits);
  check(static_cast<long>(targets.size()) == x.rows(),
        "softmax_xent: one target per row");
  Matrix y(x.rows(), 1);
  for (long r = 0; r < x.rows(); ++r) {
    check(targets[r] >= 0 && targets[r] < x.cols(), "softmax_xent: bad target");
    double m = x.row(r).maxCoeff();
    double lse = m + std::log((x.row(r).array() - m).exp().sum());
    y(r, 0) = lse - x(r, targets[r]);
  }
  Var out = make(std::move(y), needs(logits));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, logits, targets = std::move(targets), out] {
    const Matrix& x = value(logits);
    const Matrix& go = nodes_[out.id].grad;
    Matrix g(x.rows(), x.cols());
    Eigen::RowVectorXd p(x.cols());
    for (long r = 0; r < x.rows(); ++r) {
      softmax_head(x.row(r), static_cast<int>(x.cols()), p);
      p(targets[r]) -= 1.0;
      g.row(r) = go(r, 0) * p;
    }
    accum(logits.id, g);
  };
  return out;
}

Var Tape::layer_norm(Var a, Var gain, Var bias, double eps) {
  const Matrix& x = value(a);
  check(value(gain).rows() == 1 && value(gain).cols() == x.cols(), "layer_norm: gain");
  check(value(bias).rows() == 1 && value(bias).cols() == x.cols(), "layer_norm: bias");
  long R = x.rows(), C = x.cols();
  Matrix xhat(R, C);
  Eigen::VectorXd inv_std(R);
  for (long r = 0; r < R; ++r) {
    double mu = x.row(r).mean();
    double var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = xhat;
  y.array().rowwise() *= value(gain).row(0).array();
  y.rowwise() += value(bias).row(0);
  Var out = make(std::move(y), needs(a) || needs(gain) || needs(bias));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, gain, bias, xhat = std::move(xhat),
                             inv_std = std::move(inv_std), out] {
    const Matrix& go = nodes_[out.id].grad;
    accum(gain.id, go.cwiseProduct(xhat).colwise().sum());
    accum(bias.id, go.colwise().sum());
    if (!needs(a)) return;
    long R = xhat.rows(), C = xhat.cols();
    Matrix dxhat = go;
    dxhat.array().rowwise() *= value(gain).row(0).array();
    Matrix g(R, C);
    for (long r = 0; r < R; ++r) {
      double m1 = dxhat.row(r).mean();
      double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
      g.row(r) =
          (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
    }
    accum(a.id, g);
  };
  return out;
}

Var Tape::l2_normalize_rows(Var a, double eps) {
  const Matrix& x = value(a);
  long R = x.rows(), C = x.cols();
  Eigen::VectorXd inv_norm(R);
  Matrix y(R, C);
  for (long r = 0; r < R; ++r) {
    inv_norm(r) = 1.0 / std::sqrt(x.row(r).squaredNorm() + eps);
    y.row(r) = x.row(r) * inv_norm(r);
  }
  Var out = make(std::move(y), needs(a));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, a, inv_norm = std::move(inv_norm), out] {
    const Matrix& x = value(a);
    const Matrix& yv = nodes_[out.id].value;
    const Matrix& go = nodes_[out.id].grad;
    Matrix g(x.rows(), x.cols());
    for (long r = 0; r < x.rows(); ++r) {
      double dot = go.row(r).dot(yv.row(r));
      g.row(r) = (go.row(r) - dot * yv.row(r)) * inv_norm(r);
    }
    accum(a.id, g);
  };
  return out;
}

Var Tape::attention(Var q, Var k, Var v, const SeqLayout& layout, int n_heads,
                    AttentionProbe* probe) {
  const Matrix& Q = value(q);
  const Matrix& K = value(k);
  const Matrix& V = value(v);
  long D = Q.cols();
  check(K.cols() == D && V.cols() == D, "attention: dim mismatch");
  check(Q.rows() == layout.rows(), "attention: layout mismatch");
  check(n_heads > 0 && D % n_heads == 0, "attention: heads must divide dim");
  long dh = D / n_heads;
  double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix y = Matrix::Zero(Q.rows(), D);
  // probs[b * n_heads + h]: (len x len) attention matrix
  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(static_cast<size_t>(layout.batch) * n_heads);
  for (int b = 0; b < layout.batch; ++b) {
    int len = layout.lengths[b];
    long r0 = layout.row(b, 0);
    for (int h = 0; h < n_heads; ++h) {
      Matrix Qh = Q.block(r0, h * dh, len, dh);
      Matrix Kh = K.block(r0, h * dh, len, dh);
      Matrix S = Qh * Kh.transpose() * inv_scale;
      Matrix P(len, len);
      for (int r = 0; r < len; ++r) {
        Eigen::RowVectorXd row = S.row(r);
        double m = row.maxCoeff();
        Eigen::RowVectorXd e = (row.array() - m).exp();
        P.row(r) = e / e.sum();
      }
      y.block(r0, h * dh, len, dh) = P * V.block(r0, h * dh, len, dh);
      probs->push_back(std::move(P));
    }
  }
  if (probe) probe->probs.insert(probe->probs.end(), probs->begin(), probs->end());

  Var out = make(std::move(y), needs(q) || needs(k) || needs(v));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, q, k, v, layout, n_heads, dh, inv_scale,
                             probs, out] {
    const Matrix& Q = value(q);
    const Matrix& K = value(k);
    const Matrix& V = value(v);
    const Matrix& go = nodes_[out.id].grad;
    Matrix gq = Matrix::Zero(Q.rows(), Q.cols());
    Matrix gk = Matrix::Zero(K.rows(), K.cols());
    Matrix gv = Matrix::Zero(V.rows(), V.cols());
    for (int b = 0; b < layout.batch; ++b) {
      int len = layout.lengths[b];
      long r0 = layout.row(b, 0);
      for (int h = 0; h < n_heads; ++h) {
        const Matrix& P = (*probs)[static_cast<size_t>(b) * n_heads + h];
        Matrix Vh = V.block(r0, h * dh, len, dh);
        Matrix dY = go.block(r0, h * dh, len, dh);
        Matrix dP = dY * Vh.transpose();
        gv.block(r0, h * dh, len, dh) += P.transpose() * dY;
        // softmax backward per row: dS = P .* (dP - rowsum(dP .* P))
        Matrix dS(len, len);
        for (int r = 0; r < len; ++r) {
          double dot = dP.row(r).dot(P.row(r));
          dS.row(r) = P.row(r).cwiseProduct((dP.row(r).array() - dot).matrix());
        }
        dS *= inv_scale;
        gq.block(r0, h * dh, len, dh) += dS * K.block(r0, h * dh, len, dh);
        gk.block(r0, h * dh, len, dh) += dS.transpose() * Q.block(r0, h * dh, len, dh);
      }
    }
    accum(q.id, gq);
    accum(k.id, gk);
    accum(v.id, gv);
  };
  return out;
}

Var Tape::cross_attention(Var query, Var tokens, const SeqLayout& layout,
                          double scale, std::vector<Matrix>* probe) {
  const Matrix& Qm = value(query);
  const Matrix& W = value(tokens);
  check(Qm.cols() == W.cols(), "cross_attention: dim mismatch");
  check(Qm.rows() == layout.batch, "cross_attention: one query row per sample");
  check(W.rows() == layout.rows(), "cross_attention: layout mismatch");
  long D = W.cols();

  Matrix y(layout.batch, D);
  auto probs = std::make_shared<std::vector<Eigen::RowVectorXd>>(layout.batch);
  for (int b = 0; b < layout.batch; ++b) {
    int len = layout.lengths[b];
    long r0 = layout.row(b, 0);
    Eigen::RowVectorXd s = (Qm.row(b) * W.middleRows(r0, len).transpose()) * scale;
    double m = s.maxCoeff();
    Eigen::RowVectorXd e = (s.array() - m).exp();
    (*probs)[b] = e / e.sum();
    y.row(b) = (*probs)[b] * W.middleRows(r0, len);
  }
  if (probe) {
    probe->clear();
    for (auto& p : *probs) probe->push_back(p);
  }

  Var out = make(std::move(y), needs(query) || needs(tokens));
  if (!nodes_[out.id].needs_grad) return out;
  nodes_[out.id].backprop = [this, query, tokens, layout, scale, probs, out] {
    const Matrix& Qm = value(query);
    const Matrix& W = value(tokens);
    const Matrix& go = nodes_[out.id].grad;
    Matrix gq = Matrix::Zero(Qm.rows(), Qm.cols());
    Matrix gw = Matrix::Zero(W.rows(), W.cols());
    for (int b = 0; b < layout.batch; ++b) {
      int len = layout.lengths[b];
      long r0 = layout.row(b, 0);
      const Eigen::RowVectorXd& p = (*probs)[b];
      Eigen::RowVectorXd du = go.row(b);
      Eigen::RowVectorXd dp = du * W.middleRows(r0, len).transpose();
      gw.middleRows(r0, len) += p.transpose() * du;
      double dot = dp.dot(p);
      Eigen::RowVectorXd ds = p.cwiseProduct((dp.array() - dot).matrix()) * scale;
      gq.row(b) += ds * W.middleRows(r0, len);
      gw.middleRows(r0, len) += ds.transpose() * Qm.row(b);
    }
    accum(query.id, gq);
    accum(tokens.id, gw);
  };
  return out;
}

Var Tape::candidate_scores(Var hidden, Parameter& table,
                           std::vector<std::vector<int>> ids) {
  const Matrix& H = value(hidden);
  check(table.value.cols() == H.cols(), "candidate_scores: dim mismatch");
  check(static_cast<long>(ids.size()) == H.rows(),
        "candidate_scores: one id row per hidden row");
  long C = ids.empty() ? 0 : static_cast<long>(ids[0].size());
  Matrix y(H.rows(), C);
  for (long r = 0; r < H.rows(); ++r) {
    check(static_cast<long>(ids[r].size()) == C, "candidate_scores: ragged ids");
    for (long c = 0; c < C; ++c) {
      int id = ids[r][c];
      check(id >= 0 && id < table.value.rows(), "candidate_scores: id out of range");
      y(r, c) = H.row(r).dot(table.value.row(id));
    }
  }
  Var out = make(std::move(y), true);
  Parameter* tp = &table;
  nodes_[out.id].backprop = [this, hidden, tp, ids = std::move(ids), out] {
    const Matrix& H = value(hidden);
    const Matrix& go = nodes_[out.id].grad;
    Matrix gh = Matrix::Zero(H.rows(), H.cols());
    for (long r = 0; r < H.rows(); ++r) {
      for (long c = 0; c < go.cols(); ++c) {
        double g = go(r, c);
        if (g == 0.0) continue;
        gh.row(r) += g * tp->value.row(ids[r][c]);
        tp->grad.row(ids[r][c]) += g * H.row(r);
      }
    }
    accum(hidden.id, gh);
  };
  return out;
}

}  // namespace flip
