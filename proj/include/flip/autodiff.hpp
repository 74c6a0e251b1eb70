#pragma once

#include <Eigen/Core>
#include <functional>
#include <string>
#include <vector>

namespace flip {

using Matrix = Eigen::MatrixXd;

// A trainable tensor. Gradients accumulate across backward passes until
// zero_grad(); the optimizer owns the update rule.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)),
        grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(); }
  long size() const { return value.size(); }
};

// Handle into a Tape node.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Describes a batch of padded sequences stored as one flat matrix whose row
// (b * max_len + t) holds token t of sequence b. lengths[b] <= max_len.
struct SeqLayout {
  int batch = 0;
  int max_len = 0;
  std::vector<int> lengths;

  int rows() const { return batch * max_len; }
  int row(int b, int t) const { return b * max_len + t; }
};

// Test probe: attention probabilities captured during forward passes, one
// (len x len) matrix per (sample, head), sample-major. Each attention() call
// appends, so stacked layers accumulate call-major.
struct AttentionProbe {
  std::vector<Matrix> probs;
};

// Reverse-mode tape over dense double matrices. One tape per training step:
// build the graph through the op methods, call backward() on a 1x1 result,
// then read accumulated gradients off the Parameters.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf bound to a Parameter; backward adds into p.grad.
  Var leaf(Parameter& p);
  // Constant; no gradient flows into it.
  Var constant(Matrix m);

  const Matrix& value(Var v) const;

  // --- elementwise / broadcast ---
  Var add(Var a, Var b);            // same shape
  Var add_rowvec(Var a, Var bias);  // bias 1xC broadcast over rows
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);            // Hadamard
  Var scale(Var a, double s);
  Var scale_by(Var a, Var s);       // s 1x1
  Var neg(Var a) { return scale(a, -1.0); }
  Var sigmoid(Var a);
  Var relu(Var a);
  Var gelu(Var a);                  // exact erf form
  Var softplus(Var a);              // log(1 + e^x), overflow-safe
  Var dropout(Var a, const Matrix& keep_mask, double keep_prob);

  // --- shape / gather ---
  Var transpose(Var a);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int start, int n);
  Var select_rows(Var a, std::vector<int> rows);     // duplicates allowed
  Var reshape_rows(Var a, int group);                // (R,C) -> (R/group, group*C)
  Var group_sum_rows(Var a, int group);              // (R,C) -> (R/group, C)

  // --- reductions ---
  Var sum(Var a);       // 1x1
  Var row_sum(Var a);   // Rx1
  Var mean(Var a);      // 1x1

  // --- linear algebra ---
  Var matmul(Var a, Var b);

  // --- fused building blocks ---
  // Embedding lookup: row i of the result is table.value.row(ids[i]).
  Var embedding(Parameter& table, std::vector<int> ids);

  // Per-row softmax cross-entropy against integer targets -> Rx1 losses.
  Var softmax_xent(Var logits, std::vector<int> targets);

  // Row layer norm with trainable gain/bias (1xC each).
  Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);

  // Rows scaled to unit L2 norm (smoothed: x / sqrt(|x|^2 + eps)).
  Var l2_normalize_rows(Var a, double eps = 1e-12);

  // Bidirectional multi-head self-attention over padded sequences.
  // q, k, v: (B*L_max) x D with D divisible by n_heads. Padded query rows
  // are zeroed; padded keys are excluded from every softmax.
  Var attention(Var q, Var k, Var v, const SeqLayout& layout, int n_heads,
                AttentionProbe* probe = nullptr);

  // Single-query cross attention: for each sample b, softmax over that
  // sample's valid token rows of `tokens` keyed by query.row(b), returning
  // the attention-weighted token mixture. query: BxD, tokens: (B*L_max)xD.
  Var cross_attention(Var query, Var tokens, const SeqLayout& layout,
                      double scale, std::vector<Matrix>* probe = nullptr);

  // scores(r, c) = hidden.row(r) . table.value.row(ids[r][c]).
  Var candidate_scores(Var hidden, Parameter& table,
                       std::vector<std::vector<int>> ids);

  // Seeds d(root)=1 and sweeps the tape in reverse creation order.
  // root must be 1x1. May be called once per tape.
  void backward(Var root);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;              // lazily sized on first accumulation
    Parameter* param = nullptr;
    std::function<void()> backprop;
    bool needs_grad = false;
    bool grad_live = false;
  };

  Var make(Matrix value, bool needs_grad);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }
  Matrix& grad_buf(int id);
  void accum(int id, const Matrix& g);

  std::vector<Node> nodes_;
  bool swept_ = false;
};

}  // namespace flip
