#include "flip/text_tower.hpp"

#include <algorithm>

namespace flip {

TextTower::TextTower(const EncoderSpec& spec, unsigned long long seed)
    : spec_(spec) {
  if (spec_.vocab < Tokenizer::kNumSpecials)
    throw ConfigError("encoder vocab must cover the special tokens");
  if (spec_.d_text < 1 || spec_.n_layers < 1 || spec_.n_heads < 1)
    throw ConfigError("encoder dims must be positive");
  if (spec_.d_text % spec_.n_heads != 0)
    throw ConfigError("d_text must be divisible by n_heads");
  if (spec_.d_ff == 0) spec_.d_ff = 4 * spec_.d_text;
  if (!(spec_.dropout >= 0.0 && spec_.dropout < 1.0))
    throw ConfigError("dropout must lie in [0, 1)");

  Rng rng(mix_seed(seed, 0x7e87));
  const int d = spec_.d_text;

  params.add("tok/emb", uniform_init(rng, spec_.vocab, d, -0.01, 0.01));
  params.add("pos/emb", uniform_init(rng, spec_.l_max, d, -0.01, 0.01));
  for (int l = 0; l < spec_.n_layers; ++l) {
    std::string p = "layer/" + std::to_string(l) + "/";
    params.add(p + "ln1/g", Matrix::Ones(1, d));
    params.add(p + "ln1/b", Matrix::Zero(1, d));
    params.add(p + "wq", xavier_init(rng, d, d));
    params.add(p + "bq", Matrix::Zero(1, d));
    params.add(p + "wk", xavier_init(rng, d, d));
    params.add(p + "bk", Matrix::Zero(1, d));
    params.add(p + "wv", xavier_init(rng, d, d));
    params.add(p + "bv", Matrix::Zero(1, d));
    params.add(p + "wo", xavier_init(rng, d, d));
    params.add(p + "bo", Matrix::Zero(1, d));
    params.add(p + "ln2/g", Matrix::Ones(1, d));
    params.add(p + "ln2/b", Matrix::Zero(1, d));
    params.add(p + "ff/w1", xavier_init(rng, d, spec_.d_ff));
    params.add(p + "ff/b1", Matrix::Zero(1, spec_.d_ff));
    params.add(p + "ff/w2", xavier_init(rng, spec_.d_ff, d));
    params.add(p + "ff/b2", Matrix::Zero(1, d));
  }
  params.add("final_ln/g", Matrix::Ones(1, d));
  params.add("final_ln/b", Matrix::Zero(1, d));
}

Var TextTower::maybe_dropout(Tape& t, Var x, Rng* rng) const {
  if (!rng || spec_.dropout <= 0.0) return x;
  double keep = 1.0 - spec_.dropout;
  const Matrix& v = t.value(x);
  Matrix mask(v.rows(), v.cols());
  for (long i = 0; i < v.rows(); ++i)
    for (long j = 0; j < v.cols(); ++j) mask(i, j) = rng->bernoulli(keep) ? 1.0 : 0.0;
  return t.dropout(x, mask, keep);
}

Var TextTower::encode(Tape& t, const std::vector<TextualSample>& batch,
                      SeqLayout& layout, AttentionProbe* probe,
                      Rng* dropout_rng) const {
  if (batch.empty()) throw TrainError("empty batch");
  const int B = static_cast<int>(batch.size());
  int max_len = 0;
  for (const auto& s : batch) {
    int len = static_cast<int>(s.token_ids.size());
    if (len > spec_.l_max)
      throw SchemaError("sequence length " + std::to_string(len) +
                        " exceeds encoder L_max " + std::to_string(spec_.l_max));
    if (len < 1) throw SchemaError("empty token sequence");
    max_len = std::max(max_len, len);
  }

  layout.batch = B;
  layout.max_len = max_len;
  layout.lengths.resize(B);

  std::vector<int> tok_ids(static_cast<size_t>(B) * max_len, Tokenizer::kPad);
  std::vector<int> pos_ids(static_cast<size_t>(B) * max_len, 0);
  for (int b = 0; b < B; ++b) {
    const auto& ids = batch[b].token_ids;
    layout.lengths[b] = static_cast<int>(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= spec_.vocab)
        throw SchemaError("token id " + std::to_string(ids[i]) +
                          " outside vocabulary of size " +
                          std::to_string(spec_.vocab));
      tok_ids[layout.row(b, static_cast<int>(i))] = ids[i];
      pos_ids[layout.row(b, static_cast<int>(i))] = static_cast<int>(i);
    }
  }

  Var h = t.add(t.embedding(params.at("tok/emb"), tok_ids),
                t.embedding(params.at("pos/emb"), pos_ids));
  h = maybe_dropout(t, h, dropout_rng);

  for (int l = 0; l < spec_.n_layers; ++l) {
    std::string p = "layer/" + std::to_string(l) + "/";
    Var n1 = t.layer_norm(h, t.leaf(params.at(p + "ln1/g")),
                          t.leaf(params.at(p + "ln1/b")));
    Var q = t.add_rowvec(t.matmul(n1, t.leaf(params.at(p + "wq"))),
                         t.leaf(params.at(p + "bq")));
    Var k = t.add_rowvec(t.matmul(n1, t.leaf(params.at(p + "wk"))),
                         t.leaf(params.at(p + "bk")));
    Var v = t.add_rowvec(t.matmul(n1, t.leaf(params.at(p + "wv"))),
                         t.leaf(params.at(p + "bv")));
    Var a = t.attention(q, k, v, layout, spec_.n_heads, probe);
    Var proj = t.add_rowvec(t.matmul(a, t.leaf(params.at(p + "wo"))),
                            t.leaf(params.at(p + "bo")));
    h = t.add(h, maybe_dropout(t, proj, dropout_rng));

    Var n2 = t.layer_norm(h, t.leaf(params.at(p + "ln2/g")),
                          t.leaf(params.at(p + "ln2/b")));
    Var ff1 = t.gelu(t.add_rowvec(t.matmul(n2, t.leaf(params.at(p + "ff/w1"))),
                                  t.leaf(params.at(p + "ff/b1"))));
    Var ff2 = t.add_rowvec(t.matmul(ff1, t.leaf(params.at(p + "ff/w2"))),
                           t.leaf(params.at(p + "ff/b2")));
    h = t.add(h, maybe_dropout(t, ff2, dropout_rng));
  }

  return t.layer_norm(h, t.leaf(params.at("final_ln/g")),
                      t.leaf(params.at("final_ln/b")));
}

}  // namespace flip
