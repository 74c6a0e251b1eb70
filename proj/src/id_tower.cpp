#include "flip/id_tower.hpp"

#include <cmath>

namespace flip {

Backbone backbone_from_name(const std::string& name) {
  if (name == "dcnv2") return Backbone::dcnv2;
  if (name == "deepfm") return Backbone::deepfm;
  if (name == "autoint") return Backbone::autoint;
  throw ConfigError("unknown backbone '" + name +
                    "' (expected dcnv2, deepfm, or autoint)");
}

std::string backbone_name(Backbone kind) {
  switch (kind) {
    case Backbone::dcnv2: return "dcnv2";
    case Backbone::deepfm: return "deepfm";
    case Backbone::autoint: return "autoint";
  }
  throw ConfigError("bad backbone value");
}

Var dcnv2_cross(Tape& t, Var x0, Var xl, Var w, Var b) {
  return t.add(t.mul(x0, t.add_rowvec(t.matmul(xl, w), b)), xl);
}

IdTower::IdTower(int num_features, int num_fields, const IdTowerConfig& config,
                 unsigned long long seed)
    : config_(config), M_(num_features), F_(num_fields) {
  if (M_ < 1 || F_ < 1) throw ConfigError("id tower needs M >= 1 and F >= 1");
  if (config_.d_emb < 1) throw ConfigError("d_emb must be positive");
  if (config_.dnn_sizes.empty()) throw ConfigError("dnn_sizes must be non-empty");

  Rng rng(mix_seed(seed, 0x1d70));
  const int d = config_.d_emb;
  const int d0 = F_ * d;

  params.add("emb/table", uniform_init(rng, M_ + 1, d, -0.01, 0.01));

  auto add_dnn = [&](const std::string& prefix, int in) {
    for (size_t l = 0; l < config_.dnn_sizes.size(); ++l) {
      int out = config_.dnn_sizes[l];
      params.add(prefix + "/w" + std::to_string(l), xavier_init(rng, in, out));
      params.add(prefix + "/b" + std::to_string(l), Matrix::Zero(1, out));
      in = out;
    }
    return in;
  };

  switch (config_.kind) {
    case Backbone::dcnv2: {
      if (config_.cross_depth < 1) throw ConfigError("cross_depth must be >= 1");
      for (int l = 0; l < config_.cross_depth; ++l) {
        params.add("cross/w" + std::to_string(l), xavier_init(rng, d0, d0));
        params.add("cross/b" + std::to_string(l), Matrix::Zero(1, d0));
      }
      int dnn_out = add_dnn("dnn", d0);
      d_tab_ = d0 + dnn_out;
      break;
    }
    case Backbone::deepfm: {
      params.add("fm/w", uniform_init(rng, M_ + 1, 1, -0.01, 0.01));
      int dnn_out = add_dnn("dnn", d0);
      d_tab_ = 1 + d + dnn_out;
      break;
    }
    case Backbone::autoint: {
      if (config_.attn_layers < 1 || config_.attn_heads < 1)
        throw ConfigError("autoint needs at least one layer and one head");
      if (d % config_.attn_heads != 0)
        throw ConfigError("d_emb must be divisible by attn_heads");
      for (int l = 0; l < config_.attn_layers; ++l) {
        std::string p = "attn/" + std::to_string(l) + "/";
        params.add(p + "wq", xavier_init(rng, d, d));
        params.add(p + "wk", xavier_init(rng, d, d));
        params.add(p + "wv", xavier_init(rng, d, d));
      }
      d_tab_ = d0;
      break;
    }
  }

  params.add("head/w", xavier_init(rng, d_tab_, 1));
  params.add("head/b", Matrix::Zero(1, 1));
}

Var IdTower::dnn(Tape& t, Var x, const std::string& prefix) const {
  Var h = x;
  for (size_t l = 0; l < config_.dnn_sizes.size(); ++l) {
    Var w = t.leaf(params.at(prefix + "/w" + std::to_string(l)));
    Var b = t.leaf(params.at(prefix + "/b" + std::to_string(l)));
    h = t.relu(t.add_rowvec(t.matmul(h, w), b));
  }
  return h;
}

Var IdTower::encode(Tape& t, const std::vector<TabularSample>& batch) const {
  if (batch.empty()) throw TrainError("empty batch");
  const int B = static_cast<int>(batch.size());
  std::vector<int> flat_ids;
  flat_ids.reserve(static_cast<size_t>(B) * F_);
  for (const auto& sample : batch) {
    if (static_cast<int>(sample.feature_ids.size()) != F_)
      throw SchemaError("sample has " + std::to_string(sample.feature_ids.size()) +
                        " fields, tower expects " + std::to_string(F_));
    for (int id : sample.feature_ids) {
      if (id < 0 || id > M_)
        throw SchemaError("feature id " + std::to_string(id) +
                          " outside [0, " + std::to_string(M_) + "]");
      flat_ids.push_back(id);
    }
  }

  Var emb = t.embedding(params.at("emb/table"), flat_ids);  // (B*F) x d
  switch (config_.kind) {
    case Backbone::dcnv2: return forward_dcnv2(t, emb, B);
    case Backbone::deepfm: return forward_deepfm(t, emb, flat_ids, B);
    case Backbone::autoint: return forward_autoint(t, emb, B);
  }
  throw ConfigError("bad backbone value");
}

Var IdTower::forward_dcnv2(Tape& t, Var emb, int batch) const {
  Var x0 = t.reshape_rows(emb, F_);  // B x (F*d)
  Var xl = x0;
  for (int l = 0; l < config_.cross_depth; ++l) {
    Var w = t.leaf(params.at("cross/w" + std::to_string(l)));
    Var b = t.leaf(params.at("cross/b" + std::to_string(l)));
    xl = dcnv2_cross(t, x0, xl, w, b);
  }
  return t.concat_cols(xl, dnn(t, x0, "dnn"));
}

Var IdTower::forward_deepfm(Tape& t, Var emb, const std::vector<int>& flat_ids,
                            int batch) const {
  // Pairwise FM vector: 0.5 * ((sum e)^2 - sum e^2), per sample.
  Var sum_e = t.group_sum_rows(emb, F_);                       // B x d
  Var square_of_sum = t.mul(sum_e, sum_e);
  Var sum_of_square = t.group_sum_rows(t.mul(emb, emb), F_);
  Var fm = t.scale(t.sub(square_of_sum, sum_of_square), 0.5);

  Var first_order =
      t.group_sum_rows(t.embedding(params.at("fm/w"), flat_ids), F_);  // B x 1

  Var flat = t.reshape_rows(emb, F_);
  return t.concat_cols(t.concat_cols(first_order, fm), dnn(t, flat, "dnn"));
}

Var IdTower::forward_autoint(Tape& t, Var emb, int batch) const {
  SeqLayout layout{batch, F_, std::vector<int>(batch, F_)};
  Var h = emb;  // (B*F) x d, every row valid
  for (int l = 0; l < config_.attn_layers; ++l) {
    std::string p = "attn/" + std::to_string(l) + "/";
    Var q = t.matmul(h, t.leaf(params.at(p + "wq")));
    Var k = t.matmul(h, t.leaf(params.at(p + "wk")));
    Var v = t.matmul(h, t.leaf(params.at(p + "wv")));
    Var a = t.attention(q, k, v, layout, config_.attn_heads, nullptr);
    h = t.relu(t.add(a, h));
  }
  return t.reshape_rows(h, F_);
}

Var IdTower::predict_logit(Tape& t, Var v) const {
  return t.add_rowvec(t.matmul(v, t.leaf(params.at("head/w"))),
                      t.leaf(params.at("head/b")));
}

}  // namespace flip
