#pragma once

// The ID-based CTR model: a global feature embedding table (with one extra
// shared <MASK> row) feeding a pluggable feature-interaction backbone that
// produces the tabular representation v, plus a linear prediction head.

#include <string>
#include <vector>

#include "flip/autodiff.hpp"
#include "flip/data.hpp"
#include "flip/params.hpp"

namespace flip {

enum class Backbone { dcnv2, deepfm, autoint };

Backbone backbone_from_name(const std::string& name);
std::string backbone_name(Backbone kind);

struct IdTowerConfig {
  Backbone kind = Backbone::dcnv2;
  int d_emb = 32;
  std::vector<int> dnn_sizes = {300, 300, 128};
  int cross_depth = 3;  // dcnv2
  int attn_layers = 2;  // autoint
  int attn_heads = 2;   // autoint
};

// One cross layer: x0 (.) (x_l W + b) + x_l, all row-vector batches.
Var dcnv2_cross(Tape& t, Var x0, Var xl, Var w, Var b);

class IdTower {
 public:
  IdTower(int num_features, int num_fields, const IdTowerConfig& config,
          unsigned long long seed);

  // Batch of F-field samples -> v (B x d_tab). Feature IDs must lie in
  // [0, M]; row M is the shared mask feature.
  Var encode(Tape& t, const std::vector<TabularSample>& batch) const;

  Var predict_logit(Tape& t, Var v) const;  // B x 1

  int d_tab() const { return d_tab_; }
  int num_fields() const { return F_; }
  int num_features() const { return M_; }
  const IdTowerConfig& config() const { return config_; }

  ParamSet params;
  Parameter& embedding_table() const { return params.at("emb/table"); }

 private:
  Var forward_dcnv2(Tape& t, Var emb, int batch) const;
  Var forward_deepfm(Tape& t, Var emb, const std::vector<int>& flat_ids,
                     int batch) const;
  Var forward_autoint(Tape& t, Var emb, int batch) const;
  Var dnn(Tape& t, Var x, const std::string& prefix) const;

  IdTowerConfig config_;
  int M_ = 0;  // real feature count; the table holds M_ + 1 rows
  int F_ = 0;
  int d_tab_ = 0;
};

}  // namespace flip
