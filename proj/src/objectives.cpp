#include "flip/objectives.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "flip/errors.hpp"

namespace flip {

namespace {

std::string mtm_prefix(int field) { return "mtm/f" + std::to_string(field); }

Var zero_scalar(Tape& t) { return t.constant(Matrix::Zero(1, 1)); }

// Weighted sum that realizes "per-sample mean, then mean over contributing
// samples": entry i carries 1 / (per_sample_count * active_samples).
Var weighted_sum(Tape& t, Var per_row_losses, const std::vector<double>& weights) {
  Matrix w(static_cast<long>(weights.size()), 1);
  for (std::size_t i = 0; i < weights.size(); ++i) w(static_cast<long>(i), 0) = weights[i];
  return t.sum(t.mul(per_row_losses, t.constant(std::move(w))));
}

}  // namespace

Objectives::Objectives(const ObjectiveConfig& config, unsigned long long seed)
    : config_(config) {
  ObjectiveConfig& c = config_;
  if (c.d_text <= 0 || c.d_tab <= 0 || c.vocab <= 0 || c.num_features <= 0 ||
      c.num_fields <= 0)
    throw ConfigError("objectives: dimensions must be positive");
  if (c.mlm_hidden <= 0) c.mlm_hidden = c.d_text;
  if (c.mtm_hidden <= 0) c.mtm_hidden = c.d_text;
  if (c.icl_dim <= 0) throw ConfigError("objectives: icl_dim must be positive");
  if (!(c.tau > 0.0)) throw ConfigError("objectives: tau must be positive");

  Rng rng(mix_seed(seed, 0x0bce));
  params.add("mlm/w1", xavier_init(rng, c.d_text + c.d_tab, c.mlm_hidden));
  params.add("mlm/b1", Matrix::Zero(1, c.mlm_hidden));
  params.add("mlm/w2", xavier_init(rng, c.mlm_hidden, c.vocab));
  params.add("mlm/b2", Matrix::Zero(1, c.vocab));
  params.add("cross/q", xavier_init(rng, c.d_tab, c.d_text));
  for (int f = 0; f < c.num_fields; ++f) {
    params.add(mtm_prefix(f) + "/w1", xavier_init(rng, c.d_text, c.mtm_hidden));
    params.add(mtm_prefix(f) + "/b1", Matrix::Zero(1, c.mtm_hidden));
    params.add(mtm_prefix(f) + "/w2", xavier_init(rng, c.mtm_hidden, c.mtm_hidden));
    params.add(mtm_prefix(f) + "/b2", Matrix::Zero(1, c.mtm_hidden));
  }
  params.add("mtm/cand", uniform_init(rng, c.num_features, c.mtm_hidden, -0.01, 0.01));
  params.add("icl/text_w", xavier_init(rng, c.d_text, c.icl_dim));
  params.add("icl/text_b", Matrix::Zero(1, c.icl_dim));
  params.add("icl/tab_w", xavier_init(rng, c.d_tab, c.icl_dim));
  params.add("icl/tab_b", Matrix::Zero(1, c.icl_dim));
}

Var Objectives::mlm_loss(Tape& t, Var w_hat, const SeqLayout& layout, Var v,
                         const std::vector<std::vector<int>>& masked_positions,
                         const std::vector<std::vector<int>>& targets) const {
  const int batch = layout.batch;
  if (static_cast<int>(masked_positions.size()) != batch ||
      targets.size() != masked_positions.size())
    throw std::logic_error("mlm_loss: batch size mismatch");

  int active = 0;
  for (const auto& p : masked_positions)
    if (!p.empty()) ++active;
  if (active == 0) return zero_scalar(t);

  std::vector<int> token_rows, sample_rows, flat_targets;
  std::vector<double> weights;
  for (int b = 0; b < batch; ++b) {
    const auto& pos = masked_positions[b];
    if (pos.size() != targets[b].size())
      throw std::logic_error("mlm_loss: positions/targets mismatch");
    const double w = 1.0 / (static_cast<double>(pos.size()) * active);
    for (std::size_t i = 0; i < pos.size(); ++i) {
      if (pos[i] < 0 || pos[i] >= layout.lengths[b])
        throw std::logic_error("mlm_loss: masked position out of range");
      token_rows.push_back(layout.row(b, pos[i]));
      sample_rows.push_back(b);
      flat_targets.push_back(targets[b][i]);
      weights.push_back(w);
    }
  }

  Var x = t.concat_cols(t.select_rows(w_hat, std::move(token_rows)),
                        t.select_rows(v, std::move(sample_rows)));
  Var h = t.relu(t.add_rowvec(t.matmul(x, t.leaf(params.at("mlm/w1"))),
                              t.leaf(params.at("mlm/b1"))));
  Var logits = t.add_rowvec(t.matmul(h, t.leaf(params.at("mlm/w2"))),
                            t.leaf(params.at("mlm/b2")));
  return weighted_sum(t, t.softmax_xent(logits, std::move(flat_targets)), weights);
}

Var Objectives::cross_attend(Tape& t, Var v_hat, Var w, const SeqLayout& layout,
                             std::vector<Matrix>* probe) const {
  Var query = t.matmul(v_hat, t.leaf(params.at("cross/q")));
  return t.cross_attention(query, w, layout, 1.0 / std::sqrt(config_.d_text), probe);
}

Var Objectives::mtm_hidden_for_field(Tape& t, Var u_rows, int field) const {
  const std::string p = mtm_prefix(field);
  Var h = t.relu(t.add_rowvec(t.matmul(u_rows, t.leaf(params.at(p + "/w1"))),
                              t.leaf(params.at(p + "/b1"))));
  return t.add_rowvec(t.matmul(h, t.leaf(params.at(p + "/w2"))),
                      t.leaf(params.at(p + "/b2")));
}

Var Objectives::mtm_nce_loss(Tape& t, Var u,
                             const std::vector<std::vector<int>>& mask_fields,
                             const std::vector<std::vector<NoiseSample>>& noise) const {
  const int batch = static_cast<int>(mask_fields.size());
  if (noise.size() != mask_fields.size())
    throw std::logic_error("mtm_nce_loss: fields/noise mismatch");

  int active = 0;
  int k = -1;
  for (int b = 0; b < batch; ++b) {
    if (noise[b].size() != mask_fields[b].size())
      throw std::logic_error("mtm_nce_loss: noise count != masked field count");
    if (!mask_fields[b].empty()) ++active;
    for (const NoiseSample& ns : noise[b]) {
      if (k < 0) k = static_cast<int>(ns.noise_ids.size());
      if (static_cast<int>(ns.noise_ids.size()) != k)
        throw std::logic_error("mtm_nce_loss: ragged noise draws");
    }
  }
  if (active == 0) return zero_scalar(t);

  struct RowRef {
    int sample;
    int slot;
  };
  std::vector<std::vector<RowRef>> by_field(config_.num_fields);
  for (int b = 0; b < batch; ++b)
    for (std::size_t j = 0; j < mask_fields[b].size(); ++j) {
      const int f = mask_fields[b][j];
      if (f < 0 || f >= config_.num_fields)
        throw std::logic_error("mtm_nce_loss: field index out of range");
      by_field[f].push_back({b, static_cast<int>(j)});
    }

  Var total = zero_scalar(t);
  Parameter& cand_table = params.at("mtm/cand");
  for (int f = 0; f < config_.num_fields; ++f) {
    const auto& group = by_field[f];
    if (group.empty()) continue;
    std::vector<int> samples;
    std::vector<std::vector<int>> candidates;
    std::vector<double> weights;
    samples.reserve(group.size());
    candidates.reserve(group.size());
    for (const RowRef& r : group) {
      const NoiseSample& ns = noise[r.sample][r.slot];
      std::vector<int> row;
      row.reserve(1 + ns.noise_ids.size());
      row.push_back(ns.positive_id);
      row.insert(row.end(), ns.noise_ids.begin(), ns.noise_ids.end());
      samples.push_back(r.sample);
      candidates.push_back(std::move(row));
      weights.push_back(1.0 /
                        (static_cast<double>(mask_fields[r.sample].size()) * active));
    }
    Var hidden = mtm_hidden_for_field(t, t.select_rows(u, std::move(samples)), f);
    Var scores = t.candidate_scores(hidden, cand_table, std::move(candidates));
    Var loss_rows = t.softplus(t.neg(t.slice_cols(scores, 0, 1)));
    if (k > 0)
      loss_rows = t.add(loss_rows, t.row_sum(t.softplus(t.slice_cols(scores, 1, k))));
    total = t.add(total, weighted_sum(t, loss_rows, weights));
  }
  return total;
}

Var Objectives::mtm_full_softmax_loss(Tape& t, Var u,
                                      const std::vector<std::vector<int>>& mask_fields,
                                      const std::vector<std::vector<int>>& targets,
                                      const DatasetSchema& schema) const {
  const int batch = static_cast<int>(mask_fields.size());
  if (targets.size() != mask_fields.size())
    throw std::logic_error("mtm_full_softmax_loss: fields/targets mismatch");
  if (schema.F() != config_.num_fields || schema.M != config_.num_features)
    throw std::logic_error("mtm_full_softmax_loss: schema does not match config");

  int active = 0;
  for (const auto& fs : mask_fields)
    if (!fs.empty()) ++active;
  if (active == 0) return zero_scalar(t);

  struct RowRef {
    int sample;
    int slot;
  };
  std::vector<std::vector<RowRef>> by_field(config_.num_fields);
  for (int b = 0; b < batch; ++b) {
    if (targets[b].size() != mask_fields[b].size())
      throw std::logic_error("mtm_full_softmax_loss: ragged targets");
    for (std::size_t j = 0; j < mask_fields[b].size(); ++j)
      by_field[mask_fields[b][j]].push_back({b, static_cast<int>(j)});
  }

  Var total = zero_scalar(t);
  Parameter& cand_table = params.at("mtm/cand");
  for (int f = 0; f < config_.num_fields; ++f) {
    const auto& group = by_field[f];
    if (group.empty()) continue;
    const int base = schema.feature_base[f];
    const int vf = schema.vocab_size(f);
    std::vector<int> range(vf);
    std::iota(range.begin(), range.end(), base);

    std::vector<int> samples, local_targets;
    std::vector<std::vector<int>> candidates;
    std::vector<double> weights;
    for (const RowRef& r : group) {
      const int target = targets[r.sample][r.slot];
      if (target < base || target >= base + vf)
        throw std::logic_error("mtm_full_softmax_loss: target outside field range");
      samples.push_back(r.sample);
      local_targets.push_back(target - base);
      candidates.push_back(range);
      weights.push_back(1.0 /
                        (static_cast<double>(mask_fields[r.sample].size()) * active));
    }
    Var hidden = mtm_hidden_for_field(t, t.select_rows(u, std::move(samples)), f);
    Var scores = t.candidate_scores(hidden, cand_table, std::move(candidates));
    total = t.add(total,
                  weighted_sum(t, t.softmax_xent(scores, std::move(local_targets)),
                               weights));
  }
  return total;
}

Var Objectives::field_candidate_scores(Tape& t, Var u_row, int field,
                                       const std::vector<int>& candidate_ids) const {
  if (field < 0 || field >= config_.num_fields)
    throw std::logic_error("field_candidate_scores: field index out of range");
  Var hidden = mtm_hidden_for_field(t, u_row, field);
  return t.candidate_scores(hidden, params.at("mtm/cand"), {candidate_ids});
}

Var Objectives::project_text(Tape& t, Var cls) const {
  return t.l2_normalize_rows(
      t.add_rowvec(t.matmul(cls, t.leaf(params.at("icl/text_w"))),
                   t.leaf(params.at("icl/text_b"))));
}

Var Objectives::project_tab(Tape& t, Var v) const {
  return t.l2_normalize_rows(
      t.add_rowvec(t.matmul(v, t.leaf(params.at("icl/tab_w"))),
                   t.leaf(params.at("icl/tab_b"))));
}

Var Objectives::icl_loss(Tape& t, Var z_text, Var z_tab) const {
  const long batch = t.value(z_text).rows();
  if (t.value(z_tab).rows() != batch)
    throw std::logic_error("icl_loss: batch size mismatch");
  Var sim = t.scale(t.matmul(z_text, t.transpose(z_tab)), 1.0 / config_.tau);
  std::vector<int> diagonal(static_cast<std::size_t>(batch));
  std::iota(diagonal.begin(), diagonal.end(), 0);
  Var text_to_tab = t.softmax_xent(sim, diagonal);
  Var tab_to_text = t.softmax_xent(t.transpose(sim), std::move(diagonal));
  return t.scale(t.add(t.sum(text_to_tab), t.sum(tab_to_text)),
                 1.0 / (2.0 * static_cast<double>(batch)));
}

std::vector<int> cls_row_indices(const SeqLayout& layout) {
  std::vector<int> rows(static_cast<std::size_t>(layout.batch));
  for (int b = 0; b < layout.batch; ++b) rows[static_cast<std::size_t>(b)] = layout.row(b, 0);
  return rows;
}

Var pretrain_loss(Tape& t, const IdTower& id_tower, const TextTower& text_tower,
                  const Objectives& objectives, const PretrainBatch& batch,
                  const AblationFlags& flags, PretrainLossParts& parts) {
  parts = PretrainLossParts{};
  const std::size_t batch_size = batch.clean_tab.size();

  const bool need_clean_tab = flags.icl || (flags.mlm && flags.joint_reconstruction);
  const bool need_clean_text = flags.icl || (flags.mtm && flags.joint_reconstruction);
  const bool need_corrupt_text = flags.mlm || (flags.mtm && !flags.joint_reconstruction);
  const bool need_corrupt_tab = flags.mtm || (flags.mlm && !flags.joint_reconstruction);

  if (need_clean_text && batch.clean_text.size() != batch_size)
    throw std::logic_error("pretrain_loss: clean text batch mismatch");
  if (need_corrupt_text && batch.masked_text.size() != batch_size)
    throw std::logic_error("pretrain_loss: masked text batch mismatch");
  if (need_corrupt_tab && batch.masked_tab.size() != batch_size)
    throw std::logic_error("pretrain_loss: masked tabular batch mismatch");
  if (flags.mtm && batch.noise.size() != batch_size)
    throw std::logic_error("pretrain_loss: noise batch mismatch");

  Var v_clean, w_clean, w_hat, v_hat;
  SeqLayout clean_layout, hat_layout;
  if (need_clean_tab) v_clean = id_tower.encode(t, batch.clean_tab);
  if (need_clean_text) w_clean = text_tower.encode(t, batch.clean_text, clean_layout);
  if (need_corrupt_text) {
    std::vector<TextualSample> corrupted;
    corrupted.reserve(batch_size);
    for (const MaskedText& m : batch.masked_text) corrupted.push_back(m.corrupted);
    w_hat = text_tower.encode(t, corrupted, hat_layout);
  }
  if (need_corrupt_tab) {
    std::vector<TabularSample> corrupted;
    corrupted.reserve(batch_size);
    for (const MaskedTabular& m : batch.masked_tab) corrupted.push_back(m.corrupted);
    v_hat = id_tower.encode(t, corrupted);
  }

  std::vector<Var> terms;
  if (flags.mlm) {
    std::vector<std::vector<int>> positions, targets;
    positions.reserve(batch_size);
    targets.reserve(batch_size);
    for (const MaskedText& m : batch.masked_text) {
      positions.push_back(m.masked_positions);
      targets.push_back(m.targets);
    }
    Var fused_tab = flags.joint_reconstruction ? v_clean : v_hat;
    Var loss = objectives.mlm_loss(t, w_hat, hat_layout, fused_tab, positions, targets);
    parts.mlm = t.value(loss)(0, 0);
    terms.push_back(loss);
  }
  if (flags.mtm) {
    Var tokens = flags.joint_reconstruction ? w_clean : w_hat;
    const SeqLayout& layout = flags.joint_reconstruction ? clean_layout : hat_layout;
    Var u = objectives.cross_attend(t, v_hat, tokens, layout);
    std::vector<std::vector<int>> fields;
    fields.reserve(batch_size);
    for (const MaskedTabular& m : batch.masked_tab) fields.push_back(m.mask_fields);
    Var loss = objectives.mtm_nce_loss(t, u, fields, batch.noise);
    parts.mtm = t.value(loss)(0, 0);
    terms.push_back(loss);
  }
  if (flags.icl) {
    Var cls = t.select_rows(w_clean, cls_row_indices(clean_layout));
    Var z_text = objectives.project_text(t, cls);
    Var z_tab = objectives.project_tab(t, v_clean);
    Var loss = objectives.icl_loss(t, z_text, z_tab);
    parts.icl = t.value(loss)(0, 0);
    terms.push_back(loss);
  }

  if (terms.empty()) {
    parts.total = 0.0;
    parts.has_terms = false;
    return t.constant(Matrix::Zero(1, 1));
  }
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = t.add(total, terms[i]);
  parts.total = t.value(total)(0, 0);
  parts.has_terms = true;
  return total;
}

}  // namespace flip
