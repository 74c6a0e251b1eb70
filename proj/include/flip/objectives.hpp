#pragma once

// The three alignment objectives and their combination:
//   - masked language modeling over the corrupted text, fused with the
//     tabular representation: q = g_plm([w_hat_l (+) v]), softmax CE;
//   - masked tabular modeling: cross-attention from the corrupted tabular
//     representation into the clean token states, then per-field binary NCE
//     against frequency-sampled noise features (with the exact full-softmax
//     form kept as a test oracle);
//   - instance-level contrastive loss: symmetric InfoNCE over projected,
//     L2-normalized CLS / tabular vectors at temperature tau.
// The combined pretraining loss is mean_i(mlm_i + mtm_i) + icl.

#include <vector>

#include "flip/autodiff.hpp"
#include "flip/id_tower.hpp"
#include "flip/masking.hpp"
#include "flip/params.hpp"
#include "flip/text_tower.hpp"

namespace flip {

struct ObjectiveConfig {
  int d_text = 0;
  int d_tab = 0;
  int vocab = 0;         // V, width of the MLM logit layer
  int num_features = 0;  // M, rows of the MTM candidate table
  int num_fields = 0;    // F, one MTM head per field
  int mlm_hidden = 0;    // 0 -> d_text
  int mtm_hidden = 0;    // 0 -> d_text
  int icl_dim = 128;
  double tau = 0.7;
};

class Objectives {
 public:
  Objectives(const ObjectiveConfig& config, unsigned long long seed);

  // w_hat: flat (B*L) x d_text states of the CORRUPTED text; v: B x d_tab
  // from the clean tabular view (or the corrupted one when joint
  // reconstruction is ablated). masked_positions[b] are token indices into
  // sample b; targets[b] the clean token IDs there. Samples with no masked
  // positions contribute nothing and are excluded from the batch mean.
  Var mlm_loss(Tape& t, Var w_hat, const SeqLayout& layout, Var v,
               const std::vector<std::vector<int>>& masked_positions,
               const std::vector<std::vector<int>>& targets) const;

  // u = Softmax(v_hat Q w^T / sqrt(d_text)) w per sample, over real tokens.
  Var cross_attend(Tape& t, Var v_hat, Var w, const SeqLayout& layout,
                   std::vector<Matrix>* probe = nullptr) const;

  // Binary NCE over (positive, K noise) candidates per masked field:
  // -(1/|I_tab|) sum_f [log sigma(c_pos) + sum_k log(1 - sigma(c_k))].
  Var mtm_nce_loss(Tape& t, Var u,
                   const std::vector<std::vector<int>>& mask_fields,
                   const std::vector<std::vector<NoiseSample>>& noise) const;

  // Exact softmax cross-entropy over each masked field's full ID range.
  // Shares every parameter with the NCE path; kept as its oracle.
  Var mtm_full_softmax_loss(Tape& t, Var u,
                            const std::vector<std::vector<int>>& mask_fields,
                            const std::vector<std::vector<int>>& targets,
                            const DatasetSchema& schema) const;

  // Candidate scores for one sample's field, in candidate order. Test probe
  // into the factored scoring head.
  Var field_candidate_scores(Tape& t, Var u_row, int field,
                             const std::vector<int>& candidate_ids) const;

  Var project_text(Tape& t, Var cls) const;  // B x d_text -> unit rows B x d
  Var project_tab(Tape& t, Var v) const;     // B x d_tab  -> unit rows B x d

  // Symmetric InfoNCE averaged over 2B terms; rows must be unit-normalized.
  Var icl_loss(Tape& t, Var z_text, Var z_tab) const;

  const ObjectiveConfig& config() const { return config_; }

  ParamSet params;

 private:
  Var mtm_hidden_for_field(Tape& t, Var u_rows, int field) const;

  ObjectiveConfig config_;
};

struct AblationFlags {
  bool mlm = true;
  bool mtm = true;
  bool icl = true;
  bool joint_reconstruction = true;
  bool field_level_masking = true;  // consumed by the batch corruption step
};

// Clean and corrupted views of one minibatch, plus noise draws: everything
// pretrain_loss needs, prepared by the caller.
struct PretrainBatch {
  std::vector<TabularSample> clean_tab;
  std::vector<TextualSample> clean_text;
  std::vector<MaskedText> masked_text;
  std::vector<MaskedTabular> masked_tab;
  std::vector<std::vector<NoiseSample>> noise;  // [sample][masked-field slot]
};

struct PretrainLossParts {
  double mlm = 0.0;
  double mtm = 0.0;
  double icl = 0.0;
  double total = 0.0;
  bool has_terms = false;  // false when every flag is off: nothing to optimize
};

// Assembles the Eq.-style combined loss on the tape. Returns the root Var
// (constant zero when all flags are off) and fills `parts`.
Var pretrain_loss(Tape& t, const IdTower& id_tower, const TextTower& text_tower,
                  const Objectives& objectives, const PretrainBatch& batch,
                  const AblationFlags& flags, PretrainLossParts& parts);

std::vector<int> cls_row_indices(const SeqLayout& layout);

}  // namespace flip
