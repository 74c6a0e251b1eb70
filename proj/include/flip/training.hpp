#pragma once

// Stage-2 pretraining and Stage-3 finetuning: the Adam/AdamW optimizer with
// cosine decay, run configuration with a stable content hash, binary
// checkpoints that refuse to load under a different configuration, the
// pretraining loop (NaN-abort, JSONL step logs), and adaptive / single-tower
// / from-scratch supervised finetuning with lr-grid search and early
// stopping on validation AUC.

#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "flip/data.hpp"
#include "flip/evalysis.hpp"
#include "flip/id_tower.hpp"
#include "flip/masking.hpp"
#include "flip/objectives.hpp"
#include "flip/text_tower.hpp"
#include "flip/textual.hpp"

namespace flip {

enum class Stage { pretrain, finetune };
enum class Variant { flip, flip_id, flip_plm, scratch };

Stage stage_from_name(const std::string& name);
std::string stage_name(Stage stage);
Variant variant_from_name(const std::string& name);
std::string variant_name(Variant variant);
NoiseScope noise_scope_from_name(const std::string& name);
std::string noise_scope_name(NoiseScope scope);

struct TrainConfig {
  Stage stage = Stage::pretrain;
  Variant variant = Variant::flip;

  double r_text = 0.15;
  double r_tab = 0.15;
  int k_noise = 25;
  double tau = 0.7;
  NoiseScope noise_scope = NoiseScope::field_local;
  AblationFlags flags;

  int pretrain_epochs = 30;
  int pretrain_batch = 1024;
  double pretrain_lr = 5e-5;
  double weight_decay = 0.01;

  std::vector<double> lr_grid = {1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3};
  int finetune_batch = 256;
  int finetune_epochs = 10;
  int patience = 2;
  double val_fraction = 0.1;

  unsigned long long seed = 0;
};

nlohmann::ordered_json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json id_tower_config_to_json(const IdTowerConfig& config);
IdTowerConfig id_tower_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json encoder_spec_to_json(const EncoderSpec& spec);
EncoderSpec encoder_spec_from_json(const nlohmann::json& j);
nlohmann::ordered_json objective_config_to_json(const ObjectiveConfig& config);
ObjectiveConfig objective_config_from_json(const nlohmann::json& j);

std::uint64_t fnv1a64(std::string_view s);

// Content hash over every knob that determines parameter shapes and training
// behavior; checkpoints carry it and refuse to load under a different value.
std::uint64_t config_hash(const TrainConfig& train, const IdTowerConfig& id,
                          const EncoderSpec& encoder, const ObjectiveConfig& objectives);

// --- optimizer -------------------------------------------------------------

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; 0 recovers plain Adam
};

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Parameter*> params, OptimConfig config = {});
  void step(double lr);
  void zero_grad();
  const std::vector<Parameter*>& params() const { return params_; }

 private:
  std::vector<Parameter*> params_;
  OptimConfig config_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

// lr0 * 0.5 * (1 + cos(pi * step / (total - 1))): lr0 at step 0, 0 at the end.
double cosine_lr(long step, long total_steps, double lr0);

// --- checkpoints ------------------------------------------------------------

struct CheckpointArchive {
  std::string name;  // e.g. "id_tower"
  std::vector<Parameter*> params;
};

// Writes manifest.json plus one raw little-endian double file per archive.
void save_checkpoint(const std::string& dir, std::uint64_t config_hash,
                     const std::vector<CheckpointArchive>& archives,
                     const nlohmann::ordered_json& meta);

// Restores values bit-for-bit. Throws TrainError when the directory was
// written under a different config hash or with mismatched tensor shapes.
void load_checkpoint(const std::string& dir, std::uint64_t expected_hash,
                     const std::vector<CheckpointArchive>& archives);

nlohmann::ordered_json read_checkpoint_meta(const std::string& dir);

// --- logging ----------------------------------------------------------------

class MetricsLogger {
 public:
  explicit MetricsLogger(const std::string& path, bool append = false);
  void log(const nlohmann::ordered_json& row);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

// --- data plumbing -----------------------------------------------------------

struct PairedDataset {
  std::vector<TabularSample> tab;
  std::vector<TextualSample> text;  // aligned with tab

  std::size_t size() const { return tab.size(); }
  std::vector<int> labels() const;
};

PairedDataset prepare_pairs(const DatasetSchema& schema, const Tokenizer& tokenizer,
                            const Template& tmpl,
                            const std::vector<LabeledRecord>& records,
                            int l_max = 256);

// Chronological head/tail split of an already-ordered dataset.
std::pair<PairedDataset, PairedDataset> split_tail(const PairedDataset& data,
                                                   double tail_fraction);

// Corrupts the selected records and draws NCE noise; one Rng stream drives
// all randomness so batches are reproducible.
PretrainBatch assemble_pretrain_batch(const PairedDataset& data,
                                      const std::vector<long>& indices,
                                      const DatasetSchema& schema,
                                      const NoiseSampler& sampler,
                                      const TrainConfig& config, Rng& rng);

// --- pretraining -------------------------------------------------------------

struct PretrainResult {
  long steps = 0;
  int epochs_run = 0;
  bool nan_abort = false;
  std::string last_good_checkpoint;  // empty when never saved
  int best_epoch = -1;
  double best_epoch_loss = 0.0;
  std::vector<double> epoch_losses;
};

// Trains towers + objective heads in place (the ID tower's prediction head
// stays untouched: it is not part of any pretraining loss). checkpoint_dir
// empty disables saving; otherwise <dir>/best and <dir>/final are written.
PretrainResult pretrain(IdTower& id_tower, TextTower& text_tower,
                        Objectives& objectives, const PairedDataset& train,
                        const DatasetSchema& schema, const TrainConfig& config,
                        std::uint64_t config_hash, MetricsLogger* logger,
                        const std::string& checkpoint_dir);

// --- finetuning ---------------------------------------------------------------

// Fresh linear heads over both representations plus the learnable balance
// a (alpha = sigmoid(a), so alpha stays inside (0,1)); shared between the
// solo probabilities and the combined logit.
class AdaptiveCombiner {
 public:
  AdaptiveCombiner(int d_tab, int d_text, unsigned long long seed);

  Var id_logit(Tape& t, Var v) const;
  Var plm_logit(Tape& t, Var cls) const;
  Var alpha(Tape& t) const;  // 1x1
  Var combined_logit(Tape& t, Var logit_id, Var logit_plm) const;
  double alpha_value() const;

  ParamSet params;
};

// Mean of softplus(logit) - y * logit over the batch: BCE on the logit scale.
Var bce_mean(Tape& t, Var logit, const std::vector<int>& labels);

struct FinetuneLossParts {
  double joint = 0.0;
  double id = 0.0;
  double plm = 0.0;
  double total = 0.0;
};

// One supervised forward for any variant; for flip the loss is the three-term
// sum and `parts` carries the decomposition.
class FinetuneModel {
 public:
  FinetuneModel(IdTower& id_tower, TextTower& text_tower, AdaptiveCombiner& combiner,
                Variant variant);

  Var loss(Tape& t, const std::vector<TabularSample>& tab,
           const std::vector<TextualSample>& text,
           FinetuneLossParts* parts = nullptr) const;
  std::vector<double> predict(const PairedDataset& data, int batch_size = 512) const;
  std::vector<Parameter*> trainable() const;
  Variant variant() const { return variant_; }
  double alpha_value() const { return combiner_->alpha_value(); }

 private:
  IdTower* id_tower_;
  TextTower* text_tower_;
  AdaptiveCombiner* combiner_;
  Variant variant_;
};

struct FinetuneArm {
  double lr = 0.0;
  double val_auc = 0.0;
  int epochs_run = 0;
  bool nan_abort = false;
};

struct FinetuneResult {
  double best_lr = 0.0;
  double best_val_auc = 0.0;
  MetricReport test;
  double alpha = 0.5;
  std::vector<FinetuneArm> arms;
};

// Grid search over config.lr_grid with early stopping on validation AUC
// (chronological tail of `train`); evaluates the best arm on `test`.
FinetuneResult finetune(FinetuneModel& model, const PairedDataset& train,
                        const PairedDataset& test, const TrainConfig& config,
                        MetricsLogger* logger);

}  // namespace flip
