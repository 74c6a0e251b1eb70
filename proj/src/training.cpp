#include "flip/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "flip/errors.hpp"

namespace flip {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// --- names -------------------------------------------------------------------

Stage stage_from_name(const std::string& name) {
  if (name == "pretrain") return Stage::pretrain;
  if (name == "finetune") return Stage::finetune;
  throw ConfigError("unknown stage '" + name + "' (expected pretrain|finetune)");
}

std::string stage_name(Stage stage) {
  return stage == Stage::pretrain ? "pretrain" : "finetune";
}

Variant variant_from_name(const std::string& name) {
  if (name == "flip") return Variant::flip;
  if (name == "flip_id") return Variant::flip_id;
  if (name == "flip_plm") return Variant::flip_plm;
  if (name == "scratch") return Variant::scratch;
  throw ConfigError("unknown variant '" + name +
                    "' (expected flip|flip_id|flip_plm|scratch)");
}

std::string variant_name(Variant variant) {
  switch (variant) {
    case Variant::flip: return "flip";
    case Variant::flip_id: return "flip_id";
    case Variant::flip_plm: return "flip_plm";
    case Variant::scratch: return "scratch";
  }
  throw std::logic_error("variant_name: bad enum");
}

NoiseScope noise_scope_from_name(const std::string& name) {
  if (name == "field_local") return NoiseScope::field_local;
  if (name == "global") return NoiseScope::global;
  throw ConfigError("unknown noise scope '" + name + "' (expected field_local|global)");
}

std::string noise_scope_name(NoiseScope scope) {
  return scope == NoiseScope::field_local ? "field_local" : "global";
}

// --- config serialization -------------------------------------------------------

ordered_json train_config_to_json(const TrainConfig& c) {
  ordered_json j;
  j["stage"] = stage_name(c.stage);
  j["variant"] = variant_name(c.variant);
  j["r_text"] = c.r_text;
  j["r_tab"] = c.r_tab;
  j["k_noise"] = c.k_noise;
  j["tau"] = c.tau;
  j["noise_scope"] = noise_scope_name(c.noise_scope);
  j["flags"] = ordered_json{{"mlm", c.flags.mlm},
                            {"mtm", c.flags.mtm},
                            {"icl", c.flags.icl},
                            {"joint_reconstruction", c.flags.joint_reconstruction},
                            {"field_level_masking", c.flags.field_level_masking}};
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_batch"] = c.pretrain_batch;
  j["pretrain_lr"] = c.pretrain_lr;
  j["weight_decay"] = c.weight_decay;
  j["lr_grid"] = c.lr_grid;
  j["finetune_batch"] = c.finetune_batch;
  j["finetune_epochs"] = c.finetune_epochs;
  j["patience"] = c.patience;
  j["val_fraction"] = c.val_fraction;
  j["seed"] = c.seed;
  return j;
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  try {
    c.stage = stage_from_name(j.at("stage").get<std::string>());
    c.variant = variant_from_name(j.at("variant").get<std::string>());
    c.r_text = j.at("r_text").get<double>();
    c.r_tab = j.at("r_tab").get<double>();
    c.k_noise = j.at("k_noise").get<int>();
    c.tau = j.at("tau").get<double>();
    c.noise_scope = noise_scope_from_name(j.at("noise_scope").get<std::string>());
    const json& f = j.at("flags");
    c.flags.mlm = f.at("mlm").get<bool>();
    c.flags.mtm = f.at("mtm").get<bool>();
    c.flags.icl = f.at("icl").get<bool>();
    c.flags.joint_reconstruction = f.at("joint_reconstruction").get<bool>();
    c.flags.field_level_masking = f.at("field_level_masking").get<bool>();
    c.pretrain_epochs = j.at("pretrain_epochs").get<int>();
    c.pretrain_batch = j.at("pretrain_batch").get<int>();
    c.pretrain_lr = j.at("pretrain_lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.lr_grid = j.at("lr_grid").get<std::vector<double>>();
    c.finetune_batch = j.at("finetune_batch").get<int>();
    c.finetune_epochs = j.at("finetune_epochs").get<int>();
    c.patience = j.at("patience").get<int>();
    c.val_fraction = j.at("val_fraction").get<double>();
    c.seed = j.at("seed").get<unsigned long long>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  return c;
}

ordered_json id_tower_config_to_json(const IdTowerConfig& c) {
  ordered_json j;
  j["backbone"] = backbone_name(c.kind);
  j["d_emb"] = c.d_emb;
  j["dnn_sizes"] = c.dnn_sizes;
  j["cross_depth"] = c.cross_depth;
  j["attn_layers"] = c.attn_layers;
  j["attn_heads"] = c.attn_heads;
  return j;
}

IdTowerConfig id_tower_config_from_json(const json& j) {
  IdTowerConfig c;
  try {
    c.kind = backbone_from_name(j.at("backbone").get<std::string>());
    c.d_emb = j.at("d_emb").get<int>();
    c.dnn_sizes = j.at("dnn_sizes").get<std::vector<int>>();
    c.cross_depth = j.at("cross_depth").get<int>();
    c.attn_layers = j.at("attn_layers").get<int>();
    c.attn_heads = j.at("attn_heads").get<int>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad id tower config: ") + e.what());
  }
  return c;
}

ordered_json encoder_spec_to_json(const EncoderSpec& s) {
  ordered_json j;
  j["vocab"] = s.vocab;
  j["d_text"] = s.d_text;
  j["n_layers"] = s.n_layers;
  j["n_heads"] = s.n_heads;
  j["d_ff"] = s.d_ff;
  j["l_max"] = s.l_max;
  j["dropout"] = s.dropout;
  return j;
}

EncoderSpec encoder_spec_from_json(const json& j) {
  EncoderSpec s;
  try {
    s.vocab = j.at("vocab").get<int>();
    s.d_text = j.at("d_text").get<int>();
    s.n_layers = j.at("n_layers").get<int>();
    s.n_heads = j.at("n_heads").get<int>();
    s.d_ff = j.at("d_ff").get<int>();
    s.l_max = j.at("l_max").get<int>();
    s.dropout = j.at("dropout").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad encoder spec: ") + e.what());
  }
  return s;
}

ordered_json objective_config_to_json(const ObjectiveConfig& c) {
  ordered_json j;
  j["d_text"] = c.d_text;
  j["d_tab"] = c.d_tab;
  j["vocab"] = c.vocab;
  j["num_features"] = c.num_features;
  j["num_fields"] = c.num_fields;
  j["mlm_hidden"] = c.mlm_hidden;
  j["mtm_hidden"] = c.mtm_hidden;
  j["icl_dim"] = c.icl_dim;
  j["tau"] = c.tau;
  return j;
}

ObjectiveConfig objective_config_from_json(const json& j) {
  ObjectiveConfig c;
  try {
    c.d_text = j.at("d_text").get<int>();
    c.d_tab = j.at("d_tab").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.num_features = j.at("num_features").get<int>();
    c.num_fields = j.at("num_fields").get<int>();
    c.mlm_hidden = j.at("mlm_hidden").get<int>();
    c.mtm_hidden = j.at("mtm_hidden").get<int>();
    c.icl_dim = j.at("icl_dim").get<int>();
    c.tau = j.at("tau").get<double>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad objective config: ") + e.what());
  }
  return c;
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t config_hash(const TrainConfig& train, const IdTowerConfig& id,
                          const EncoderSpec& encoder, const ObjectiveConfig& objectives) {
  ordered_json j;
  j["train"] = train_config_to_json(train);
  j["id_tower"] = id_tower_config_to_json(id);
  j["encoder"] = encoder_spec_to_json(encoder);
  j["objectives"] = objective_config_to_json(objectives);
  return fnv1a64(j.dump());
}

namespace {

std::string hex64(std::uint64_t x) {
  std::ostringstream out;
  out << std::hex << x;
  return out.str();
}

}  // namespace

// --- optimizer -------------------------------------------------------------------

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, OptimConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Parameter* p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamOptimizer::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (config_.weight_decay > 0.0) p.value *= 1.0 - lr * config_.weight_decay;
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * p.grad;
    v_[i] = config_.beta2 * v_[i] +
            (1.0 - config_.beta2) * p.grad.cwiseProduct(p.grad).eval();
    p.value.array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
}

void AdamOptimizer::zero_grad() {
  for (Parameter* p : params_) p->zero_grad();
}

double cosine_lr(long step, long total_steps, double lr0) {
  if (total_steps <= 1) return step == 0 ? lr0 : 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return lr0 * 0.5 * (1.0 + std::cos(M_PI * frac));
}

// --- checkpoints --------------------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "flip-checkpoint-v1";

}  // namespace

void save_checkpoint(const std::string& dir, std::uint64_t config_hash,
                     const std::vector<CheckpointArchive>& archives,
                     const ordered_json& meta) {
  fs::create_directories(dir);
  ordered_json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config_hash"] = hex64(config_hash);
  manifest["archives"] = ordered_json::array();
  for (const CheckpointArchive& arc : archives) {
    const std::string file = arc.name + ".bin";
    ordered_json tensors = ordered_json::array();
    std::ofstream bin(dir + "/" + file, std::ios::binary | std::ios::trunc);
    if (!bin) throw RunError("cannot write " + dir + "/" + file);
    for (const Parameter* p : arc.params) {
      tensors.push_back(ordered_json{{"name", p->name},
                                     {"rows", p->value.rows()},
                                     {"cols", p->value.cols()}});
      bin.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * p->value.size()));
    }
    if (!bin) throw RunError("short write to " + dir + "/" + file);
    manifest["archives"].push_back(
        ordered_json{{"name", arc.name}, {"file", file}, {"tensors", tensors}});
  }
  manifest["meta"] = meta;
  std::ofstream out(dir + "/manifest.json", std::ios::trunc);
  if (!out) throw RunError("cannot write " + dir + "/manifest.json");
  out << manifest.dump(2) << "\n";
}

namespace {

json read_manifest(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw TrainError("missing checkpoint manifest: " + dir + "/manifest.json");
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw TrainError("corrupt checkpoint manifest " + dir + ": " + e.what());
  }
  return manifest;
}

}  // namespace

void load_checkpoint(const std::string& dir, std::uint64_t expected_hash,
                     const std::vector<CheckpointArchive>& archives) {
  json manifest = read_manifest(dir);
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat)
      throw TrainError("unsupported checkpoint format in " + dir);
    if (manifest.at("config_hash").get<std::string>() != hex64(expected_hash))
      throw TrainError("checkpoint " + dir +
                       " was written under a different configuration; refusing to load");
    const json& arcs = manifest.at("archives");
    if (arcs.size() != archives.size())
      throw TrainError("checkpoint " + dir + ": archive count mismatch");
    for (std::size_t a = 0; a < archives.size(); ++a) {
      const CheckpointArchive& want = archives[a];
      const json& got = arcs.at(a);
      if (got.at("name").get<std::string>() != want.name)
        throw TrainError("checkpoint " + dir + ": archive '" +
                         got.at("name").get<std::string>() + "' where '" + want.name +
                         "' was expected");
      const json& tensors = got.at("tensors");
      if (tensors.size() != want.params.size())
        throw TrainError("checkpoint " + dir + ": tensor count mismatch in " + want.name);
      const std::string path = dir + "/" + got.at("file").get<std::string>();
      std::ifstream bin(path, std::ios::binary);
      if (!bin) throw TrainError("missing checkpoint archive " + path);
      for (std::size_t i = 0; i < want.params.size(); ++i) {
        Parameter& p = *want.params[i];
        const json& t = tensors.at(i);
        if (t.at("name").get<std::string>() != p.name ||
            t.at("rows").get<long>() != p.value.rows() ||
            t.at("cols").get<long>() != p.value.cols())
          throw TrainError("checkpoint " + dir + ": tensor '" + p.name +
                           "' has a different name or shape on disk");
        bin.read(reinterpret_cast<char*>(p.value.data()),
                 static_cast<std::streamsize>(sizeof(double) * p.value.size()));
        if (!bin)
          throw TrainError("checkpoint " + dir + ": short read in " + want.name);
      }
      bin.peek();
      if (!bin.eof())
        throw TrainError("checkpoint " + dir + ": trailing bytes in " + want.name);
    }
  } catch (const json::exception& e) {
    throw TrainError("corrupt checkpoint manifest " + dir + ": " + e.what());
  }
}

ordered_json read_checkpoint_meta(const std::string& dir) {
  json manifest = read_manifest(dir);
  if (!manifest.contains("meta")) return ordered_json::object();
  return ordered_json(manifest.at("meta"));
}

// --- logging -----------------------------------------------------------------------

MetricsLogger::MetricsLogger(const std::string& path, bool append)
    : path_(path),
      out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw RunError("cannot open metrics log " + path);
}

void MetricsLogger::log(const ordered_json& row) {
  out_ << row.dump() << "\n";
  out_.flush();
  if (!out_) throw RunError("failed writing metrics log " + path_);
}

// --- data plumbing --------------------------------------------------------------------

std::vector<int> PairedDataset::labels() const {
  std::vector<int> out;
  out.reserve(tab.size());
  for (const TabularSample& s : tab) out.push_back(s.label);
  return out;
}

PairedDataset prepare_pairs(const DatasetSchema& schema, const Tokenizer& tokenizer,
                            const Template& tmpl,
                            const std::vector<LabeledRecord>& records, int l_max) {
  PairedDataset data;
  data.tab.reserve(records.size());
  data.text.reserve(records.size());
  long ordinal = 0;
  for (const LabeledRecord& rec : records) {
    TabularSample sample = encode(schema, rec);
    data.text.push_back(
        tokenize_with_spans(sample, schema, tmpl, tokenizer, l_max, ordinal++));
    data.tab.push_back(std::move(sample));
  }
  return data;
}

std::pair<PairedDataset, PairedDataset> split_tail(const PairedDataset& data,
                                                   double tail_fraction) {
  if (!(tail_fraction >= 0.0) || tail_fraction >= 1.0)
    throw ConfigError("split_tail: fraction must lie in [0, 1)");
  const long n = static_cast<long>(data.size());
  const long tail = static_cast<long>(std::floor(tail_fraction * static_cast<double>(n)));
  const long head = n - tail;
  PairedDataset a, b;
  a.tab.assign(data.tab.begin(), data.tab.begin() + head);
  a.text.assign(data.text.begin(), data.text.begin() + head);
  b.tab.assign(data.tab.begin() + head, data.tab.end());
  b.text.assign(data.text.begin() + head, data.text.end());
  return {std::move(a), std::move(b)};
}

PretrainBatch assemble_pretrain_batch(const PairedDataset& data,
                                      const std::vector<long>& indices,
                                      const DatasetSchema& schema,
                                      const NoiseSampler& sampler,
                                      const TrainConfig& config, Rng& rng) {
  PretrainBatch batch;
  batch.clean_tab.reserve(indices.size());
  batch.clean_text.reserve(indices.size());
  batch.masked_text.reserve(indices.size());
  batch.masked_tab.reserve(indices.size());
  batch.noise.reserve(indices.size());
  for (long i : indices) {
    const TabularSample& tab = data.tab[static_cast<std::size_t>(i)];
    const TextualSample& text = data.text[static_cast<std::size_t>(i)];
    batch.clean_tab.push_back(tab);
    batch.clean_text.push_back(text);
    batch.masked_text.push_back(config.flags.field_level_masking
                                    ? mask_text_fieldlevel(text, config.r_text, rng)
                                    : mask_text_tokenlevel(text, config.r_text, rng));
    MaskedTabular masked = mask_tabular(tab, config.r_tab, schema, rng);
    std::vector<NoiseSample> noise;
    noise.reserve(masked.mask_fields.size());
    for (std::size_t j = 0; j < masked.mask_fields.size(); ++j) {
      NoiseSample ns;
      ns.positive_id = masked.targets[j];
      ns.noise_ids =
          sampler.draw(masked.mask_fields[j], ns.positive_id, config.k_noise, rng);
      noise.push_back(std::move(ns));
    }
    batch.masked_tab.push_back(std::move(masked));
    batch.noise.push_back(std::move(noise));
  }
  return batch;
}

// --- pretraining -------------------------------------------------------------------------

namespace {

std::vector<CheckpointArchive> pretrain_archives(IdTower& id_tower,
                                                 TextTower& text_tower,
                                                 Objectives& objectives) {
  return {{"id_tower", id_tower.params.all()},
          {"text_tower", text_tower.params.all()},
          {"objectives", objectives.params.all()}};
}

bool is_prediction_head(const std::string& name) { return name.rfind("head/", 0) == 0; }

bool all_finite(const std::vector<double>& xs) {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

PretrainResult pretrain(IdTower& id_tower, TextTower& text_tower,
                        Objectives& objectives, const PairedDataset& train,
                        const DatasetSchema& schema, const TrainConfig& config,
                        std::uint64_t config_hash, MetricsLogger* logger,
                        const std::string& checkpoint_dir) {
  PretrainResult result;
  auto archives = pretrain_archives(id_tower, text_tower, objectives);
  auto save = [&](const std::string& tag, int epoch) -> std::string {
    if (checkpoint_dir.empty()) return "";
    const std::string dir = checkpoint_dir + "/" + tag;
    ordered_json meta;
    meta["stage"] = "pretrain";
    meta["epoch"] = epoch;
    save_checkpoint(dir, config_hash, archives, meta);
    return dir;
  };

  const bool any_objective =
      config.flags.mlm || config.flags.mtm || config.flags.icl;
  if (!any_objective) {
    // Declared semantics of the all-off ablation: untouched random init.
    result.last_good_checkpoint = save("final", -1);
    return result;
  }

  const long n = static_cast<long>(train.size());
  if (n == 0) throw TrainError("pretrain: empty training set");
  if (config.pretrain_batch <= 0) throw ConfigError("pretrain: batch must be positive");
  if (config.pretrain_epochs <= 0) throw ConfigError("pretrain: epochs must be positive");

  NoiseSampler sampler(schema, config.noise_scope);

  // The ID tower's prediction head feeds no pretraining loss; leave it out so
  // weight decay cannot silently shrink an untouched tensor.
  std::vector<Parameter*> trainable;
  for (Parameter* p : id_tower.params.all())
    if (!is_prediction_head(p->name)) trainable.push_back(p);
  for (Parameter* p : text_tower.params.all()) trainable.push_back(p);
  for (Parameter* p : objectives.params.all()) trainable.push_back(p);

  OptimConfig opt_config;
  opt_config.weight_decay = config.weight_decay;
  AdamOptimizer optimizer(trainable, opt_config);

  const long batches = (n + config.pretrain_batch - 1) / config.pretrain_batch;
  const long total_steps = batches * config.pretrain_epochs;
  long step = 0;
  double best = std::numeric_limits<double>::infinity();

  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    Rng order_rng(mix_seed(config.seed, 0x5471, static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    Rng mask_rng(mix_seed(config.seed, 0xba7c, static_cast<std::uint64_t>(epoch)));

    double epoch_sum = 0.0;
    for (long b = 0; b < batches; ++b) {
      const long lo = b * config.pretrain_batch;
      const long hi = std::min(n, lo + config.pretrain_batch);
      std::vector<long> indices(order.begin() + lo, order.begin() + hi);
      PretrainBatch batch =
          assemble_pretrain_batch(train, indices, schema, sampler, config, mask_rng);

      const double lr = cosine_lr(step, total_steps, config.pretrain_lr);
      Tape t;
      PretrainLossParts parts;
      Var loss = pretrain_loss(t, id_tower, text_tower, objectives, batch,
                               config.flags, parts);
      if (!std::isfinite(parts.total)) {
        result.nan_abort = true;
        result.steps = step;
        if (logger)
          logger->log(ordered_json{{"stage", "pretrain"},
                                   {"event", "nan_abort"},
                                   {"epoch", epoch},
                                   {"step", step},
                                   {"last_good_checkpoint", result.last_good_checkpoint}});
        return result;
      }
      optimizer.zero_grad();
      t.backward(loss);
      optimizer.step(lr);
      if (logger)
        logger->log(ordered_json{{"stage", "pretrain"},
                                 {"epoch", epoch},
                                 {"step", step},
                                 {"mlm", parts.mlm},
                                 {"mtm", parts.mtm},
                                 {"icl", parts.icl},
                                 {"total", parts.total},
                                 {"lr", lr}});
      epoch_sum += parts.total;
      ++step;
    }

    const double epoch_mean = epoch_sum / static_cast<double>(batches);
    result.epoch_losses.push_back(epoch_mean);
    result.epochs_run = epoch + 1;
    if (epoch_mean < best) {
      best = epoch_mean;
      result.best_epoch = epoch;
      result.best_epoch_loss = epoch_mean;
      const std::string dir = save("best", epoch);
      if (!dir.empty()) result.last_good_checkpoint = dir;
    }
    const std::string dir = save("final", epoch);
    if (!dir.empty()) result.last_good_checkpoint = dir;
    if (logger)
      logger->log(ordered_json{{"stage", "pretrain"},
                               {"epoch", epoch},
                               {"epoch_mean_total", epoch_mean}});
  }
  result.steps = step;
  return result;
}

// --- finetuning ---------------------------------------------------------------------------

AdaptiveCombiner::AdaptiveCombiner(int d_tab, int d_text, unsigned long long seed) {
  if (d_tab <= 0 || d_text <= 0)
    throw ConfigError("combiner: representation widths must be positive");
  Rng rng(mix_seed(seed, 0xc03b));
  params.add("comb/id_w", xavier_init(rng, d_tab, 1));
  params.add("comb/id_b", Matrix::Zero(1, 1));
  params.add("comb/plm_w", xavier_init(rng, d_text, 1));
  params.add("comb/plm_b", Matrix::Zero(1, 1));
  params.add("comb/a", Matrix::Zero(1, 1));  // alpha starts at exactly 1/2
}

Var AdaptiveCombiner::id_logit(Tape& t, Var v) const {
  return t.add_rowvec(t.matmul(v, t.leaf(params.at("comb/id_w"))),
                      t.leaf(params.at("comb/id_b")));
}

Var AdaptiveCombiner::plm_logit(Tape& t, Var cls) const {
  return t.add_rowvec(t.matmul(cls, t.leaf(params.at("comb/plm_w"))),
                      t.leaf(params.at("comb/plm_b")));
}

Var AdaptiveCombiner::alpha(Tape& t) const {
  return t.sigmoid(t.leaf(params.at("comb/a")));
}

Var AdaptiveCombiner::combined_logit(Tape& t, Var logit_id, Var logit_plm) const {
  Var a = alpha(t);
  Var complement = t.sub(t.constant(Matrix::Ones(1, 1)), a);
  return t.add(t.scale_by(logit_id, a), t.scale_by(logit_plm, complement));
}

double AdaptiveCombiner::alpha_value() const {
  const double a = params.at("comb/a").value(0, 0);
  return 1.0 / (1.0 + std::exp(-a));
}

Var bce_mean(Tape& t, Var logit, const std::vector<int>& labels) {
  const long n = t.value(logit).rows();
  if (n != static_cast<long>(labels.size()))
    throw std::logic_error("bce_mean: logit/label size mismatch");
  Matrix y(n, 1);
  for (long i = 0; i < n; ++i) y(i, 0) = labels[static_cast<std::size_t>(i)];
  return t.mean(t.sub(t.softplus(logit), t.mul(logit, t.constant(std::move(y)))));
}

FinetuneModel::FinetuneModel(IdTower& id_tower, TextTower& text_tower,
                             AdaptiveCombiner& combiner, Variant variant)
    : id_tower_(&id_tower),
      text_tower_(&text_tower),
      combiner_(&combiner),
      variant_(variant) {}

Var FinetuneModel::loss(Tape& t, const std::vector<TabularSample>& tab,
                        const std::vector<TextualSample>& text,
                        FinetuneLossParts* parts) const {
  std::vector<int> labels;
  labels.reserve(tab.size());
  for (const TabularSample& s : tab) labels.push_back(s.label);

  FinetuneLossParts local;
  Var total;
  switch (variant_) {
    case Variant::flip: {
      Var v = id_tower_->encode(t, tab);
      SeqLayout layout;
      Var w = text_tower_->encode(t, text, layout);
      Var cls = t.select_rows(w, cls_row_indices(layout));
      Var logit_id = combiner_->id_logit(t, v);
      Var logit_plm = combiner_->plm_logit(t, cls);
      Var logit = combiner_->combined_logit(t, logit_id, logit_plm);
      Var l_joint = bce_mean(t, logit, labels);
      Var l_id = bce_mean(t, logit_id, labels);
      Var l_plm = bce_mean(t, logit_plm, labels);
      total = t.add(t.add(l_joint, l_id), l_plm);
      local.joint = t.value(l_joint)(0, 0);
      local.id = t.value(l_id)(0, 0);
      local.plm = t.value(l_plm)(0, 0);
      break;
    }
    case Variant::flip_id: {
      Var logit = combiner_->id_logit(t, id_tower_->encode(t, tab));
      total = bce_mean(t, logit, labels);
      local.id = t.value(total)(0, 0);
      break;
    }
    case Variant::flip_plm: {
      SeqLayout layout;
      Var w = text_tower_->encode(t, text, layout);
      Var logit = combiner_->plm_logit(t, t.select_rows(w, cls_row_indices(layout)));
      total = bce_mean(t, logit, labels);
      local.plm = t.value(total)(0, 0);
      break;
    }
    case Variant::scratch: {
      Var logit = id_tower_->predict_logit(t, id_tower_->encode(t, tab));
      total = bce_mean(t, logit, labels);
      break;
    }
  }
  local.total = t.value(total)(0, 0);
  if (parts) *parts = local;
  return total;
}

std::vector<double> FinetuneModel::predict(const PairedDataset& data,
                                           int batch_size) const {
  std::vector<double> probs;
  probs.reserve(data.size());
  for (std::size_t start = 0; start < data.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end =
        std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<TabularSample> tab(data.tab.begin() + static_cast<long>(start),
                                   data.tab.begin() + static_cast<long>(end));
    std::vector<TextualSample> text(data.text.begin() + static_cast<long>(start),
                                    data.text.begin() + static_cast<long>(end));
    Tape t;
    Var logit;
    switch (variant_) {
      case Variant::flip: {
        Var logit_id = combiner_->id_logit(t, id_tower_->encode(t, tab));
        SeqLayout layout;
        Var w = text_tower_->encode(t, text, layout);
        Var logit_plm =
            combiner_->plm_logit(t, t.select_rows(w, cls_row_indices(layout)));
        logit = combiner_->combined_logit(t, logit_id, logit_plm);
        break;
      }
      case Variant::flip_id:
        logit = combiner_->id_logit(t, id_tower_->encode(t, tab));
        break;
      case Variant::flip_plm: {
        SeqLayout layout;
        Var w = text_tower_->encode(t, text, layout);
        logit = combiner_->plm_logit(t, t.select_rows(w, cls_row_indices(layout)));
        break;
      }
      case Variant::scratch:
        logit = id_tower_->predict_logit(t, id_tower_->encode(t, tab));
        break;
    }
    const Matrix& lv = t.value(logit);
    for (long i = 0; i < lv.rows(); ++i)
      probs.push_back(1.0 / (1.0 + std::exp(-lv(i, 0))));
  }
  return probs;
}

std::vector<Parameter*> FinetuneModel::trainable() const {
  std::vector<Parameter*> out;
  switch (variant_) {
    case Variant::flip:
      for (Parameter* p : id_tower_->params.all())
        if (!is_prediction_head(p->name)) out.push_back(p);
      for (Parameter* p : text_tower_->params.all()) out.push_back(p);
      for (Parameter* p : combiner_->params.all()) out.push_back(p);
      break;
    case Variant::flip_id:
      for (Parameter* p : id_tower_->params.all())
        if (!is_prediction_head(p->name)) out.push_back(p);
      out.push_back(&combiner_->params.at("comb/id_w"));
      out.push_back(&combiner_->params.at("comb/id_b"));
      break;
    case Variant::flip_plm:
      for (Parameter* p : text_tower_->params.all()) out.push_back(p);
      out.push_back(&combiner_->params.at("comb/plm_w"));
      out.push_back(&combiner_->params.at("comb/plm_b"));
      break;
    case Variant::scratch:
      for (Parameter* p : id_tower_->params.all()) out.push_back(p);
      break;
  }
  return out;
}

FinetuneResult finetune(FinetuneModel& model, const PairedDataset& train,
                        const PairedDataset& test, const TrainConfig& config,
                        MetricsLogger* logger) {
  if (config.lr_grid.empty()) throw ConfigError("finetune: empty lr grid");
  if (config.finetune_batch <= 0) throw ConfigError("finetune: batch must be positive");
  auto [fit, val] = split_tail(train, config.val_fraction);
  if (fit.size() == 0 || val.size() == 0)
    throw TrainError("finetune: train/validation split left an empty side");

  const std::vector<Parameter*> trainable = model.trainable();
  auto snapshot = [&] {
    std::vector<Matrix> snap;
    snap.reserve(trainable.size());
    for (const Parameter* p : trainable) snap.push_back(p->value);
    return snap;
  };
  auto restore = [&](const std::vector<Matrix>& snap) {
    for (std::size_t i = 0; i < trainable.size(); ++i)
      trainable[i]->value = snap[i];
  };
  const std::vector<Matrix> init = snapshot();
  const std::vector<int> val_labels = val.labels();

  FinetuneResult result;
  result.best_val_auc = -1.0;
  std::vector<Matrix> best_snapshot;

  const long n = static_cast<long>(fit.size());
  std::vector<long> order(static_cast<std::size_t>(n));
  for (std::size_t lr_index = 0; lr_index < config.lr_grid.size(); ++lr_index) {
    const double lr = config.lr_grid[lr_index];
    restore(init);
    AdamOptimizer optimizer(trainable, OptimConfig{});  // plain Adam, no decay

    FinetuneArm arm;
    arm.lr = lr;
    // The untrained model is the early-stopping baseline, so a zero-epoch
    // run still yields a defined (chance-level) arm.
    std::vector<double> val_probs = model.predict(val);
    if (!all_finite(val_probs)) {
      arm.nan_abort = true;
      result.arms.push_back(arm);
      continue;
    }
    double arm_best = auc(val_labels, val_probs);
    std::vector<Matrix> arm_snapshot = snapshot();
    int patience_left = config.patience;

    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < config.finetune_epochs; ++epoch) {
      Rng rng(mix_seed(config.seed, 0xf17e,
                       static_cast<std::uint64_t>(lr_index),
                       static_cast<std::uint64_t>(epoch)));
      rng.shuffle(order);
      bool nan = false;
      for (long lo = 0; lo < n; lo += config.finetune_batch) {
        const long hi = std::min(n, lo + config.finetune_batch);
        std::vector<TabularSample> tab;
        std::vector<TextualSample> text;
        tab.reserve(static_cast<std::size_t>(hi - lo));
        text.reserve(static_cast<std::size_t>(hi - lo));
        for (long i = lo; i < hi; ++i) {
          tab.push_back(fit.tab[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
          text.push_back(fit.text[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
        }
        Tape t;
        FinetuneLossParts parts;
        Var loss = model.loss(t, tab, text, &parts);
        if (!std::isfinite(parts.total)) {
          nan = true;
          break;
        }
        for (Parameter* p : trainable) p->zero_grad();
        t.backward(loss);
        optimizer.step(lr);
      }
      if (nan) {
        arm.nan_abort = true;
        if (logger)
          logger->log(ordered_json{{"stage", "finetune"},
                                   {"variant", variant_name(model.variant())},
                                   {"event", "nan_abort"},
                                   {"lr", lr},
                                   {"epoch", epoch}});
        break;
      }
      arm.epochs_run = epoch + 1;
      val_probs = model.predict(val);
      if (!all_finite(val_probs)) {
        arm.nan_abort = true;
        break;
      }
      const double val_auc = auc(val_labels, val_probs);
      if (logger)
        logger->log(ordered_json{{"stage", "finetune"},
                                 {"variant", variant_name(model.variant())},
                                 {"lr", lr},
                                 {"epoch", epoch},
                                 {"split", "val"},
                                 {"auc", val_auc},
                                 {"alpha", model.alpha_value()}});
      if (val_auc > arm_best) {
        arm_best = val_auc;
        arm_snapshot = snapshot();
        patience_left = config.patience;
      } else if (--patience_left <= 0) {
        break;
      }
    }
    arm.val_auc = arm_best;
    result.arms.push_back(arm);
    if (!arm.nan_abort && arm_best > result.best_val_auc) {
      result.best_val_auc = arm_best;
      result.best_lr = lr;
      best_snapshot = std::move(arm_snapshot);
    }
  }

  if (best_snapshot.empty())
    throw TrainError("finetune: every learning-rate arm diverged");
  restore(best_snapshot);
  result.test = evaluate(test.labels(), model.predict(test), "test");
  result.alpha = model.alpha_value();
  if (logger)
    logger->log(ordered_json{{"stage", "finetune"},
                             {"variant", variant_name(model.variant())},
                             {"split", "test"},
                             {"lr", result.best_lr},
                             {"auc", result.test.auc},
                             {"logloss", result.test.logloss},
                             {"alpha", result.alpha}});
  return result;
}

}  // namespace flip
