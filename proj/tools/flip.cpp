// Operator entry point for the two-tower CTR pipeline. Commands build on one
// run directory: preprocess -> pretrain -> finetune -> eval, plus ablate (a
// fixed variant matrix) and analyze (alignment heatmap + embedding map).
//
// Configuration precedence, lowest to highest: built-in defaults, the
// --config JSON file, then explicit command-line flags. The effective
// configuration lives in <run>/manifest.json; later commands read it back,
// and every explicitly passed flag is recorded verbatim under "overrides".

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flip/data.hpp"
#include "flip/errors.hpp"
#include "flip/evalysis.hpp"
#include "flip/id_tower.hpp"
#include "flip/masking.hpp"
#include "flip/objectives.hpp"
#include "flip/text_tower.hpp"
#include "flip/textual.hpp"
#include "flip/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace flip;

namespace {

constexpr const char* kManifestFormat = "flip-run-v1";
constexpr const char* kValidRules = "movielens, bookcrossing, goodreads";

// --- run directory layout ----------------------------------------------------

struct RunPaths {
  fs::path root;

  explicit RunPaths(const std::string& out) : root(out) {}
  fs::path manifest() const { return root / "manifest.json"; }
  fs::path schema() const { return root / "schema.json"; }
  fs::path tokenizer() const { return root / "tokenizer.json"; }
  fs::path metrics() const { return root / "metrics.jsonl"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path reports() const { return root / "reports"; }
  fs::path data() const { return root / "data"; }
  fs::path lock() const { return root / ".lock"; }
};

// One command per run directory at a time. The lock file is created
// exclusively and removed on scope exit (including exceptions).
class RunLock {
 public:
  explicit RunLock(const fs::path& path) : path_(path) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw RunError("another command holds " + path_.string() +
                     "; remove the file if it is stale");
    ::close(fd);
  }
  ~RunLock() { ::unlink(path_.c_str()); }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

// --- configuration tree ---------------------------------------------------------

struct DataSpec {
  std::string label_column = "rating";
  std::string timestamp_column = "timestamp";
  std::vector<std::string> field_columns;  // empty: every other header column
  std::string delimiter = "\t";
  double train_fraction = 0.9;
};

struct TokenizerSpec {
  int max_vocab = 30000;
  bool lowercase = true;
};

struct RunConfig {
  TrainConfig train;
  IdTowerConfig id_tower;
  EncoderSpec encoder;
  ObjectiveConfig objectives;  // derived fields filled after preprocessing
  SyntheticConfig synthetic;
  DataSpec data;
  TokenizerSpec tokenizer;
};

void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                         const std::string& where) {
  for (const auto& item : j.items())
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw ConfigError("unknown key '" + item.key() + "' in " + where);
}

void patch_train(TrainConfig& c, const json& j) {
  reject_unknown_keys(j, {"r_text", "r_tab", "k_noise", "tau", "noise_scope", "flags",
                          "pretrain_epochs", "pretrain_batch", "pretrain_lr",
                          "weight_decay", "lr_grid", "finetune_batch",
                          "finetune_epochs", "patience", "val_fraction", "seed"},
                      "train");
  if (j.contains("r_text")) c.r_text = j["r_text"].get<double>();
  if (j.contains("r_tab")) c.r_tab = j["r_tab"].get<double>();
  if (j.contains("k_noise")) c.k_noise = j["k_noise"].get<int>();
  if (j.contains("tau")) c.tau = j["tau"].get<double>();
  if (j.contains("noise_scope"))
    c.noise_scope = noise_scope_from_name(j["noise_scope"].get<std::string>());
  if (j.contains("flags")) {
    const json& f = j["flags"];
    reject_unknown_keys(f, {"mlm", "mtm", "icl", "joint_reconstruction",
                            "field_level_masking"},
                        "train.flags");
    if (f.contains("mlm")) c.flags.mlm = f["mlm"].get<bool>();
    if (f.contains("mtm")) c.flags.mtm = f["mtm"].get<bool>();
    if (f.contains("icl")) c.flags.icl = f["icl"].get<bool>();
    if (f.contains("joint_reconstruction"))
      c.flags.joint_reconstruction = f["joint_reconstruction"].get<bool>();
    if (f.contains("field_level_masking"))
      c.flags.field_level_masking = f["field_level_masking"].get<bool>();
  }
  if (j.contains("pretrain_epochs")) c.pretrain_epochs = j["pretrain_epochs"].get<int>();
  if (j.contains("pretrain_batch")) c.pretrain_batch = j["pretrain_batch"].get<int>();
  if (j.contains("pretrain_lr")) c.pretrain_lr = j["pretrain_lr"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("lr_grid")) c.lr_grid = j["lr_grid"].get<std::vector<double>>();
  if (j.contains("finetune_batch")) c.finetune_batch = j["finetune_batch"].get<int>();
  if (j.contains("finetune_epochs")) c.finetune_epochs = j["finetune_epochs"].get<int>();
  if (j.contains("patience")) c.patience = j["patience"].get<int>();
  if (j.contains("val_fraction")) c.val_fraction = j["val_fraction"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<unsigned long long>();
}

void patch_id_tower(IdTowerConfig& c, const json& j) {
  reject_unknown_keys(
      j, {"backbone", "d_emb", "dnn_sizes", "cross_depth", "attn_layers", "attn_heads"},
      "id_tower");
  if (j.contains("backbone")) c.kind = backbone_from_name(j["backbone"].get<std::string>());
  if (j.contains("d_emb")) c.d_emb = j["d_emb"].get<int>();
  if (j.contains("dnn_sizes")) c.dnn_sizes = j["dnn_sizes"].get<std::vector<int>>();
  if (j.contains("cross_depth")) c.cross_depth = j["cross_depth"].get<int>();
  if (j.contains("attn_layers")) c.attn_layers = j["attn_layers"].get<int>();
  if (j.contains("attn_heads")) c.attn_heads = j["attn_heads"].get<int>();
}

void patch_encoder(EncoderSpec& s, const json& j) {
  reject_unknown_keys(j, {"d_text", "n_layers", "n_heads", "d_ff", "l_max", "dropout"},
                      "encoder");
  if (j.contains("d_text")) s.d_text = j["d_text"].get<int>();
  if (j.contains("n_layers")) s.n_layers = j["n_layers"].get<int>();
  if (j.contains("n_heads")) s.n_heads = j["n_heads"].get<int>();
  if (j.contains("d_ff")) s.d_ff = j["d_ff"].get<int>();
  if (j.contains("l_max")) s.l_max = j["l_max"].get<int>();
  if (j.contains("dropout")) s.dropout = j["dropout"].get<double>();
}

void patch_objectives(ObjectiveConfig& c, const json& j) {
  reject_unknown_keys(j, {"mlm_hidden", "mtm_hidden", "icl_dim"}, "objectives");
  if (j.contains("mlm_hidden")) c.mlm_hidden = j["mlm_hidden"].get<int>();
  if (j.contains("mtm_hidden")) c.mtm_hidden = j["mtm_hidden"].get<int>();
  if (j.contains("icl_dim")) c.icl_dim = j["icl_dim"].get<int>();
}

void patch_synthetic(SyntheticConfig& c, const json& j) {
  reject_unknown_keys(j, {"n", "fields", "vocab_size", "bias", "pair_scale",
                          "main_scale", "word_scale", "noise_scale",
                          "train_fraction"},
                      "synthetic");
  if (j.contains("n")) c.n = j["n"].get<long>();
  if (j.contains("fields")) c.fields = j["fields"].get<int>();
  if (j.contains("vocab_size")) c.vocab_size = j["vocab_size"].get<int>();
  if (j.contains("bias")) c.bias = j["bias"].get<double>();
  if (j.contains("pair_scale")) c.pair_scale = j["pair_scale"].get<double>();
  if (j.contains("main_scale")) c.main_scale = j["main_scale"].get<double>();
  if (j.contains("word_scale")) c.word_scale = j["word_scale"].get<double>();
  if (j.contains("noise_scale")) c.noise_scale = j["noise_scale"].get<double>();
  if (j.contains("train_fraction")) c.train_fraction = j["train_fraction"].get<double>();
}

void patch_data(DataSpec& c, const json& j) {
  reject_unknown_keys(j, {"label_column", "timestamp_column", "field_columns",
                          "delimiter", "train_fraction"},
                      "data");
  if (j.contains("label_column")) c.label_column = j["label_column"].get<std::string>();
  if (j.contains("timestamp_column"))
    c.timestamp_column = j["timestamp_column"].get<std::string>();
  if (j.contains("field_columns"))
    c.field_columns = j["field_columns"].get<std::vector<std::string>>();
  if (j.contains("delimiter")) c.delimiter = j["delimiter"].get<std::string>();
  if (j.contains("train_fraction")) c.train_fraction = j["train_fraction"].get<double>();
}

void patch_tokenizer(TokenizerSpec& c, const json& j) {
  reject_unknown_keys(j, {"max_vocab", "lowercase"}, "tokenizer");
  if (j.contains("max_vocab")) c.max_vocab = j["max_vocab"].get<int>();
  if (j.contains("lowercase")) c.lowercase = j["lowercase"].get<bool>();
}

void patch_run_config(RunConfig& cfg, const json& j) {
  reject_unknown_keys(j, {"train", "id_tower", "encoder", "objectives", "synthetic",
                          "data", "tokenizer"},
                      "config");
  try {
    if (j.contains("train")) patch_train(cfg.train, j["train"]);
    if (j.contains("id_tower")) patch_id_tower(cfg.id_tower, j["id_tower"]);
    if (j.contains("encoder")) patch_encoder(cfg.encoder, j["encoder"]);
    if (j.contains("objectives")) patch_objectives(cfg.objectives, j["objectives"]);
    if (j.contains("synthetic")) patch_synthetic(cfg.synthetic, j["synthetic"]);
    if (j.contains("data")) patch_data(cfg.data, j["data"]);
    if (j.contains("tokenizer")) patch_tokenizer(cfg.tokenizer, j["tokenizer"]);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
}

ordered_json data_spec_to_json(const DataSpec& c) {
  return ordered_json{{"label_column", c.label_column},
                      {"timestamp_column", c.timestamp_column},
                      {"field_columns", c.field_columns},
                      {"delimiter", c.delimiter},
                      {"train_fraction", c.train_fraction}};
}

ordered_json synthetic_to_json(const SyntheticConfig& c) {
  return ordered_json{{"n", c.n},
                      {"fields", c.fields},
                      {"vocab_size", c.vocab_size},
                      {"bias", c.bias},
                      {"pair_scale", c.pair_scale},
                      {"main_scale", c.main_scale},
                      {"word_scale", c.word_scale},
                      {"noise_scale", c.noise_scale},
                      {"train_fraction", c.train_fraction}};
}

ordered_json run_config_to_json(const RunConfig& cfg) {
  ordered_json j;
  j["train"] = train_config_to_json(cfg.train);
  j["id_tower"] = id_tower_config_to_json(cfg.id_tower);
  j["encoder"] = encoder_spec_to_json(cfg.encoder);
  j["objectives"] = objective_config_to_json(cfg.objectives);
  j["synthetic"] = synthetic_to_json(cfg.synthetic);
  j["data"] = data_spec_to_json(cfg.data);
  j["tokenizer"] = ordered_json{{"max_vocab", cfg.tokenizer.max_vocab},
                                {"lowercase", cfg.tokenizer.lowercase}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  RunConfig cfg;
  cfg.train = train_config_from_json(j.at("train"));
  cfg.id_tower = id_tower_config_from_json(j.at("id_tower"));
  cfg.encoder = encoder_spec_from_json(j.at("encoder"));
  cfg.objectives = objective_config_from_json(j.at("objectives"));
  patch_synthetic(cfg.synthetic, j.at("synthetic"));
  patch_data(cfg.data, j.at("data"));
  patch_tokenizer(cfg.tokenizer, j.at("tokenizer"));
  return cfg;
}

// Stage, variant, and the finetuning schedule select what a command executes;
// none of them shape the tensors a checkpoint stores. Canonicalize them so
// one hash covers the architecture plus everything pretraining depends on.
std::uint64_t run_hash(const RunConfig& cfg) {
  TrainConfig canon = cfg.train;
  canon.stage = Stage::pretrain;
  canon.variant = Variant::flip;
  const TrainConfig defaults;
  canon.lr_grid = defaults.lr_grid;
  canon.finetune_batch = defaults.finetune_batch;
  canon.finetune_epochs = defaults.finetune_epochs;
  canon.patience = defaults.patience;
  canon.val_fraction = defaults.val_fraction;
  return config_hash(canon, cfg.id_tower, cfg.encoder, cfg.objectives);
}

// --- shared command-line flags ------------------------------------------------------

struct SharedOpts {
  std::string out;
  std::string config_path;
  unsigned long long seed = 0;
  double tau = 0.7;
  double r_text = 0.15;
  double r_tab = 0.15;
  int k_noise = 25;
  std::string backbone = "dcnv2";
  bool force = false;

  CLI::Option* seed_o = nullptr;
  CLI::Option* tau_o = nullptr;
  CLI::Option* r_text_o = nullptr;
  CLI::Option* r_tab_o = nullptr;
  CLI::Option* k_noise_o = nullptr;
  CLI::Option* backbone_o = nullptr;
  CLI::Option* config_o = nullptr;

  void attach(CLI::App* cmd, bool with_knobs = true) {
    cmd->add_option("--out", out, "run directory")->required();
    cmd->add_flag("--force", force, "redo the command even when already complete");
    config_o = cmd->add_option("--config", config_path,
                               "JSON config file (flags take precedence)");
    if (!with_knobs) return;
    seed_o = cmd->add_option("--seed", seed, "master seed");
    tau_o = cmd->add_option("--tau", tau, "contrastive temperature");
    r_text_o = cmd->add_option("--r-text", r_text, "text-side mask ratio");
    r_tab_o = cmd->add_option("--r-tab", r_tab, "tabular-side mask ratio");
    k_noise_o = cmd->add_option("--k-noise", k_noise, "noise samples per masked field");
    backbone_o = cmd->add_option("--backbone", backbone, "ID backbone")
                     ->check(CLI::IsMember({"dcnv2", "deepfm", "autoint"}));
  }

  // Only flags the user actually passed, recorded as parsed.
  ordered_json verbatim() const {
    ordered_json j = ordered_json::object();
    if (config_o && config_o->count()) j["config"] = config_path;
    if (seed_o && seed_o->count()) j["seed"] = seed;
    if (tau_o && tau_o->count()) j["tau"] = tau;
    if (r_text_o && r_text_o->count()) j["r_text"] = r_text;
    if (r_tab_o && r_tab_o->count()) j["r_tab"] = r_tab;
    if (k_noise_o && k_noise_o->count()) j["k_noise"] = k_noise;
    if (backbone_o && backbone_o->count()) j["backbone"] = backbone;
    return j;
  }

  void apply(RunConfig& cfg) const {
    if (config_o && config_o->count()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot read config file " + config_path);
      json j;
      try {
        in >> j;
      } catch (const json::exception& e) {
        throw ConfigError("config file " + config_path + ": " + e.what());
      }
      patch_run_config(cfg, j);
    }
    if (seed_o && seed_o->count()) cfg.train.seed = seed;
    if (tau_o && tau_o->count()) {
      cfg.train.tau = tau;
      cfg.objectives.tau = tau;
    }
    if (r_text_o && r_text_o->count()) cfg.train.r_text = r_text;
    if (r_tab_o && r_tab_o->count()) cfg.train.r_tab = r_tab;
    if (k_noise_o && k_noise_o->count()) cfg.train.k_noise = k_noise;
    if (backbone_o && backbone_o->count())
      cfg.id_tower.kind = backbone_from_name(backbone);
  }
};

// --- manifest ------------------------------------------------------------------------

ordered_json read_manifest(const RunPaths& paths) {
  std::ifstream in(paths.manifest());
  if (!in)
    throw RunError(paths.root.string() +
                   " is not a run directory; run 'flip preprocess' first");
  ordered_json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw RunError("corrupt manifest in " + paths.root.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != kManifestFormat)
    throw RunError("unsupported manifest format in " + paths.root.string());
  return manifest;
}

void write_manifest(const RunPaths& paths, const ordered_json& manifest) {
  std::ofstream out(paths.manifest(), std::ios::trunc);
  if (!out) throw RunError("cannot write " + paths.manifest().string());
  out << manifest.dump(2) << "\n";
}

bool stage_complete(const ordered_json& manifest, const std::string& key) {
  return manifest.contains("completed") && manifest["completed"].value(key, false);
}

void record_command(ordered_json& manifest, const std::string& command,
                    const ordered_json& overrides, const RunConfig& cfg) {
  if (!overrides.empty()) manifest["overrides"][command] = overrides;
  manifest["config"] = run_config_to_json(cfg);
}

// --- record files -----------------------------------------------------------------------

void write_records_tsv(const fs::path& path, const std::vector<std::string>& field_names,
                       const std::vector<LabeledRecord>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RunError("cannot write " + path.string());
  for (const std::string& name : field_names) out << name << '\t';
  out << "label\ttimestamp\n";
  char ts[64];
  for (const LabeledRecord& rec : records) {
    for (const std::string& value : rec.fields) {
      if (value.find_first_of("\t\n") != std::string::npos)
        throw RunError("field value contains a tab or newline; cannot store as TSV");
      out << value << '\t';
    }
    std::snprintf(ts, sizeof ts, "%.17g", rec.timestamp);
    out << rec.label << '\t' << ts << '\n';
  }
  if (!out) throw RunError("short write to " + path.string());
}

std::vector<LabeledRecord> read_records_tsv(const fs::path& path,
                                            std::size_t num_fields) {
  std::ifstream in(path);
  if (!in) throw RunError("missing data file " + path.string() +
                          "; run 'flip preprocess' first");
  std::string line;
  if (!std::getline(in, line)) throw RunError("empty data file " + path.string());
  std::vector<LabeledRecord> records;
  long row = 0;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      cells.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (cells.size() != num_fields + 2)
      throw RunError(path.string() + ": bad column count at data row " +
                     std::to_string(row));
    LabeledRecord rec;
    rec.fields.assign(cells.begin(), cells.begin() + static_cast<long>(num_fields));
    rec.label = std::stoi(cells[num_fields]);
    rec.timestamp = std::stod(cells[num_fields + 1]);
    rec.order = row++;
    records.push_back(std::move(rec));
  }
  return records;
}

// --- model assembly ------------------------------------------------------------------------

struct Models {
  std::unique_ptr<IdTower> id;
  std::unique_ptr<TextTower> text;
  std::unique_ptr<Objectives> objectives;
};

// Fills the derived objective fields (vocabulary, feature space, tower
// widths) from the preprocessed artifacts, then instantiates everything.
Models build_models(RunConfig& cfg, const DatasetSchema& schema, const Tokenizer& tok) {
  Models m;
  cfg.encoder.vocab = tok.V();
  m.id = std::make_unique<IdTower>(schema.M, schema.F(), cfg.id_tower, cfg.train.seed);
  m.text = std::make_unique<TextTower>(cfg.encoder, cfg.train.seed);
  cfg.objectives.d_text = cfg.encoder.d_text;
  cfg.objectives.d_tab = m.id->d_tab();
  cfg.objectives.vocab = tok.V();
  cfg.objectives.num_features = schema.M;
  cfg.objectives.num_fields = schema.F();
  cfg.objectives.tau = cfg.train.tau;
  m.objectives = std::make_unique<Objectives>(cfg.objectives, cfg.train.seed);
  return m;
}

std::vector<CheckpointArchive> tower_archives(Models& m) {
  return {{"id_tower", m.id->params.all()},
          {"text_tower", m.text->params.all()},
          {"objectives", m.objectives->params.all()}};
}

std::vector<CheckpointArchive> supervised_archives(Models& m, AdaptiveCombiner& comb) {
  return {{"id_tower", m.id->params.all()},
          {"text_tower", m.text->params.all()},
          {"combiner", comb.params.all()}};
}

// --- loaded run state -------------------------------------------------------------------------

struct LoadedRun {
  ordered_json manifest;
  RunConfig config;
  DatasetSchema schema;
  Tokenizer tok;
  PairedDataset train;
  PairedDataset test;
};

LoadedRun load_run(const RunPaths& paths) {
  LoadedRun run;
  run.manifest = read_manifest(paths);
  if (!stage_complete(run.manifest, "preprocess"))
    throw RunError("run directory has no preprocessed dataset; run 'flip preprocess' first");
  try {
    run.config = run_config_from_json(run.manifest.at("config"));
  } catch (const json::exception& e) {
    throw RunError("corrupt manifest config: " + std::string(e.what()));
  }
  run.schema = load_schema(paths.schema().string());
  run.tok = load_tokenizer(paths.tokenizer().string());
  Template tmpl;
  const std::size_t f = run.schema.field_names.size();
  run.train = prepare_pairs(run.schema, run.tok, tmpl,
                            read_records_tsv(paths.data() / "train.tsv", f),
                            run.config.encoder.l_max);
  run.test = prepare_pairs(run.schema, run.tok, tmpl,
                           read_records_tsv(paths.data() / "test.tsv", f),
                           run.config.encoder.l_max);
  return run;
}

// --- report helpers -----------------------------------------------------------------------------

std::string md_table(const std::vector<std::string>& headers,
                     const std::vector<std::vector<std::string>>& rows) {
  std::ostringstream out;
  out << "|";
  for (const std::string& h : headers) out << " " << h << " |";
  out << "\n|";
  for (std::size_t i = 0; i < headers.size(); ++i) out << " --- |";
  out << "\n";
  for (const auto& row : rows) {
    out << "|";
    for (const std::string& cell : row) out << " " << cell << " |";
    out << "\n";
  }
  return out.str();
}

std::string fmt(double x, int precision = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, x);
  return buf;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw RunError("cannot write " + path.string());
  out << text;
}

// --- preprocess ----------------------------------------------------------------------------------

struct PreprocessOpts {
  SharedOpts shared;
  std::string data_path;
  std::string rule = "movielens";
  CLI::Option* data_o = nullptr;
  CLI::Option* rule_o = nullptr;
};

// Header of a delimited file, for defaulting the field column list.
std::vector<std::string> read_header(const std::string& path, char delim) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot read " + path);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path + " is empty");
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    cols.push_back(line.substr(start, pos == std::string::npos ? pos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return cols;
}

int cmd_preprocess(const PreprocessOpts& opts) {
  RunPaths paths(opts.shared.out);
  fs::create_directories(paths.root);
  RunLock lock(paths.lock());

  if (fs::exists(paths.manifest()) && !opts.shared.force) {
    ordered_json manifest = read_manifest(paths);
    if (stage_complete(manifest, "preprocess")) {
      std::cout << "preprocess: already complete (use --force to redo)\n";
      return 0;
    }
  }

  RunConfig cfg;
  opts.shared.apply(cfg);

  ordered_json source;
  std::vector<std::string> field_names;
  std::vector<LabeledRecord> train, test;
  if (opts.data_o->count()) {
    const LabelRule rule = label_rule_from_name(opts.rule);  // validated by caller
    DataSpec& d = cfg.data;
    const char delim = d.delimiter.empty() ? '\t' : d.delimiter[0];
    if (d.field_columns.empty()) {
      for (const std::string& col : read_header(opts.data_path, delim))
        if (col != d.label_column && col != d.timestamp_column)
          d.field_columns.push_back(col);
    }
    TableSpec spec;
    spec.field_columns = d.field_columns;
    spec.label_column = d.label_column;
    spec.timestamp_column = d.timestamp_column;
    spec.delimiter = delim;
    std::vector<LabeledRecord> labeled =
        binarize_labels(load_tabular(opts.data_path, spec), rule);
    SplitSpec split;
    split.train_fraction = d.train_fraction;
    std::tie(train, test) = chronological_split(std::move(labeled), split);
    field_names = d.field_columns;
    source = ordered_json{{"kind", "file"}, {"path", opts.data_path}, {"rule", opts.rule}};
  } else {
    // Decorrelated from the training seed: the dataset is an input, not a
    // function of how we later train on it.
    SyntheticDataset data =
        generate_synthetic(cfg.synthetic, mix_seed(cfg.train.seed, 0xda7a));
    field_names = data.field_names;
    train = std::move(data.train);
    test = std::move(data.test);
    source = ordered_json{{"kind", "synthetic"}, {"seed", cfg.train.seed}};
  }
  if (train.empty()) throw SchemaError("empty training split");

  DatasetSchema schema = build_schema(field_names, train);
  save_schema(schema, paths.schema().string());

  Template tmpl;
  std::vector<std::string> docs;
  docs.reserve(train.size());
  for (const TabularSample& s : encode_all(schema, train))
    docs.push_back(render_text(s, schema, tmpl));
  Tokenizer tok = build_tokenizer(docs, cfg.tokenizer.max_vocab, cfg.tokenizer.lowercase);
  save_tokenizer(tok, paths.tokenizer().string());

  fs::create_directories(paths.data());
  fs::create_directories(paths.checkpoints());
  fs::create_directories(paths.reports());
  write_records_tsv(paths.data() / "train.tsv", field_names, train);
  write_records_tsv(paths.data() / "test.tsv", field_names, test);

  // Instantiating the towers once fills the derived width/vocabulary fields
  // that the config hash and later commands rely on.
  build_models(cfg, schema, tok);

  ordered_json manifest;
  manifest["format"] = kManifestFormat;
  manifest["source"] = source;
  manifest["config"] = run_config_to_json(cfg);
  {
    std::ostringstream hex;
    hex << std::hex << run_hash(cfg);
    manifest["config_hash"] = hex.str();
  }
  manifest["overrides"] = ordered_json::object();
  ordered_json overrides = opts.shared.verbatim();
  if (opts.data_o->count()) overrides["data"] = opts.data_path;
  if (opts.rule_o->count()) overrides["rule"] = opts.rule;
  if (!overrides.empty()) manifest["overrides"]["preprocess"] = overrides;
  manifest["completed"] = ordered_json{{"preprocess", true}};
  write_manifest(paths, manifest);

  long positives = 0;
  for (const LabeledRecord& r : train) positives += r.label;
  for (const LabeledRecord& r : test) positives += r.label;
  const long n = static_cast<long>(train.size() + test.size());
  std::ostringstream stats;
  stats << "samples=" << n << " train=" << train.size() << " test=" << test.size()
        << " fields=" << schema.F() << " features=" << schema.M << "\n";
  const std::string table = md_table(
      {"samples", "train", "test", "positive rate", "fields", "features", "tokens"},
      {{std::to_string(n), std::to_string(train.size()), std::to_string(test.size()),
        fmt(static_cast<double>(positives) / static_cast<double>(n)),
        std::to_string(schema.F()), std::to_string(schema.M), std::to_string(tok.V())}});
  write_text_file(paths.reports() / "preprocess.md", "# Dataset\n\n" + table);
  std::cout << stats.str() << "\n" << table;
  return 0;
}

// --- pretrain -------------------------------------------------------------------------------------

int cmd_pretrain(const SharedOpts& opts) {
  RunPaths paths(opts.out);
  RunLock lock(paths.lock());
  LoadedRun run = load_run(paths);
  if (stage_complete(run.manifest, "pretrain") && !opts.force) {
    std::cout << "pretrain: already complete (use --force to redo)\n";
    return 0;
  }
  opts.apply(run.config);
  record_command(run.manifest, "pretrain", opts.verbatim(), run.config);

  Models m = build_models(run.config, run.schema, run.tok);
  TrainConfig train_cfg = run.config.train;
  train_cfg.stage = Stage::pretrain;
  MetricsLogger logger(paths.metrics().string(), /*append=*/true);
  const std::string ckpt_dir = (paths.checkpoints() / "pretrain").string();
  PretrainResult result = pretrain(*m.id, *m.text, *m.objectives, run.train, run.schema,
                                   train_cfg, run_hash(run.config), &logger, ckpt_dir);
  if (result.nan_abort) {
    std::cerr << "error: loss went non-finite at step " << result.steps
              << "; last good checkpoint: "
              << (result.last_good_checkpoint.empty() ? "(none)"
                                                      : result.last_good_checkpoint)
              << "\n";
    return 1;
  }
  run.manifest["completed"]["pretrain"] = true;
  write_manifest(paths, run.manifest);
  std::cout << "pretrain: " << result.epochs_run << " epochs, " << result.steps
            << " steps; best epoch " << result.best_epoch << " (mean loss "
            << fmt(result.best_epoch_loss) << "); checkpoints in " << ckpt_dir << "\n";
  return 0;
}

// --- finetune --------------------------------------------------------------------------------------

struct VariantOpts {
  SharedOpts shared;
  std::string variant = "flip";
};

int cmd_finetune(const VariantOpts& opts) {
  RunPaths paths(opts.shared.out);
  RunLock lock(paths.lock());
  LoadedRun run = load_run(paths);
  const Variant variant = variant_from_name(opts.variant);
  const std::string key = "finetune:" + opts.variant;
  if (stage_complete(run.manifest, key) && !opts.shared.force) {
    std::cout << "finetune: already complete for variant " << opts.variant
              << " (use --force to redo)\n";
    return 0;
  }
  if (variant != Variant::scratch && !stage_complete(run.manifest, "pretrain"))
    throw RunError("variant " + opts.variant +
                   " finetunes a pretrained model; run 'flip pretrain' first");
  opts.shared.apply(run.config);
  record_command(run.manifest, "finetune:" + opts.variant, opts.shared.verbatim(),
                 run.config);

  Models m = build_models(run.config, run.schema, run.tok);
  if (variant != Variant::scratch) {
    auto towers = tower_archives(m);
    load_checkpoint((paths.checkpoints() / "pretrain" / "final").string(),
                    run_hash(run.config), towers);
  }
  AdaptiveCombiner comb(m.id->d_tab(), run.config.encoder.d_text, run.config.train.seed);
  FinetuneModel model(*m.id, *m.text, comb, variant);

  TrainConfig train_cfg = run.config.train;
  train_cfg.stage = Stage::finetune;
  train_cfg.variant = variant;
  MetricsLogger logger(paths.metrics().string(), /*append=*/true);
  FinetuneResult result = finetune(model, run.train, run.test, train_cfg, &logger);

  auto archives = supervised_archives(m, comb);
  save_checkpoint((paths.checkpoints() / ("finetune_" + opts.variant)).string(),
                  run_hash(run.config), archives,
                  ordered_json{{"stage", "finetune"},
                               {"variant", opts.variant},
                               {"best_lr", result.best_lr}});

  const std::string table =
      md_table({"variant", "best lr", "val AUC", "test AUC", "test Logloss", "alpha"},
               {{opts.variant, fmt(result.best_lr, 6), fmt(result.best_val_auc),
                 fmt(result.test.auc), fmt(result.test.logloss), fmt(result.alpha)}});
  write_text_file(paths.reports() / ("finetune_" + opts.variant + ".md"),
                  "# Finetuning\n\n" + table);
  run.manifest["completed"][key] = true;
  write_manifest(paths, run.manifest);
  std::cout << table;
  return 0;
}

// --- eval -------------------------------------------------------------------------------------------

int cmd_eval(const VariantOpts& opts) {
  RunPaths paths(opts.shared.out);
  RunLock lock(paths.lock());
  LoadedRun run = load_run(paths);
  const Variant variant = variant_from_name(opts.variant);
  const std::string key = "eval:" + opts.variant;
  if (stage_complete(run.manifest, key) && !opts.shared.force) {
    std::cout << "eval: already complete for variant " << opts.variant
              << " (use --force to redo)\n";
    return 0;
  }

  Models m = build_models(run.config, run.schema, run.tok);
  AdaptiveCombiner comb(m.id->d_tab(), run.config.encoder.d_text, run.config.train.seed);

  // Most-trained parameters available win; a bare run evaluates the random
  // initialization, which should sit at chance.
  std::string source = "untrained";
  if (stage_complete(run.manifest, "finetune:" + opts.variant)) {
    auto archives = supervised_archives(m, comb);
    load_checkpoint((paths.checkpoints() / ("finetune_" + opts.variant)).string(),
                    run_hash(run.config), archives);
    source = "finetuned";
  } else if (stage_complete(run.manifest, "pretrain")) {
    auto towers = tower_archives(m);
    load_checkpoint((paths.checkpoints() / "pretrain" / "final").string(),
                    run_hash(run.config), towers);
    source = "pretrained";
  }

  FinetuneModel model(*m.id, *m.text, comb, variant);
  const MetricReport report = evaluate(run.test.labels(), model.predict(run.test), "test");

  const std::string table = md_table(
      {"variant", "parameters", "split", "n", "AUC", "Logloss"},
      {{opts.variant, source, report.split, std::to_string(report.n), fmt(report.auc),
        fmt(report.logloss)}});
  write_text_file(paths.reports() / ("eval_" + opts.variant + ".md"),
                  "# Evaluation\n\n" + table);
  std::ostringstream csv;
  csv << "variant,parameters,split,n,auc,logloss\n"
      << opts.variant << ',' << source << ',' << report.split << ',' << report.n << ','
      << fmt(report.auc, 6) << ',' << fmt(report.logloss, 6) << "\n";
  write_text_file(paths.reports() / ("eval_" + opts.variant + ".csv"), csv.str());

  run.manifest["completed"][key] = true;
  write_manifest(paths, run.manifest);
  std::cout << table;
  return 0;
}

// --- ablate -----------------------------------------------------------------------------------------

struct AblationRow {
  std::string slug;
  std::string label;
  AblationFlags flags;
};

std::vector<AblationRow> ablation_matrix() {
  AblationFlags full;
  std::vector<AblationRow> rows;
  rows.push_back({"full", "full", full});
  AblationFlags f = full;
  f.mlm = false;
  rows.push_back({"no_mlm", "w/o MLM", f});
  f = full;
  f.mtm = false;
  rows.push_back({"no_mtm", "w/o MTM", f});
  f = full;
  f.icl = false;
  rows.push_back({"no_icl", "w/o ICL", f});
  f = full;
  f.mlm = f.mtm = false;
  rows.push_back({"no_mlm_mtm", "w/o MLM&MTM", f});
  f = full;
  f.mlm = f.mtm = f.icl = false;
  rows.push_back({"no_mlm_mtm_icl", "w/o MLM&MTM&ICL", f});
  f = full;
  f.field_level_masking = false;
  rows.push_back({"token_masking", "token-level masking", f});
  f = full;
  f.joint_reconstruction = false;
  rows.push_back({"no_joint_reconstruction", "w/o joint reconstruction", f});
  return rows;
}

int cmd_ablate(const SharedOpts& opts) {
  RunPaths paths(opts.out);
  RunLock lock(paths.lock());
  LoadedRun run = load_run(paths);
  if (stage_complete(run.manifest, "ablate") && !opts.force) {
    std::cout << "ablate: already complete (use --force to redo)\n";
    return 0;
  }
  opts.apply(run.config);
  record_command(run.manifest, "ablate", opts.verbatim(), run.config);

  const fs::path log_dir = paths.reports() / "ablate_logs";
  fs::create_directories(log_dir);

  std::vector<std::vector<std::string>> table_rows;
  std::ostringstream csv;
  csv << "variant,auc,logloss\n";
  for (const AblationRow& row : ablation_matrix()) {
    RunConfig cfg = run.config;  // same seed across rows isolates the flags
    cfg.train.flags = row.flags;

    Models m = build_models(cfg, run.schema, run.tok);
    TrainConfig pre_cfg = cfg.train;
    pre_cfg.stage = Stage::pretrain;
    MetricsLogger logger((log_dir / (row.slug + ".jsonl")).string());
    const std::string ckpt = (paths.checkpoints() / "ablate" / row.slug).string();
    PretrainResult pre =
        pretrain(*m.id, *m.text, *m.objectives, run.train, run.schema, pre_cfg,
                 run_hash(cfg), &logger, ckpt);
    if (pre.nan_abort)
      throw TrainError("ablation '" + row.label + "' diverged during pretraining");

    AdaptiveCombiner comb(m.id->d_tab(), cfg.encoder.d_text, cfg.train.seed);
    FinetuneModel model(*m.id, *m.text, comb, Variant::flip);
    TrainConfig ft_cfg = cfg.train;
    ft_cfg.stage = Stage::finetune;
    FinetuneResult ft = finetune(model, run.train, run.test, ft_cfg, &logger);

    table_rows.push_back({row.label, fmt(ft.test.auc), fmt(ft.test.logloss)});
    csv << row.slug << ',' << fmt(ft.test.auc, 6) << ',' << fmt(ft.test.logloss, 6)
        << "\n";
    std::cout << row.label << ": AUC " << fmt(ft.test.auc) << ", Logloss "
              << fmt(ft.test.logloss) << "\n";
  }

  const std::string table = md_table({"variant", "AUC", "Logloss"}, table_rows);
  write_text_file(paths.reports() / "ablate.md", "# Pretraining ablations\n\n" + table);
  write_text_file(paths.reports() / "ablate.csv", csv.str());
  run.manifest["completed"]["ablate"] = true;
  write_manifest(paths, run.manifest);
  std::cout << "\n" << table;
  return 0;
}

// --- analyze -----------------------------------------------------------------------------------------

int cmd_analyze(const SharedOpts& opts) {
  RunPaths paths(opts.out);
  RunLock lock(paths.lock());
  LoadedRun run = load_run(paths);
  if (stage_complete(run.manifest, "analyze") && !opts.force) {
    std::cout << "analyze: already complete (use --force to redo)\n";
    return 0;
  }
  if (!stage_complete(run.manifest, "pretrain"))
    throw RunError("analysis needs pretrained towers; run 'flip pretrain' first");

  Models m = build_models(run.config, run.schema, run.tok);
  auto towers = tower_archives(m);
  load_checkpoint((paths.checkpoints() / "pretrain" / "final").string(),
                  run_hash(run.config), towers);

  const std::size_t probes = std::min<std::size_t>(run.test.size(), 512);
  std::vector<TabularSample> tab(run.test.tab.begin(),
                                 run.test.tab.begin() + static_cast<long>(probes));
  std::vector<TextualSample> text(run.test.text.begin(),
                                  run.test.text.begin() + static_cast<long>(probes));
  HeatmapResult heat = masked_similarity_heatmap(*m.id, *m.text, *m.objectives,
                                                 run.schema, tab, text);
  write_heatmap_csv(heat, run.schema.field_names,
                    (paths.reports() / "heatmap.csv").string());

  const Matrix& table = m.id->embedding_table().value;
  Matrix coords = svd_projection(table.topRows(run.schema.M));
  write_projection_csv(coords, run.schema, (paths.reports() / "projection.csv").string());

  const std::string summary = md_table(
      {"probes", "diag mean", "off-diag mean", "diag max fraction", "one-sided p"},
      {{std::to_string(heat.n_records), fmt(heat.diagonal_mean),
        fmt(heat.off_diagonal_mean), fmt(heat.diagonal_max_fraction),
        fmt(heat.diag_p, 6)}});
  write_text_file(paths.reports() / "analyze.md",
                  "# Field alignment\n\n" + summary +
                      "\nPlots: heatmap.csv (field-by-field similarity), "
                      "projection.csv (2-D embedding map).\n");
  run.manifest["completed"]["analyze"] = true;
  write_manifest(paths, run.manifest);
  std::cout << summary;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Two-tower CTR training pipeline: align an ID-based model with a text "
      "encoder, then finetune for click-through prediction.\n"
      "Config precedence: defaults < --config file < flags."};
  app.require_subcommand(1);

  PreprocessOpts pre;
  CLI::App* pre_cmd = app.add_subcommand(
      "preprocess", "build schema, tokenizer, and chronological splits");
  pre.shared.attach(pre_cmd);
  pre.data_o = pre_cmd->add_option("--data", pre.data_path,
                                   "delimited rating log (omit for synthetic data)");
  pre.rule_o = pre_cmd->add_option("--rule", pre.rule,
                                   "label rule for --data (movielens, bookcrossing, "
                                   "goodreads)");

  SharedOpts pre_train;
  CLI::App* pretrain_cmd =
      app.add_subcommand("pretrain", "align the two towers on the training split");
  pre_train.attach(pretrain_cmd);

  VariantOpts ft;
  CLI::App* finetune_cmd =
      app.add_subcommand("finetune", "supervised training for click-through prediction");
  ft.shared.attach(finetune_cmd);
  finetune_cmd->add_option("--variant", ft.variant,
                           "flip, flip_id, flip_plm, or scratch");

  VariantOpts ev;
  CLI::App* eval_cmd = app.add_subcommand("eval", "report AUC and Logloss on the test split");
  ev.shared.attach(eval_cmd);
  eval_cmd->add_option("--variant", ev.variant, "flip, flip_id, flip_plm, or scratch");

  SharedOpts ab;
  CLI::App* ablate_cmd =
      app.add_subcommand("ablate", "run the fixed pretraining-objective matrix");
  ab.attach(ablate_cmd);

  SharedOpts an;
  CLI::App* analyze_cmd =
      app.add_subcommand("analyze", "alignment heatmap and embedding projection");
  an.attach(analyze_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre_cmd->parsed()) {
      if (pre.data_o->count()) {
        try {
          label_rule_from_name(pre.rule);
        } catch (const std::exception&) {
          std::cerr << "error: unknown rule '" << pre.rule << "'; valid rules: "
                    << kValidRules << "\n";
          return 2;
        }
      }
      return cmd_preprocess(pre);
    }
    if (pretrain_cmd->parsed()) return cmd_pretrain(pre_train);
    if (finetune_cmd->parsed()) return cmd_finetune(ft);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (ablate_cmd->parsed()) return cmd_ablate(ab);
    if (analyze_cmd->parsed()) return cmd_analyze(an);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
