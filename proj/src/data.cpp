#include "flip/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "flip/errors.hpp"
#include "flip/rng.hpp"

namespace flip {

namespace {

std::vector<std::string> split_line(const std::string& line, char delim) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, delim)) cells.push_back(cell);
  if (!line.empty() && line.back() == delim) cells.emplace_back();
  return cells;
}

void strip_cr(std::string& s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
}

double parse_double(const std::string& s, bool& ok) {
  const char* begin = s.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  ok = end != begin && *end == '\0' && !s.empty();
  return v;
}

int find_column(const std::vector<std::string>& header, const std::string& name,
                const char* kind) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end())
    throw SchemaError(std::string(kind) + " column '" + name + "' not found");
  return static_cast<int>(it - header.begin());
}

}  // namespace

LabelRule label_rule_from_name(const std::string& name) {
  if (name == "movielens") return LabelRule::movielens;
  if (name == "bookcrossing") return LabelRule::bookcrossing;
  if (name == "goodreads") return LabelRule::goodreads;
  throw ConfigError("unknown label rule '" + name +
                    "' (expected movielens, bookcrossing, or goodreads)");
}

std::string label_rule_name(LabelRule rule) {
  switch (rule) {
    case LabelRule::movielens: return "movielens";
    case LabelRule::bookcrossing: return "bookcrossing";
    case LabelRule::goodreads: return "goodreads";
  }
  throw ConfigError("bad label rule value");
}

std::vector<RawRecord> load_tabular(const std::string& path,
                                    const TableSpec& spec) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open dataset file '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty dataset file '" + path + "'");
  strip_cr(line);
  std::vector<std::string> header = split_line(line, spec.delimiter);

  std::vector<int> field_idx;
  field_idx.reserve(spec.field_columns.size());
  for (const auto& name : spec.field_columns)
    field_idx.push_back(find_column(header, name, "field"));
  int label_idx = find_column(header, spec.label_column, "label");
  int ts_idx = find_column(header, spec.timestamp_column, "timestamp");

  std::vector<RawRecord> records;
  long row = 0;  // zero-based data row, reported 1-based with header offset
  while (std::getline(in, line)) {
    strip_cr(line);
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> cells = split_line(line, spec.delimiter);

    RawRecord rec;
    rec.order = static_cast<long>(records.size());
    rec.fields.reserve(field_idx.size());
    for (int idx : field_idx) {
      if (idx >= static_cast<int>(cells.size()) || cells[idx].empty())
        rec.fields.emplace_back(kUnknownValue);
      else
        rec.fields.push_back(cells[idx]);
    }
    if (label_idx >= static_cast<int>(cells.size()) || cells[label_idx].empty())
      throw SchemaError("row " + std::to_string(row) + ": missing label value");
    rec.label_raw = cells[label_idx];

    if (ts_idx >= static_cast<int>(cells.size()) || cells[ts_idx].empty())
      throw SchemaError("row " + std::to_string(row) + ": missing timestamp");
    bool ok = false;
    rec.timestamp = parse_double(cells[ts_idx], ok);
    if (!ok)
      throw SchemaError("row " + std::to_string(row) + ": bad timestamp '" +
                        cells[ts_idx] + "'");
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<LabeledRecord> binarize_labels(const std::vector<RawRecord>& records,
                                           LabelRule rule) {
  std::vector<LabeledRecord> out;
  out.reserve(records.size());
  for (size_t i = 0; i < records.size(); ++i) {
    bool ok = false;
    double rating = parse_double(records[i].label_raw, ok);
    if (!ok)
      throw SchemaError("record " + std::to_string(i) + ": non-numeric rating '" +
                        records[i].label_raw + "'");
    int label = 0;
    bool keep = true;
    switch (rule) {
      case LabelRule::movielens:
        if (rating > 3.0) label = 1;
        else if (rating < 3.0) label = 0;
        else keep = false;  // rating == 3 carries no signal; drop it
        break;
      case LabelRule::bookcrossing:
        label = rating > 5.0 ? 1 : 0;
        break;
      case LabelRule::goodreads:
        label = rating > 3.0 ? 1 : 0;
        break;
    }
    if (!keep) continue;
    LabeledRecord rec;
    rec.fields = records[i].fields;
    rec.label = label;
    rec.timestamp = records[i].timestamp;
    rec.order = records[i].order;
    out.push_back(std::move(rec));
  }
  return out;
}

std::pair<std::vector<LabeledRecord>, std::vector<LabeledRecord>>
chronological_split(std::vector<LabeledRecord> records, const SplitSpec& spec) {
  if (!(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0))
    throw ConfigError("train_fraction must lie in (0, 1]");
  std::sort(records.begin(), records.end(),
            [](const LabeledRecord& a, const LabeledRecord& b) {
              if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
              return a.order < b.order;
            });
  auto n_train = static_cast<size_t>(
      std::floor(spec.train_fraction * static_cast<double>(records.size())));
  n_train = std::min(n_train, records.size());
  if (n_train == records.size() && !records.empty())
    std::cerr << "warning: train_fraction " << spec.train_fraction
              << " leaves an empty test set\n";
  std::vector<LabeledRecord> train(records.begin(), records.begin() + n_train);
  std::vector<LabeledRecord> test(records.begin() + n_train, records.end());
  return {std::move(train), std::move(test)};
}

int DatasetSchema::id_of(int f, const std::string& value) const {
  const auto& vocab = vocabularies[f];
  // slot 0 is the unknown sentinel; scan is fine for desk-scale vocabularies,
  // but encode_all builds a map when it matters.
  for (size_t j = 0; j < vocab.size(); ++j)
    if (vocab[j] == value) return feature_base[f] + static_cast<int>(j);
  return unknown_id(f);
}

std::pair<int, int> DatasetSchema::locate(int id) const {
  if (id < 0 || id >= M)
    throw SchemaError("feature id " + std::to_string(id) + " outside [0, " +
                      std::to_string(M) + ")");
  auto it = std::upper_bound(feature_base.begin(), feature_base.end(), id);
  int f = static_cast<int>(it - feature_base.begin()) - 1;
  return {f, id - feature_base[f]};
}

const std::string& DatasetSchema::value_of(int id) const {
  auto [f, j] = locate(id);
  return vocabularies[f][j];
}

long DatasetSchema::freq_of(int f, int j) const {
  auto it = freq[f].find(vocabularies[f][j]);
  return it == freq[f].end() ? 1 : it->second;
}

DatasetSchema build_schema(const std::vector<std::string>& field_names,
                           const std::vector<LabeledRecord>& train) {
  if (train.empty()) throw SchemaError("cannot build a schema from an empty train set");
  const int F = static_cast<int>(field_names.size());

  DatasetSchema schema;
  schema.field_names = field_names;
  schema.vocabularies.assign(F, {kUnknownValue});
  schema.freq.resize(F);
  std::vector<std::unordered_map<std::string, int>> index(F);
  for (int f = 0; f < F; ++f) index[f][kUnknownValue] = 0;

  for (const auto& rec : train) {
    if (static_cast<int>(rec.fields.size()) != F)
      throw SchemaError("record has " + std::to_string(rec.fields.size()) +
                        " fields, schema declares " + std::to_string(F));
    for (int f = 0; f < F; ++f) {
      const std::string& v = rec.fields[f];
      auto [it, inserted] = index[f].try_emplace(
          v, static_cast<int>(schema.vocabularies[f].size()));
      if (inserted) schema.vocabularies[f].push_back(v);
      ++schema.freq[f][v];
    }
  }
  // Every in-vocabulary value keeps a positive count; the sentinel may never
  // occur in train data.
  for (int f = 0; f < F; ++f)
    for (const auto& v : schema.vocabularies[f]) {
      auto& c = schema.freq[f][v];
      if (c < 1) c = 1;
    }

  schema.feature_base.resize(F);
  int base = 0;
  for (int f = 0; f < F; ++f) {
    schema.feature_base[f] = base;
    base += schema.vocab_size(f);
  }
  schema.M = base;
  schema.mask_feature_id = schema.M;
  return schema;
}

TabularSample encode(const DatasetSchema& schema, const LabeledRecord& rec) {
  TabularSample s;
  s.feature_ids.reserve(schema.F());
  for (int f = 0; f < schema.F(); ++f)
    s.feature_ids.push_back(schema.id_of(f, rec.fields[f]));
  s.label = rec.label;
  return s;
}

std::vector<TabularSample> encode_all(const DatasetSchema& schema,
                                      const std::vector<LabeledRecord>& recs) {
  const int F = schema.F();
  std::vector<std::unordered_map<std::string, int>> index(F);
  for (int f = 0; f < F; ++f)
    for (size_t j = 0; j < schema.vocabularies[f].size(); ++j)
      index[f][schema.vocabularies[f][j]] = static_cast<int>(j);

  std::vector<TabularSample> out;
  out.reserve(recs.size());
  for (const auto& rec : recs) {
    TabularSample s;
    s.feature_ids.reserve(F);
    for (int f = 0; f < F; ++f) {
      auto it = index[f].find(rec.fields[f]);
      int j = it == index[f].end() ? 0 : it->second;
      s.feature_ids.push_back(schema.feature_base[f] + j);
    }
    s.label = rec.label;
    out.push_back(std::move(s));
  }
  return out;
}

void save_schema(const DatasetSchema& schema, const std::string& path) {
  nlohmann::ordered_json j;
  j["field_names"] = schema.field_names;
  j["vocabularies"] = schema.vocabularies;
  j["feature_base"] = schema.feature_base;
  j["M"] = schema.M;
  nlohmann::ordered_json freq = nlohmann::ordered_json::array();
  for (int f = 0; f < schema.F(); ++f) {
    nlohmann::ordered_json m = nlohmann::ordered_json::object();
    for (const auto& v : schema.vocabularies[f]) m[v] = schema.freq[f].at(v);
    freq.push_back(std::move(m));
  }
  j["freq"] = std::move(freq);
  j["mask_feature_id"] = schema.mask_feature_id;

  std::ofstream out(path);
  if (!out) throw RunError("cannot write schema file '" + path + "'");
  out << j.dump(2) << "\n";
}

DatasetSchema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open schema file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("schema file '" + path + "' is not valid JSON: " + e.what());
  }

  DatasetSchema schema;
  try {
    schema.field_names = j.at("field_names").get<std::vector<std::string>>();
    schema.vocabularies =
        j.at("vocabularies").get<std::vector<std::vector<std::string>>>();
    schema.feature_base = j.at("feature_base").get<std::vector<int>>();
    schema.M = j.at("M").get<int>();
    for (const auto& m : j.at("freq")) {
      std::unordered_map<std::string, long> fm;
      for (auto it = m.begin(); it != m.end(); ++it)
        fm[it.key()] = it.value().get<long>();
      schema.freq.push_back(std::move(fm));
    }
    schema.mask_feature_id = j.at("mask_feature_id").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("schema file '" + path + "' is malformed: " + e.what());
  }

  // Re-check the structural invariants rather than trusting the file.
  const int F = schema.F();
  if (static_cast<int>(schema.vocabularies.size()) != F ||
      static_cast<int>(schema.feature_base.size()) != F ||
      static_cast<int>(schema.freq.size()) != F)
    throw SchemaError("schema file '" + path + "': per-field arrays disagree on F");
  int total = 0;
  for (int f = 0; f < F; ++f) {
    if (schema.feature_base[f] != total)
      throw SchemaError("schema file '" + path + "': feature_base is not a prefix sum");
    total += schema.vocab_size(f);
    for (const auto& v : schema.vocabularies[f]) {
      auto it = schema.freq[f].find(v);
      if (it == schema.freq[f].end() || it->second < 1)
        throw SchemaError("schema file '" + path + "': value '" + v +
                          "' lacks a positive frequency");
    }
  }
  if (total != schema.M)
    throw SchemaError("schema file '" + path + "': M does not match vocabulary sizes");
  if (schema.mask_feature_id != schema.M)
    throw SchemaError("schema file '" + path + "': mask_feature_id must equal M");
  return schema;
}

// --- synthetic data ---------------------------------------------------------

namespace {

// Pronounceable deterministic word from an integer.
std::string synth_word(long k) {
  static const char* cons = "btkdmnprsl";
  static const char* vowel = "aeiou";
  std::string w;
  w += cons[k % 10];
  w += vowel[(k / 10) % 5];
  w += cons[(k / 50) % 10];
  w += vowel[(k / 500) % 5];
  if ((k / 2500) % 2) {
    w += cons[(k / 5000) % 10];
    w += vowel[(k / 50000) % 5];
  }
  return w;
}

// Even fields carry one word; odd fields carry two, the first drawn from a
// five-word shared pool so distinct IDs overlap in surface text.
std::vector<std::string> synth_value_words(int f, int j) {
  if (f % 2 == 0) return {synth_word(1000L * f + j)};
  return {synth_word(j % 5), synth_word(7777L + 1000L * f + j)};
}

std::string synth_value(int f, int j) {
  std::string out;
  for (const std::string& w : synth_value_words(f, j)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& config,
                                    unsigned long long seed) {
  if (config.fields < 2) throw ConfigError("synthetic data needs at least 2 fields");
  if (config.vocab_size < 2) throw ConfigError("synthetic vocab_size must be >= 2");
  if (config.n < 1) throw ConfigError("synthetic n must be >= 1");
  if (config.cluster_k < 0) throw ConfigError("synthetic cluster_k must be >= 0");
  if (config.cluster_mix < 0.0 || config.cluster_mix > 1.0)
    throw ConfigError("synthetic cluster_mix must lie in [0, 1]");

  const int F = config.fields;
  const int V = config.vocab_size;

  Rng rng_model(mix_seed(seed, 1));
  Rng rng_values(mix_seed(seed, 2));
  Rng rng_labels(mix_seed(seed, 3));

  // Planted model: per-pair interaction tables plus optional main effects.
  const int n_pairs = F * (F - 1) / 2;
  double pair_sd = config.pair_scale / std::sqrt(static_cast<double>(n_pairs));
  double main_sd = config.main_scale / std::sqrt(static_cast<double>(F));
  std::vector<std::vector<double>> pair_w(n_pairs,
                                          std::vector<double>(V * V, 0.0));
  for (auto& table : pair_w)
    for (auto& w : table) w = rng_model.normal(0.0, pair_sd);
  std::vector<std::vector<double>> main_w(F, std::vector<double>(V, 0.0));
  for (auto& col : main_w)
    for (auto& w : col) w = rng_model.normal(0.0, main_sd);

  // Per-word surface effects, one draw per distinct word; the per-value sum
  // is folded into a lookup table. Skipped entirely at word_scale 0 so the
  // model RNG stream (and thus every draw below) is unchanged.
  std::vector<std::vector<double>> word_sum(F, std::vector<double>(V, 0.0));
  if (config.word_scale > 0.0) {
    const double word_sd = config.word_scale / std::sqrt(1.5 * F);
    std::unordered_map<std::string, double> word_w;
    for (int f = 0; f < F; ++f)
      for (int j = 0; j < V; ++j)
        for (const std::string& w : synth_value_words(f, j)) {
          auto [it, fresh] = word_w.try_emplace(w, 0.0);
          if (fresh) it->second = rng_model.normal(0.0, word_sd);
          word_sum[f][j] += it->second;
        }
  }

  // Latent record clusters: each record draws a cluster, and each field then
  // remaps its value through the cluster's rotation with probability
  // cluster_mix, so fields co-occur instead of being independent. Skipped at
  // cluster_k 0, leaving every RNG stream untouched.
  const int K = config.cluster_k;
  std::vector<std::vector<int>> cluster_shift;
  std::vector<double> cluster_eff;
  if (K > 0) {
    cluster_shift.assign(F, std::vector<int>(K, 0));
    for (auto& row : cluster_shift)
      for (auto& s : row) s = rng_model.index(V);
    cluster_eff.assign(K, 0.0);
    for (auto& eps : cluster_eff) eps = rng_model.normal(0.0, config.cluster_bias);
  }

  // Zipf-like value draw shared by all fields.
  std::vector<double> weights(V);
  for (int j = 0; j < V; ++j) weights[j] = 1.0 / (1.0 + j);
  DiscreteSampler value_dist(weights);

  SyntheticDataset data;
  data.field_names.reserve(F);
  for (int f = 0; f < F; ++f) data.field_names.push_back("field_" + std::to_string(f));

  std::vector<LabeledRecord> records;
  records.reserve(config.n);
  double score_sum = 0.0;
  long positives = 0;
  std::vector<int> vals(F);
  for (long i = 0; i < config.n; ++i) {
    const int cluster = K > 0 ? rng_values.index(K) : 0;
    for (int f = 0; f < F; ++f) {
      int j = value_dist.sample(rng_values);
      if (K > 0 && rng_values.bernoulli(config.cluster_mix))
        j = (j + cluster_shift[f][cluster]) % V;
      vals[f] = j;
    }

    double score = config.bias;
    if (K > 0) score += cluster_eff[cluster];
    int pair = 0;
    for (int f = 0; f < F; ++f) {
      score += main_w[f][vals[f]] + word_sum[f][vals[f]];
      for (int g = f + 1; g < F; ++g, ++pair)
        score += pair_w[pair][vals[f] * V + vals[g]];
    }
    score_sum += score;
    double logit = score + rng_labels.normal(0.0, config.noise_scale);
    int label = rng_labels.bernoulli(1.0 / (1.0 + std::exp(-logit))) ? 1 : 0;
    positives += label;

    LabeledRecord rec;
    rec.fields.reserve(F);
    for (int f = 0; f < F; ++f) rec.fields.push_back(synth_value(f, vals[f]));
    rec.label = label;
    rec.timestamp = static_cast<double>(i);
    rec.order = i;
    records.push_back(std::move(rec));
  }

  data.truth.bias = config.bias;
  data.truth.mean_score = score_sum / static_cast<double>(config.n);
  data.truth.positive_rate =
      static_cast<double>(positives) / static_cast<double>(config.n);

  SplitSpec split;
  split.train_fraction = config.train_fraction;
  auto [train, test] = chronological_split(std::move(records), split);
  data.train = std::move(train);
  data.test = std::move(test);
  return data;
}

}  // namespace flip
