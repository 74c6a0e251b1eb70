#pragma once

// Raw rating logs -> labeled, chronologically split records -> feature-ID
// space. Vocabularies, ID ranges, and frequency tables all derive from the
// training split only; unseen test values fall back to a per-field "unknown"
// sentinel that is always slot 0 of the field vocabulary.

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace flip {

inline constexpr const char* kUnknownValue = "unknown";

struct TableSpec {
  std::vector<std::string> field_columns;
  std::string label_column;
  std::string timestamp_column;
  char delimiter = '\t';
};

struct RawRecord {
  std::vector<std::string> fields;  // one value per declared field column
  std::string label_raw;            // unparsed label cell
  double timestamp = 0.0;
  long order = 0;                   // zero-based row position in the file
};

struct LabeledRecord {
  std::vector<std::string> fields;
  int label = 0;  // binary click label
  double timestamp = 0.0;
  long order = 0;
};

enum class LabelRule { movielens, bookcrossing, goodreads };

LabelRule label_rule_from_name(const std::string& name);
std::string label_rule_name(LabelRule rule);

struct SplitSpec {
  double train_fraction = 0.9;
};

struct DatasetSchema {
  std::vector<std::string> field_names;
  // vocabularies[f][0] is always the "unknown" sentinel; the rest follow
  // first-appearance order in the train split.
  std::vector<std::vector<std::string>> vocabularies;
  std::vector<int> feature_base;
  int M = 0;
  // Train-split occurrence counts per field, floored at 1 so every
  // in-vocabulary value has positive sampling weight.
  std::vector<std::unordered_map<std::string, long>> freq;
  int mask_feature_id = 0;  // == M, shared by all fields

  int F() const { return static_cast<int>(field_names.size()); }
  int vocab_size(int f) const { return static_cast<int>(vocabularies[f].size()); }
  int unknown_id(int f) const { return feature_base[f]; }

  // Global ID for (field, value); unseen values map to the unknown slot.
  int id_of(int f, const std::string& value) const;
  // Inverse lookup: global ID -> (field, within-field index).
  std::pair<int, int> locate(int id) const;
  const std::string& value_of(int id) const;
  long freq_of(int f, int j) const;  // by within-field index
};

struct TabularSample {
  std::vector<int> feature_ids;
  int label = 0;
};

std::vector<RawRecord> load_tabular(const std::string& path,
                                    const TableSpec& spec);

std::vector<LabeledRecord> binarize_labels(const std::vector<RawRecord>& records,
                                           LabelRule rule);

// Sorts by (timestamp, file order) and cuts at floor(fraction * N).
// fraction 1.0 is allowed but warns on stderr: the test set ends up empty.
std::pair<std::vector<LabeledRecord>, std::vector<LabeledRecord>>
chronological_split(std::vector<LabeledRecord> records, const SplitSpec& spec);

DatasetSchema build_schema(const std::vector<std::string>& field_names,
                           const std::vector<LabeledRecord>& train);

TabularSample encode(const DatasetSchema& schema, const LabeledRecord& rec);
std::vector<TabularSample> encode_all(const DatasetSchema& schema,
                                      const std::vector<LabeledRecord>& recs);

void save_schema(const DatasetSchema& schema, const std::string& path);
DatasetSchema load_schema(const std::string& path);

// --- synthetic data -------------------------------------------------------

struct SyntheticConfig {
  long n = 10000;
  int fields = 8;
  int vocab_size = 24;        // values per field before the unknown slot
  double bias = 0.0;          // logit offset; controls base positive rate
  double pair_scale = 3.0;    // strength of planted pairwise interactions
  double main_scale = 0.0;    // strength of planted per-value main effects
  double word_scale = 0.0;    // strength of planted per-word surface effects
  int cluster_k = 0;          // latent record clusters; 0 keeps fields independent
  double cluster_mix = 0.0;   // chance a field draws from its cluster's rotated law
  double cluster_bias = 0.0;  // per-cluster logit offset scale
  double noise_scale = 0.25;  // extra logit noise
  double train_fraction = 0.9;
};

struct SyntheticTruth {
  double bias = 0.0;
  double positive_rate = 0.0;  // empirical rate over all generated records
  double mean_score = 0.0;     // mean planted logit
};

struct SyntheticDataset {
  std::vector<std::string> field_names;
  std::vector<LabeledRecord> train;
  std::vector<LabeledRecord> test;
  SyntheticTruth truth;
};

// Deterministic in (config, seed). Labels follow a logistic model over
// planted pairwise field interactions; value frequencies are Zipf-like so
// frequency-based noise sampling has something to bite on; value strings are
// built from a small shared word pool so distinct IDs can carry
// near-identical surface text. word_scale plants effects on the shared
// words themselves: the per-ID view must estimate each value separately,
// while the textual view can pool every value that carries the word.
// cluster_k > 0 makes fields dependent through a latent per-record cluster:
// each field redraws its value from a cluster-rotated law with probability
// cluster_mix, and cluster_bias adds a per-cluster logit offset, so masked
// fields become predictable from their context and co-occurrence structure
// is worth pretraining on.
SyntheticDataset generate_synthetic(const SyntheticConfig& config,
                                    unsigned long long seed);

}  // namespace flip
