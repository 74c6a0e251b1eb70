#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "flip/data.hpp"
#include "flip/errors.hpp"

using namespace flip;

namespace {

struct TempFile {
  std::filesystem::path path;
  explicit TempFile(const std::string& name, const std::string& content) {
    path = std::filesystem::temp_directory_path() / name;
    std::ofstream out(path);
    out << content;
  }
  ~TempFile() { std::error_code ec; std::filesystem::remove(path, ec); }
  std::string str() const { return path.string(); }
};

TableSpec movie_spec() {
  TableSpec spec;
  spec.field_columns = {"gender", "genre"};
  spec.label_column = "rating";
  spec.timestamp_column = "ts";
  return spec;
}

LabeledRecord rec(std::vector<std::string> fields, int label, double ts, long order) {
  LabeledRecord r;
  r.fields = std::move(fields);
  r.label = label;
  r.timestamp = ts;
  r.order = order;
  return r;
}

}  // namespace

TEST_CASE("load_tabular reads rows in file order") {
  TempFile f("flip_load.tsv",
             "gender\tgenre\trating\tts\n"
             "M\tAction\t5\t100\n"
             "F\tComedy\t3\t101\n"
             "M\tDrama\t1\t102\n");
  auto records = load_tabular(f.str(), movie_spec());
  REQUIRE(records.size() == 3);
  CHECK(records[0].fields == std::vector<std::string>{"M", "Action"});
  CHECK(records[1].label_raw == "3");
  CHECK(records[2].timestamp == 102.0);
  CHECK(records[2].order == 2);
}

TEST_CASE("load_tabular fills empty field cells with unknown") {
  TempFile f("flip_load_empty.tsv",
             "gender\tgenre\trating\tts\n"
             "M\t\t4\t100\n");
  auto records = load_tabular(f.str(), movie_spec());
  REQUIRE(records.size() == 1);
  CHECK(records[0].fields[1] == "unknown");
}

TEST_CASE("load_tabular reports missing columns by name") {
  TempFile f("flip_load_nocol.tsv", "gender\tgenre\tts\nM\tAction\t100\n");
  try {
    load_tabular(f.str(), movie_spec());
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()) == "label column 'rating' not found");
  }
}

TEST_CASE("load_tabular reports unreadable rows with their number") {
  TempFile f("flip_load_badrow.tsv",
             "gender\tgenre\trating\tts\n"
             "M\tAction\t5\t100\n"
             "F\tComedy\t4\tnot_a_time\n");
  CHECK_THROWS_WITH_AS(load_tabular(f.str(), movie_spec()),
                       "row 2: bad timestamp 'not_a_time'", SchemaError);
}

TEST_CASE("binarize_labels applies the three dataset rules") {
  auto raw = [](std::string rating) {
    RawRecord r;
    r.fields = {"M", "Action"};
    r.label_raw = std::move(rating);
    return r;
  };

  SUBCASE("movielens drops rating 3") {
    auto out = binarize_labels({raw("5"), raw("3"), raw("1")}, LabelRule::movielens);
    REQUIRE(out.size() == 2);
    CHECK(out[0].label == 1);
    CHECK(out[1].label == 0);
  }
  SUBCASE("bookcrossing thresholds at 5") {
    auto out = binarize_labels({raw("6"), raw("5"), raw("0")},
                               LabelRule::bookcrossing);
    REQUIRE(out.size() == 3);
    CHECK(out[0].label == 1);
    CHECK(out[1].label == 0);
    CHECK(out[2].label == 0);
  }
  SUBCASE("goodreads thresholds at 3") {
    auto out = binarize_labels({raw("4"), raw("3")}, LabelRule::goodreads);
    REQUIRE(out.size() == 2);
    CHECK(out[0].label == 1);
    CHECK(out[1].label == 0);
  }
  SUBCASE("non-numeric rating names the record") {
    CHECK_THROWS_WITH_AS(binarize_labels({raw("5"), raw("great")},
                                         LabelRule::goodreads),
                         "record 1: non-numeric rating 'great'", SchemaError);
  }
}

TEST_CASE("chronological_split cuts at floor(fraction * N)") {
  std::vector<LabeledRecord> records;
  for (int i = 0; i < 10; ++i)
    records.push_back(rec({"v"}, 0, 100.0 - i, i));  // reverse time order
  auto [train, test] = chronological_split(records, SplitSpec{0.9});
  REQUIRE(train.size() == 9);
  REQUIRE(test.size() == 1);
  double max_train = 0.0;
  for (const auto& r : train) max_train = std::max(max_train, r.timestamp);
  CHECK(max_train <= test[0].timestamp);
  CHECK(test[0].timestamp == 100.0);
}

TEST_CASE("chronological_split breaks timestamp ties by original order") {
  std::vector<LabeledRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back(rec({"v"}, 0, 7.0, i));
  auto [train, test] = chronological_split(records, SplitSpec{0.9});
  REQUIRE(train.size() == 9);
  for (int i = 0; i < 9; ++i) CHECK(train[i].order == i);
  CHECK(test[0].order == 9);
}

TEST_CASE("chronological_split is a partition") {
  std::vector<LabeledRecord> records;
  for (int i = 0; i < 103; ++i)
    records.push_back(rec({"v"}, 0, double((i * 37) % 11), i));
  auto [train, test] = chronological_split(records, SplitSpec{0.9});
  CHECK(train.size() + test.size() == records.size());
  std::set<long> seen;
  for (const auto& r : train) seen.insert(r.order);
  for (const auto& r : test) seen.insert(r.order);
  CHECK(seen.size() == records.size());
}

TEST_CASE("chronological_split warns when the test set is empty") {
  std::vector<LabeledRecord> records{rec({"v"}, 0, 1.0, 0), rec({"v"}, 1, 2.0, 1)};
  std::ostringstream captured;
  auto* old = std::cerr.rdbuf(captured.rdbuf());
  auto [train, test] = chronological_split(records, SplitSpec{1.0});
  std::cerr.rdbuf(old);
  CHECK(train.size() == 2);
  CHECK(test.empty());
  CHECK(captured.str().find("empty test set") != std::string::npos);
}

TEST_CASE("build_schema counts each field plus its unknown slot") {
  std::vector<LabeledRecord> train{
      rec({"M", "Action"}, 1, 1.0, 0),
      rec({"F", "Action"}, 0, 2.0, 1),
      rec({"M", "Action"}, 1, 3.0, 2),
  };
  auto schema = build_schema({"gender", "genre"}, train);
  CHECK(schema.M == 5);  // (2+1) + (1+1)
  CHECK(schema.mask_feature_id == 5);
  CHECK(schema.feature_base == std::vector<int>{0, 3});
  CHECK(schema.vocabularies[0] == std::vector<std::string>{"unknown", "M", "F"});
  CHECK(schema.freq[0].at("M") == 2);
  CHECK(schema.freq[0].at("unknown") == 1);  // floored, never seen
  CHECK(schema.freq[1].at("Action") == 3);
}

TEST_CASE("unseen test values map to the field unknown id") {
  std::vector<LabeledRecord> train{rec({"M", "Action"}, 1, 1.0, 0)};
  auto schema = build_schema({"gender", "genre"}, train);
  auto sample = encode(schema, rec({"M", "Comedy"}, 0, 9.0, 5));
  CHECK(sample.feature_ids[0] == schema.id_of(0, "M"));
  CHECK(sample.feature_ids[1] == schema.unknown_id(1));
}

TEST_CASE("feature ids round-trip through locate") {
  std::vector<LabeledRecord> train{
      rec({"M", "Action"}, 1, 1.0, 0),
      rec({"F", "Comedy"}, 0, 2.0, 1),
      rec({"F", "Drama"}, 1, 3.0, 2),
  };
  auto schema = build_schema({"gender", "genre"}, train);
  for (const auto& r : train) {
    auto sample = encode(schema, r);
    for (int f = 0; f < schema.F(); ++f) {
      int id = sample.feature_ids[f];
      auto [field, j] = schema.locate(id);
      CHECK(field == f);
      CHECK(schema.id_of(field, schema.vocabularies[field][j]) == id);
    }
  }
  CHECK_THROWS_AS(schema.locate(schema.mask_feature_id), SchemaError);
}

TEST_CASE("build_schema is deterministic over the same train set") {
  std::vector<LabeledRecord> train;
  for (int i = 0; i < 50; ++i)
    train.push_back(rec({"u" + std::to_string(i % 7), "g" + std::to_string(i % 13)},
                        i % 2, double(i), i));
  auto a = build_schema({"user", "genre"}, train);
  auto b = build_schema({"user", "genre"}, train);
  CHECK(a.vocabularies == b.vocabularies);
  CHECK(a.feature_base == b.feature_base);
  CHECK(a.M == b.M);
}

TEST_CASE("schema JSON round-trips and stays diff-stable") {
  std::vector<LabeledRecord> train{
      rec({"M", "Action"}, 1, 1.0, 0),
      rec({"F", "Comedy"}, 0, 2.0, 1),
  };
  auto schema = build_schema({"gender", "genre"}, train);
  auto path = std::filesystem::temp_directory_path() / "flip_schema.json";
  save_schema(schema, path.string());
  auto loaded = load_schema(path.string());
  CHECK(loaded.field_names == schema.field_names);
  CHECK(loaded.vocabularies == schema.vocabularies);
  CHECK(loaded.feature_base == schema.feature_base);
  CHECK(loaded.M == schema.M);
  CHECK(loaded.mask_feature_id == schema.mask_feature_id);
  CHECK(loaded.freq[0].at("M") == 1);

  std::stringstream first;
  first << std::ifstream(path).rdbuf();
  save_schema(loaded, path.string());
  std::stringstream second;
  second << std::ifstream(path).rdbuf();
  CHECK(first.str() == second.str());
  std::filesystem::remove(path);
}

TEST_CASE("load_schema rejects tampered files") {
  std::vector<LabeledRecord> train{rec({"M", "Action"}, 1, 1.0, 0)};
  auto schema = build_schema({"gender", "genre"}, train);
  auto path = std::filesystem::temp_directory_path() / "flip_schema_bad.json";
  schema.M += 1;  // now inconsistent with vocabulary sizes
  save_schema(schema, path.string());
  CHECK_THROWS_AS(load_schema(path.string()), SchemaError);
  std::filesystem::remove(path);
}

TEST_CASE("encode_all agrees with encode") {
  std::vector<LabeledRecord> train;
  for (int i = 0; i < 30; ++i)
    train.push_back(rec({"u" + std::to_string(i % 5), "g" + std::to_string(i % 4)},
                        i % 2, double(i), i));
  auto schema = build_schema({"user", "genre"}, train);
  auto bulk = encode_all(schema, train);
  REQUIRE(bulk.size() == train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    auto one = encode(schema, train[i]);
    CHECK(bulk[i].feature_ids == one.feature_ids);
    CHECK(bulk[i].label == one.label);
  }
}

TEST_CASE("generate_synthetic is deterministic in the seed") {
  SyntheticConfig cfg;
  cfg.n = 500;
  cfg.fields = 4;
  cfg.vocab_size = 10;
  auto a = generate_synthetic(cfg, 17);
  auto b = generate_synthetic(cfg, 17);
  REQUIRE(a.train.size() == b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].fields == b.train[i].fields);
    CHECK(a.train[i].label == b.train[i].label);
  }
  auto c = generate_synthetic(cfg, 18);
  bool any_diff = false;
  for (size_t i = 0; i < a.train.size() && !any_diff; ++i)
    any_diff = a.train[i].fields != c.train[i].fields ||
               a.train[i].label != c.train[i].label;
  CHECK(any_diff);
}

TEST_CASE("synthetic labels match the base rate when nothing is planted") {
  SyntheticConfig cfg;
  cfg.n = 20000;
  cfg.fields = 4;
  cfg.vocab_size = 8;
  cfg.pair_scale = 0.0;
  cfg.main_scale = 0.0;
  cfg.noise_scale = 0.0;
  cfg.bias = 0.8;
  auto data = generate_synthetic(cfg, 5);
  double expect = 1.0 / (1.0 + std::exp(-cfg.bias));
  double sigma = std::sqrt(expect * (1.0 - expect) / cfg.n);
  CHECK(std::abs(data.truth.positive_rate - expect) < 5.0 * sigma);
}

TEST_CASE("synthetic values reuse surface words across distinct ids") {
  SyntheticConfig cfg;
  cfg.n = 2000;
  cfg.fields = 4;
  cfg.vocab_size = 12;
  auto data = generate_synthetic(cfg, 7);
  auto schema = build_schema(data.field_names, data.train);

  // Field 1 is two-word with a five-word shared prefix pool: some pair of
  // distinct values must share their first word.
  const auto& vocab = schema.vocabularies[1];
  bool shared = false;
  for (size_t i = 1; i < vocab.size() && !shared; ++i)
    for (size_t j = i + 1; j < vocab.size() && !shared; ++j) {
      auto wi = vocab[i].substr(0, vocab[i].find(' '));
      auto wj = vocab[j].substr(0, vocab[j].find(' '));
      shared = vocab[i] != vocab[j] && wi == wj;
    }
  CHECK(shared);
}

TEST_CASE("word_scale moves labels through shared words, not surface values") {
  SyntheticConfig cfg;
  cfg.n = 3000;
  cfg.fields = 4;
  cfg.vocab_size = 10;
  cfg.pair_scale = 0.0;
  cfg.noise_scale = 0.0;
  auto plain = generate_synthetic(cfg, 11);
  cfg.word_scale = 4.0;
  auto worded = generate_synthetic(cfg, 11);
  auto worded2 = generate_synthetic(cfg, 11);

  REQUIRE(plain.train.size() == worded.train.size());
  bool labels_differ = false;
  for (size_t i = 0; i < plain.train.size(); ++i) {
    CHECK(plain.train[i].fields == worded.train[i].fields);
    CHECK(worded.train[i].label == worded2.train[i].label);
    labels_differ = labels_differ || plain.train[i].label != worded.train[i].label;
  }
  CHECK(labels_differ);

  // With only word effects planted, grouping records by field 1's shared
  // first word conditions on that word's planted effect, so the group
  // positive rates must spread out.
  std::map<std::string, std::pair<long, long>> by_word;  // word -> (pos, n)
  for (const auto& rec : worded.train) {
    const std::string w = rec.fields[1].substr(0, rec.fields[1].find(' '));
    by_word[w].first += rec.label;
    by_word[w].second += 1;
  }
  double lo = 1.0, hi = 0.0;
  for (const auto& [w, pn] : by_word) {
    if (pn.second < 50) continue;
    const double rate = static_cast<double>(pn.first) / pn.second;
    lo = std::min(lo, rate);
    hi = std::max(hi, rate);
  }
  CHECK(hi - lo > 0.05);
}

TEST_CASE("synthetic value frequencies decay with index") {
  SyntheticConfig cfg;
  cfg.n = 20000;
  cfg.fields = 2;
  cfg.vocab_size = 10;
  auto data = generate_synthetic(cfg, 3);
  auto schema = build_schema(data.field_names, data.train);
  // Zipf-like draws: the most frequent value should dominate the rarest.
  long max_freq = 0, min_freq = 1L << 40;
  for (const auto& [v, c] : schema.freq[0]) {
    if (v == "unknown") continue;
    max_freq = std::max(max_freq, c);
    min_freq = std::min(min_freq, c);
  }
  CHECK(max_freq > 4 * min_freq);
}
