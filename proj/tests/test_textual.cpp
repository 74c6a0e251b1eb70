#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "flip/data.hpp"
#include "flip/errors.hpp"
#include "flip/textual.hpp"

using namespace flip;

namespace {

LabeledRecord rec(std::vector<std::string> fields, int label = 0) {
  LabeledRecord r;
  r.fields = std::move(fields);
  r.label = label;
  return r;
}

// Schema over two fields: gender in {Female, Male}, occupation in
// {"college student", teacher}.
DatasetSchema demo_schema() {
  std::vector<LabeledRecord> train{
      rec({"Female", "college student"}),
      rec({"Male", "teacher"}),
  };
  return build_schema({"gender", "occupation"}, train);
}

}  // namespace

TEST_CASE("render_text follows the field-is-value template") {
  auto schema = demo_schema();
  auto sample = encode(schema, rec({"Female", "college student"}));
  CHECK(render_text(sample, schema, Template{}) ==
        "gender is Female . occupation is college student .");
}

TEST_CASE("render_text one-field case") {
  std::vector<LabeledRecord> train{rec({"Action"})};
  auto schema = build_schema({"genre"}, train);
  auto sample = encode(schema, rec({"Action"}));
  CHECK(render_text(sample, schema, Template{}) == "genre is Action .");
}

TEST_CASE("render_text does not escape values that collide with the template") {
  std::vector<LabeledRecord> train{rec({"is it"})};
  auto schema = build_schema({"title"}, train);
  auto sample = encode(schema, rec({"is it"}));
  CHECK(render_text(sample, schema, Template{}) == "title is is it .");
}

TEST_CASE("build_tokenizer orders words by frequency then lexicographically") {
  auto tok = build_tokenizer({"a a b"}, 6);
  CHECK(tok.V() == 6);
  CHECK(tok.vocab() ==
        std::vector<std::string>{"[PAD]", "[CLS]", "[MASK]", "[UNK]", "a", "b"});
  CHECK(tok.encode_word("a") == 4);

  auto tie = build_tokenizer({"z q z q m"}, 8);
  // q and z both occur twice: lexicographic tie-break puts q first.
  CHECK(tie.vocab()[4] == "q");
  CHECK(tie.vocab()[5] == "z");
  CHECK(tie.vocab()[6] == "m");
}

TEST_CASE("tokenizer maps unseen words to [UNK] and round-trips the rest") {
  auto tok = build_tokenizer({"alpha beta gamma alpha"}, 10);
  CHECK(tok.encode_word("zzz") == Tokenizer::kUnk);
  std::vector<std::string> words = {"beta", "alpha", "gamma"};
  auto ids = tok.encode_words(words);
  CHECK(tok.decode_join(ids) == "beta alpha gamma");
  CHECK(tok.encode_words(split_words(tok.decode_join(ids))) == ids);
}

TEST_CASE("tokenizer truncates to v_max keeping the most frequent words") {
  auto tok = build_tokenizer({"a a a b b c"}, 6);
  CHECK(tok.V() == 6);
  CHECK(tok.encode_word("a") == 4);
  CHECK(tok.encode_word("b") == 5);
  CHECK(tok.encode_word("c") == Tokenizer::kUnk);  // crowded out
}

TEST_CASE("tokenizer lowercases when the flag is set") {
  auto tok = build_tokenizer({"Apple apple APPLE"}, 8);
  CHECK(tok.V() == 5);
  CHECK(tok.encode_word("ApPlE") == 4);
  auto exact = build_tokenizer({"Apple apple"}, 8, false);
  CHECK(exact.encode_word("Apple") != exact.encode_word("apple"));
}

TEST_CASE("tokenize_with_spans marks exactly the value tokens") {
  auto schema = demo_schema();
  auto sample = encode(schema, rec({"Female", "college student"}));
  auto tok = build_tokenizer({render_text(sample, schema, Template{})}, 64);
  auto ts = tokenize_with_spans(sample, schema, Template{}, tok);

  CHECK(ts.token_ids[0] == Tokenizer::kCls);
  CHECK(ts.cls_index == 0);
  REQUIRE(ts.field_value_spans.size() == 2);

  // "gender is Female ." -> Female at token 3
  CHECK(ts.field_value_spans[0].start == 3);
  CHECK(ts.field_value_spans[0].end == 4);
  // "occupation is college student ." -> span of length 2
  CHECK(ts.field_value_spans[1].size() == 2);
  std::vector<int> span_ids(ts.token_ids.begin() + ts.field_value_spans[1].start,
                            ts.token_ids.begin() + ts.field_value_spans[1].end);
  CHECK(tok.decode_join(span_ids) == "college student");
}

TEST_CASE("single-word values give L = 1 + 4F") {
  std::vector<LabeledRecord> train{rec({"x1", "y1", "z1"}), rec({"x2", "y2", "z2"})};
  auto schema = build_schema({"a", "b", "c"}, train);
  auto sample = encode(schema, train[0]);
  auto tok = build_tokenizer({render_text(sample, schema, Template{})}, 64);
  auto ts = tokenize_with_spans(sample, schema, Template{}, tok);
  CHECK(ts.token_ids.size() == 1 + 4 * 3);
}

TEST_CASE("identical values in different fields get disjoint spans") {
  std::vector<LabeledRecord> train{rec({"unknown", "unknown"})};
  auto schema = build_schema({"a", "b"}, train);
  auto sample = encode(schema, train[0]);
  auto tok = build_tokenizer({render_text(sample, schema, Template{})}, 64);
  auto ts = tokenize_with_spans(sample, schema, Template{}, tok);
  REQUIRE(ts.field_value_spans.size() == 2);
  CHECK(ts.field_value_spans[0].end <= ts.field_value_spans[1].start);
  CHECK(ts.field_value_spans[0].size() == 1);
  CHECK(ts.field_value_spans[1].size() == 1);
}

TEST_CASE("span structure tiles the whole sequence") {
  SyntheticConfig cfg;
  cfg.n = 200;
  cfg.fields = 5;
  cfg.vocab_size = 9;
  auto data = generate_synthetic(cfg, 21);
  auto schema = build_schema(data.field_names, data.train);
  std::vector<std::string> corpus;
  for (const auto& r : data.train)
    corpus.push_back(render_text(encode(schema, r), schema, Template{}));
  auto tok = build_tokenizer(corpus, 4096);

  for (size_t i = 0; i < 50; ++i) {
    auto sample = encode(schema, data.train[i]);
    auto ts = tokenize_with_spans(sample, schema, Template{}, tok);

    // Spans are ordered, disjoint, never index 0, and decoding each span
    // reproduces the (lowercased) field value.
    int prev_end = 1;
    for (int f = 0; f < schema.F(); ++f) {
      const auto& span = ts.field_value_spans[f];
      CHECK(span.start >= prev_end);
      CHECK(span.size() > 0);
      prev_end = span.end;
      std::vector<int> ids(ts.token_ids.begin() + span.start,
                           ts.token_ids.begin() + span.end);
      std::string value = schema.value_of(sample.feature_ids[f]);
      for (char& c : value) c = char(std::tolower((unsigned char)c));
      CHECK(tok.decode_join(ids) == value);
    }

    // Every non-CLS token outside the spans is template text.
    std::set<std::string> template_words = {"is", "."};
    for (int f = 0; f < schema.F(); ++f) template_words.insert(schema.field_names[f]);
    for (size_t t = 1; t < ts.token_ids.size(); ++t) {
      bool in_span = false;
      for (const auto& span : ts.field_value_spans)
        in_span |= static_cast<int>(t) >= span.start && static_cast<int>(t) < span.end;
      if (!in_span)
        CHECK(template_words.count(tok.decode(ts.token_ids[t])) == 1);
    }
  }
}

TEST_CASE("render_text is injective on synthetic records") {
  SyntheticConfig cfg;
  cfg.n = 400;
  cfg.fields = 4;
  cfg.vocab_size = 12;
  auto data = generate_synthetic(cfg, 9);
  auto schema = build_schema(data.field_names, data.train);
  std::set<std::string> texts;
  std::set<std::vector<std::string>> distinct;
  for (const auto& r : data.train) {
    texts.insert(render_text(encode(schema, r), schema, Template{}));
    distinct.insert(r.fields);
  }
  CHECK(texts.size() == distinct.size());
}

TEST_CASE("over-long sequences raise an error naming the record") {
  std::vector<LabeledRecord> train{rec({"a b c d e f g h"})};
  auto schema = build_schema({"words"}, train);
  auto sample = encode(schema, train[0]);
  auto tok = build_tokenizer({"a b c d e f g h words is ."}, 64);
  CHECK_THROWS_WITH_AS(
      tokenize_with_spans(sample, schema, Template{}, tok, 8, 42),
      "record 42: sequence length 12 exceeds L_max 8", SchemaError);
}

TEST_CASE("tokenizer JSON round-trips byte-for-byte") {
  auto tok = build_tokenizer({"red green blue red"}, 16);
  auto path = std::filesystem::temp_directory_path() / "flip_tok.json";
  save_tokenizer(tok, path.string());
  auto loaded = load_tokenizer(path.string());
  CHECK(loaded.vocab() == tok.vocab());
  CHECK(loaded.lowercase() == tok.lowercase());

  std::stringstream first;
  first << std::ifstream(path).rdbuf();
  save_tokenizer(loaded, path.string());
  std::stringstream second;
  second << std::ifstream(path).rdbuf();
  CHECK(first.str() == second.str());
  std::filesystem::remove(path);
}

TEST_CASE("load_tokenizer rejects a vocabulary without the specials") {
  auto path = std::filesystem::temp_directory_path() / "flip_tok_bad.json";
  std::ofstream(path) << R"({"vocab": ["a", "b"], "lowercase": true})";
  CHECK_THROWS_AS(load_tokenizer(path.string()), ConfigError);
  std::filesystem::remove(path);
}
