#include "flip/textual.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "flip/errors.hpp"

namespace flip {

namespace {

const std::vector<std::string> kSpecials = {"[PAD]", "[CLS]", "[MASK]", "[UNK]"};

std::string to_lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream in(text);
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

Tokenizer::Tokenizer(std::vector<std::string> vocab, bool lowercase)
    : vocab_(std::move(vocab)), lowercase_(lowercase) {
  if (vocab_.size() < kSpecials.size())
    throw ConfigError("tokenizer vocabulary smaller than the special set");
  for (size_t i = 0; i < kSpecials.size(); ++i)
    if (vocab_[i] != kSpecials[i])
      throw ConfigError("tokenizer specials must open the vocabulary as "
                        "[PAD], [CLS], [MASK], [UNK]");
  for (size_t i = 0; i < vocab_.size(); ++i) {
    auto [it, inserted] = index_.try_emplace(vocab_[i], static_cast<int>(i));
    if (!inserted)
      throw ConfigError("duplicate tokenizer vocabulary entry '" + vocab_[i] + "'");
  }
}

int Tokenizer::encode_word(const std::string& word) const {
  auto it = index_.find(lowercase_ ? to_lower(word) : word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::decode(int id) const {
  if (id < 0 || id >= V())
    throw ConfigError("token id " + std::to_string(id) + " outside vocabulary");
  return vocab_[id];
}

std::vector<int> Tokenizer::encode_words(const std::vector<std::string>& words) const {
  std::vector<int> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(encode_word(w));
  return ids;
}

std::string Tokenizer::decode_join(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += decode(ids[i]);
  }
  return out;
}

Tokenizer build_tokenizer(const std::vector<std::string>& texts, int v_max,
                          bool lowercase) {
  if (texts.empty()) throw ConfigError("tokenizer corpus is empty");
  if (v_max < Tokenizer::kNumSpecials + 1)
    throw ConfigError("v_max leaves no room for words beyond the specials");

  std::unordered_map<std::string, long> counts;
  for (const auto& text : texts)
    for (auto& w : split_words(lowercase ? to_lower(text) : text)) ++counts[w];

  std::vector<std::pair<std::string, long>> by_freq(counts.begin(), counts.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> vocab = kSpecials;
  for (const auto& [word, count] : by_freq) {
    if (static_cast<int>(vocab.size()) >= v_max) break;
    vocab.push_back(word);
  }
  return Tokenizer(std::move(vocab), lowercase);
}

std::string render_text(const TabularSample& record, const DatasetSchema& schema,
                        const Template& tmpl) {
  std::string out;
  for (int f = 0; f < schema.F(); ++f) {
    if (f) out += ' ';
    out += schema.field_names[f];
    out += ' ';
    out += tmpl.connective;
    out += ' ';
    out += schema.value_of(record.feature_ids[f]);
    out += ' ';
    out += tmpl.terminator;
  }
  return out;
}

TextualSample tokenize_with_spans(const TabularSample& record,
                                  const DatasetSchema& schema,
                                  const Template& tmpl, const Tokenizer& tokenizer,
                                  int l_max, long record_ordinal) {
  TextualSample out;
  out.token_ids.push_back(Tokenizer::kCls);
  out.field_value_spans.reserve(schema.F());

  auto append_words = [&](const std::string& text) {
    for (const auto& w : split_words(text))
      out.token_ids.push_back(tokenizer.encode_word(w));
  };

  for (int f = 0; f < schema.F(); ++f) {
    append_words(schema.field_names[f]);
    append_words(tmpl.connective);
    TokenSpan span;
    span.start = static_cast<int>(out.token_ids.size());
    append_words(schema.value_of(record.feature_ids[f]));
    span.end = static_cast<int>(out.token_ids.size());
    if (span.size() == 0)
      throw SchemaError("field '" + schema.field_names[f] +
                        "' renders to an empty token span");
    out.field_value_spans.push_back(span);
    append_words(tmpl.terminator);
  }

  if (static_cast<int>(out.token_ids.size()) > l_max) {
    std::string which = record_ordinal >= 0
                            ? "record " + std::to_string(record_ordinal)
                            : "record";
    throw SchemaError(which + ": sequence length " +
                      std::to_string(out.token_ids.size()) + " exceeds L_max " +
                      std::to_string(l_max));
  }
  return out;
}

void save_tokenizer(const Tokenizer& tokenizer, const std::string& path) {
  nlohmann::ordered_json j;
  j["vocab"] = tokenizer.vocab();
  j["lowercase"] = tokenizer.lowercase();
  std::ofstream out(path);
  if (!out) throw RunError("cannot write tokenizer file '" + path + "'");
  out << j.dump(2) << "\n";
}

Tokenizer load_tokenizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open tokenizer file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("tokenizer file '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    return Tokenizer(j.at("vocab").get<std::vector<std::string>>(),
                     j.at("lowercase").get<bool>());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("tokenizer file '" + path + "' is malformed: " + e.what());
  }
}

}  // namespace flip
