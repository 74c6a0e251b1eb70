#pragma once

// Tabular records -> template sentences -> token sequences with exact
// per-field value spans. Spans, not string matching, define which tokens
// belong to which field value; that is what field-level masking consumes.

#include <string>
#include <unordered_map>
#include <vector>

#include "flip/data.hpp"

namespace flip {

struct Template {
  std::string connective = "is";
  std::string terminator = ".";
};

// Half-open token-index interval [start, end).
struct TokenSpan {
  int start = 0;
  int end = 0;
  int size() const { return end - start; }
};

struct TextualSample {
  std::vector<int> token_ids;                // [CLS] first, then words
  std::vector<TokenSpan> field_value_spans;  // one per field, in field order
  int cls_index = 0;
};

class Tokenizer {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kMask = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecials = 4;

  Tokenizer() = default;
  // vocab must start with the four specials in fixed order.
  Tokenizer(std::vector<std::string> vocab, bool lowercase);

  int V() const { return static_cast<int>(vocab_.size()); }
  bool lowercase() const { return lowercase_; }
  const std::vector<std::string>& vocab() const { return vocab_; }

  // Single word -> ID ([UNK] when absent). Applies the lowercase flag.
  int encode_word(const std::string& word) const;
  const std::string& decode(int id) const;

  std::vector<int> encode_words(const std::vector<std::string>& words) const;
  std::string decode_join(const std::vector<int>& ids) const;  // space-joined

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
  bool lowercase_ = true;
};

std::vector<std::string> split_words(const std::string& text);

// Word vocabulary from the train corpus: specials, then words by descending
// frequency (ties lexicographic), truncated to v_max entries overall.
Tokenizer build_tokenizer(const std::vector<std::string>& texts, int v_max,
                          bool lowercase = true);

std::string render_text(const TabularSample& record, const DatasetSchema& schema,
                        const Template& tmpl);

// record_ordinal only labels error messages for over-long sequences.
TextualSample tokenize_with_spans(const TabularSample& record,
                                  const DatasetSchema& schema,
                                  const Template& tmpl, const Tokenizer& tokenizer,
                                  int l_max = 256, long record_ordinal = -1);

void save_tokenizer(const Tokenizer& tokenizer, const std::string& path);
Tokenizer load_tokenizer(const std::string& path);

}  // namespace flip
