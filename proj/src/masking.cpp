#include "flip/masking.hpp"

#include <algorithm>
#include <cmath>

#include "flip/errors.hpp"

namespace flip {

int mask_count(double r, int n) {
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("mask ratio must lie in (0, 1]");
  if (n < 1) throw ConfigError("cannot mask an empty collection");
  auto k = static_cast<int>(std::llround(r * n));
  return std::clamp(k, 1, n);
}

MaskedText mask_text_fieldlevel(const TextualSample& sample, double r_text,
                                Rng& rng) {
  const int F = static_cast<int>(sample.field_value_spans.size());
  MaskedText out;
  out.corrupted = sample;
  out.mask_fields = rng.sample_without_replacement(F, mask_count(r_text, F));
  std::sort(out.mask_fields.begin(), out.mask_fields.end());
  for (int f : out.mask_fields) {
    const TokenSpan& span = sample.field_value_spans[f];
    for (int t = span.start; t < span.end; ++t) {
      out.masked_positions.push_back(t);
      out.targets.push_back(sample.token_ids[t]);
      out.corrupted.token_ids[t] = Tokenizer::kMask;
    }
  }
  return out;
}

MaskedText mask_text_tokenlevel(const TextualSample& sample, double r_text,
                                Rng& rng) {
  const int candidates = static_cast<int>(sample.token_ids.size()) - 1;
  MaskedText out;
  out.corrupted = sample;
  auto picks = rng.sample_without_replacement(candidates, mask_count(r_text, candidates));
  std::sort(picks.begin(), picks.end());
  for (int p : picks) {
    int t = p + 1;  // skip CLS at position 0
    out.masked_positions.push_back(t);
    out.targets.push_back(sample.token_ids[t]);
    out.corrupted.token_ids[t] = Tokenizer::kMask;
  }
  return out;
}

MaskedTabular mask_tabular(const TabularSample& sample, double r_tab,
                           const DatasetSchema& schema, Rng& rng) {
  const int F = static_cast<int>(sample.feature_ids.size());
  MaskedTabular out;
  out.corrupted = sample;
  out.mask_fields = rng.sample_without_replacement(F, mask_count(r_tab, F));
  std::sort(out.mask_fields.begin(), out.mask_fields.end());
  for (int f : out.mask_fields) {
    out.targets.push_back(sample.feature_ids[f]);
    out.corrupted.feature_ids[f] = schema.mask_feature_id;
  }
  return out;
}

NoiseSampler::NoiseSampler(const DatasetSchema& schema, NoiseScope scope)
    : schema_(&schema), scope_(scope) {
  if (scope == NoiseScope::field_local) {
    per_field_.reserve(schema.F());
    for (int f = 0; f < schema.F(); ++f) {
      std::vector<double> w(schema.vocab_size(f));
      for (int j = 0; j < schema.vocab_size(f); ++j)
        w[j] = static_cast<double>(schema.freq_of(f, j));
      per_field_.emplace_back(w);
    }
  } else {
    std::vector<double> w(schema.M);
    for (int f = 0; f < schema.F(); ++f)
      for (int j = 0; j < schema.vocab_size(f); ++j)
        w[schema.feature_base[f] + j] = static_cast<double>(schema.freq_of(f, j));
    global_ = DiscreteSampler(w);
  }
}

std::vector<int> NoiseSampler::draw(int field, int positive_id, int k,
                                    Rng& rng) const {
  if (scope_ == NoiseScope::field_local && schema_->vocab_size(field) < 2)
    throw SchemaError("field '" + schema_->field_names[field] +
                      "' has a single value; no noise can differ from the positive");
  if (scope_ == NoiseScope::global && schema_->M < 2)
    throw SchemaError("feature space too small for noise sampling");

  std::vector<int> out;
  out.reserve(k);
  const int base = scope_ == NoiseScope::field_local
                       ? schema_->feature_base[field]
                       : 0;
  const DiscreteSampler& dist =
      scope_ == NoiseScope::field_local ? per_field_[field] : global_;
  while (static_cast<int>(out.size()) < k) {
    int id = base + dist.sample(rng);
    if (id == positive_id) continue;
    out.push_back(id);
  }
  return out;
}

NoiseSample sample_noise(const DatasetSchema& schema, int field, int positive_id,
                         int k, Rng& rng, NoiseScope scope) {
  NoiseSampler sampler(schema, scope);
  NoiseSample out;
  out.positive_id = positive_id;
  out.noise_ids = sampler.draw(field, positive_id, k, rng);
  return out;
}

}  // namespace flip
