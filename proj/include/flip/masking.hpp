#pragma once

// Corrupted views for the reconstruction objectives: field-level masking of
// the textual sample (whole value spans become [MASK]), shared-<MASK>-slot
// masking of the tabular sample, and frequency-proportional noise features
// for the NCE contrast. Everything draws from caller-provided Rng streams.

#include <vector>

#include "flip/data.hpp"
#include "flip/rng.hpp"
#include "flip/textual.hpp"

namespace flip {

struct MaskedText {
  TextualSample corrupted;
  std::vector<int> mask_fields;       // ascending; empty for token-level masking
  std::vector<int> masked_positions;  // I_text, ascending token indices
  std::vector<int> targets;           // clean token IDs at masked_positions
};

struct MaskedTabular {
  TabularSample corrupted;
  std::vector<int> mask_fields;  // I_tab, ascending field indices
  std::vector<int> targets;      // clean global feature IDs at mask_fields
};

struct MaskedPair {
  MaskedText text;
  MaskedTabular tab;
};

struct NoiseSample {
  int positive_id = 0;
  std::vector<int> noise_ids;  // K draws, with replacement, never the positive
};

enum class NoiseScope { field_local, global };

// Number of fields (or tokens) to mask: max(1, round(r * n)).
int mask_count(double r, int n);

MaskedText mask_text_fieldlevel(const TextualSample& sample, double r_text,
                                Rng& rng);

// Ablation variant: masks individual non-CLS token positions, ignoring spans.
MaskedText mask_text_tokenlevel(const TextualSample& sample, double r_text,
                                Rng& rng);

MaskedTabular mask_tabular(const TabularSample& sample, double r_tab,
                           const DatasetSchema& schema, Rng& rng);

// Frequency tables for noise draws, built once per schema. Draws are
// rejection-sampled so the law is exactly the train-frequency distribution
// renormalized without the positive.
class NoiseSampler {
 public:
  NoiseSampler(const DatasetSchema& schema, NoiseScope scope);

  std::vector<int> draw(int field, int positive_id, int k, Rng& rng) const;
  NoiseScope scope() const { return scope_; }

 private:
  const DatasetSchema* schema_;
  NoiseScope scope_;
  std::vector<DiscreteSampler> per_field_;  // field-local tables
  DiscreteSampler global_;                  // over all M features
};

NoiseSample sample_noise(const DatasetSchema& schema, int field, int positive_id,
                         int k, Rng& rng,
                         NoiseScope scope = NoiseScope::field_local);

}  // namespace flip
