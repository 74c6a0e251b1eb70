#pragma once

// Compact trainable transformer encoder standing in for the PLM: learned
// absolute positions, pre-norm blocks, GELU feed-forward. encode() returns
// the last-layer token states as one flat (B * L) x D_text matrix whose row
// layout.row(b, 0) is sample b's [CLS] vector.

#include <vector>

#include "flip/autodiff.hpp"
#include "flip/params.hpp"
#include "flip/textual.hpp"

namespace flip {

struct EncoderSpec {
  int vocab = 0;        // V, set from the tokenizer
  int d_text = 128;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 0;         // 0 -> 4 * d_text
  int l_max = 256;
  double dropout = 0.0;
};

class TextTower {
 public:
  TextTower(const EncoderSpec& spec, unsigned long long seed);

  // Pads to the longest sequence in the batch; fills `layout` accordingly.
  // Padded rows never attend, are never attended to, and must not be read
  // downstream. `probe`, when given, collects every layer's attention maps.
  // `dropout_rng` enables dropout (training mode); eval passes nullptr.
  Var encode(Tape& t, const std::vector<TextualSample>& batch, SeqLayout& layout,
             AttentionProbe* probe = nullptr, Rng* dropout_rng = nullptr) const;

  const EncoderSpec& spec() const { return spec_; }
  int d_text() const { return spec_.d_text; }

  ParamSet params;

 private:
  Var maybe_dropout(Tape& t, Var x, Rng* rng) const;

  EncoderSpec spec_;
};

}  // namespace flip
