#pragma once

// Evaluation and analysis: rank-based AUC and clipped logloss, the
// masked-field similarity heatmap over ICL-projected representations, and
// the 2-D SVD projection of the learned feature embeddings. Everything here
// is read-only over models and emits plain numbers or CSV.

#include <string>
#include <vector>

#include "flip/autodiff.hpp"
#include "flip/data.hpp"
#include "flip/id_tower.hpp"
#include "flip/objectives.hpp"
#include "flip/rng.hpp"
#include "flip/text_tower.hpp"
#include "flip/textual.hpp"

namespace flip {

struct MetricReport {
  double auc = 0.0;
  double logloss = 0.0;
  long n = 0;
  std::string split;
};

// Mann-Whitney form: P(random positive outranks random negative), ties 1/2.
// Exact in double for any input whose ranks fit an integer grid (they do:
// average ranks are halves). Throws RunError on one-class input.
double auc(const std::vector<int>& labels, const std::vector<double>& scores);

// Mean binary cross-entropy with probabilities clipped to [clip, 1 - clip].
double logloss(const std::vector<int>& labels, const std::vector<double>& probs,
               double clip = 1e-7);

MetricReport evaluate(const std::vector<int>& labels,
                      const std::vector<double>& probs, std::string split);

// Empirical null for AUC under label permutation, for "5 sigma above
// chance" style checks.
struct NullDistribution {
  double mean = 0.0;
  double sd = 0.0;
  int trials = 0;
};

NullDistribution auc_permutation_null(const std::vector<int>& labels,
                                      const std::vector<double>& scores,
                                      int trials, Rng& rng);

// S[a][b] = mean over probe records of z_text(mask field a) . z_tab(mask
// field b), both ICL-projected and unit-normalized, so entries lie in
// [-1, 1]. diag_p is the one-sided p-value (t-test over per-record
// diag-minus-offdiag differences) for "diagonal exceeds off-diagonal".
struct HeatmapResult {
  Matrix s;                           // F x F
  double diagonal_max_fraction = 0.0; // rows whose diagonal is the row max
  double diagonal_mean = 0.0;
  double off_diagonal_mean = 0.0;
  double diag_p = 1.0;
  long n_records = 0;
};

HeatmapResult masked_similarity_heatmap(const IdTower& id_tower,
                                        const TextTower& text_tower,
                                        const Objectives& objectives,
                                        const DatasetSchema& schema,
                                        const std::vector<TabularSample>& tab,
                                        const std::vector<TextualSample>& text,
                                        int batch_size = 256);

// Rows mean-centered, projected onto the top-2 right singular vectors.
// Rank-deficient input is fine (trailing coordinate zero).
Matrix svd_projection(const Matrix& table);

void write_heatmap_csv(const HeatmapResult& result,
                       const std::vector<std::string>& field_names,
                       const std::string& path);

// One row per feature ID: id, field, value, x, y.
void write_projection_csv(const Matrix& coords, const DatasetSchema& schema,
                          const std::string& path);

}  // namespace flip
