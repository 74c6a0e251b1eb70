#include "flip/evalysis.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

#include "flip/errors.hpp"

namespace flip {

double auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  if (labels.size() != scores.size())
    throw std::logic_error("auc: labels/scores size mismatch");
  const long n = static_cast<long>(labels.size());
  long positives = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::logic_error("auc: labels must be 0/1");
    positives += y;
  }
  const long negatives = n - positives;
  if (positives == 0 || negatives == 0)
    throw RunError("auc: needs at least one positive and one negative");

  std::vector<long> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](long a, long b) {
    return scores[static_cast<std::size_t>(a)] < scores[static_cast<std::size_t>(b)];
  });

  // Average ranks (1-based) within tie groups are halves of integers, so the
  // whole computation stays exact in double.
  double positive_rank_sum = 0.0;
  long i = 0;
  while (i < n) {
    long j = i;
    while (j + 1 < n && scores[static_cast<std::size_t>(order[j + 1])] ==
                            scores[static_cast<std::size_t>(order[i])])
      ++j;
    const double avg_rank = static_cast<double>(i + 1 + j + 1) / 2.0;
    for (long k = i; k <= j; ++k)
      if (labels[static_cast<std::size_t>(order[k])] == 1)
        positive_rank_sum += avg_rank;
    i = j + 1;
  }
  const double p = static_cast<double>(positives);
  return (positive_rank_sum - p * (p + 1.0) / 2.0) /
         (p * static_cast<double>(negatives));
}

double logloss(const std::vector<int>& labels, const std::vector<double>& probs,
               double clip) {
  if (labels.size() != probs.size())
    throw std::logic_error("logloss: labels/probs size mismatch");
  if (labels.empty()) throw std::logic_error("logloss: empty input");
  // Extended-precision accumulation keeps "all terms equal" means exact.
  long double total = 0.0L;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    double p = std::min(std::max(probs[i], clip), 1.0 - clip);
    total += labels[i] == 1 ? -std::log(p) : -std::log(1.0 - p);
  }
  return static_cast<double>(total / static_cast<long double>(labels.size()));
}

MetricReport evaluate(const std::vector<int>& labels,
                      const std::vector<double>& probs, std::string split) {
  MetricReport report;
  report.auc = auc(labels, probs);
  report.logloss = logloss(labels, probs);
  report.n = static_cast<long>(labels.size());
  report.split = std::move(split);
  return report;
}

NullDistribution auc_permutation_null(const std::vector<int>& labels,
                                      const std::vector<double>& scores,
                                      int trials, Rng& rng) {
  if (trials < 2) throw std::logic_error("auc_permutation_null: trials < 2");
  std::vector<int> shuffled = labels;
  double sum = 0.0, sum_sq = 0.0;
  for (int t = 0; t < trials; ++t) {
    rng.shuffle(shuffled);
    double a = auc(shuffled, scores);
    sum += a;
    sum_sq += a * a;
  }
  NullDistribution null;
  null.trials = trials;
  null.mean = sum / trials;
  null.sd = std::sqrt(std::max(0.0, (sum_sq - sum * sum / trials) / (trials - 1)));
  return null;
}

namespace {

// Encode + project text variants in chunks; one row per input sample.
Matrix project_text_batch(const TextTower& text_tower, const Objectives& objectives,
                          const std::vector<TextualSample>& samples, int batch_size) {
  Matrix out(static_cast<long>(samples.size()), objectives.config().icl_dim);
  for (std::size_t start = 0; start < samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<TextualSample> chunk(samples.begin() + static_cast<long>(start),
                                     samples.begin() + static_cast<long>(end));
    Tape t;
    SeqLayout layout;
    Var w = text_tower.encode(t, chunk, layout);
    Var z = objectives.project_text(t, t.select_rows(w, cls_row_indices(layout)));
    out.middleRows(static_cast<long>(start), static_cast<long>(end - start)) = t.value(z);
  }
  return out;
}

Matrix project_tab_batch(const IdTower& id_tower, const Objectives& objectives,
                         const std::vector<TabularSample>& samples, int batch_size) {
  Matrix out(static_cast<long>(samples.size()), objectives.config().icl_dim);
  for (std::size_t start = 0; start < samples.size();
       start += static_cast<std::size_t>(batch_size)) {
    std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<TabularSample> chunk(samples.begin() + static_cast<long>(start),
                                     samples.begin() + static_cast<long>(end));
    Tape t;
    Var z = objectives.project_tab(t, id_tower.encode(t, chunk));
    out.middleRows(static_cast<long>(start), static_cast<long>(end - start)) = t.value(z);
  }
  return out;
}

TextualSample mask_one_text_field(const TextualSample& sample, int field) {
  TextualSample masked = sample;
  const TokenSpan& span = sample.field_value_spans[static_cast<std::size_t>(field)];
  for (int p = span.start; p < span.end; ++p)
    masked.token_ids[static_cast<std::size_t>(p)] = Tokenizer::kMask;
  return masked;
}

TabularSample mask_one_tab_field(const TabularSample& sample, int field,
                                 const DatasetSchema& schema) {
  TabularSample masked = sample;
  masked.feature_ids[static_cast<std::size_t>(field)] = schema.mask_feature_id;
  return masked;
}

}  // namespace

HeatmapResult masked_similarity_heatmap(const IdTower& id_tower,
                                        const TextTower& text_tower,
                                        const Objectives& objectives,
                                        const DatasetSchema& schema,
                                        const std::vector<TabularSample>& tab,
                                        const std::vector<TextualSample>& text,
                                        int batch_size) {
  const int f = schema.F();
  const long n = static_cast<long>(tab.size());
  if (text.size() != tab.size())
    throw std::logic_error("heatmap: text/tab probe size mismatch");
  if (n == 0) throw std::logic_error("heatmap: empty probe set");

  // All single-field-masked variants, record-major then field.
  std::vector<TextualSample> text_variants;
  std::vector<TabularSample> tab_variants;
  text_variants.reserve(static_cast<std::size_t>(n * f));
  tab_variants.reserve(static_cast<std::size_t>(n * f));
  for (long i = 0; i < n; ++i)
    for (int a = 0; a < f; ++a) {
      text_variants.push_back(mask_one_text_field(text[static_cast<std::size_t>(i)], a));
      tab_variants.push_back(
          mask_one_tab_field(tab[static_cast<std::size_t>(i)], a, schema));
    }

  Matrix zt = project_text_batch(text_tower, objectives, text_variants, batch_size);
  Matrix zv = project_tab_batch(id_tower, objectives, tab_variants, batch_size);

  HeatmapResult result;
  result.s = Matrix::Zero(f, f);
  result.n_records = n;
  std::vector<double> diffs(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    Matrix s_i = zt.middleRows(i * f, f) * zv.middleRows(i * f, f).transpose();
    result.s += s_i;
    const double diag = s_i.trace() / f;
    const double off = (s_i.sum() - s_i.trace()) / (static_cast<double>(f) * (f - 1));
    diffs[static_cast<std::size_t>(i)] = diag - off;
  }
  result.s /= static_cast<double>(n);

  long diag_max = 0;
  for (int a = 0; a < f; ++a) {
    Eigen::Index arg;
    result.s.row(a).maxCoeff(&arg);
    if (arg == a) ++diag_max;
  }
  result.diagonal_max_fraction = static_cast<double>(diag_max) / f;
  result.diagonal_mean = result.s.trace() / f;
  result.off_diagonal_mean =
      (result.s.sum() - result.s.trace()) / (static_cast<double>(f) * (f - 1));

  // One-sided t-test over per-record diagonal-minus-offdiagonal differences.
  const double mean =
      std::accumulate(diffs.begin(), diffs.end(), 0.0) / static_cast<double>(n);
  double var = 0.0;
  for (double d : diffs) var += (d - mean) * (d - mean);
  var /= static_cast<double>(n - 1);
  if (var <= 0.0) {
    result.diag_p = mean > 0.0 ? 0.0 : 1.0;
  } else {
    const double t_stat = mean / std::sqrt(var / static_cast<double>(n));
    boost::math::students_t dist(static_cast<double>(n - 1));
    result.diag_p = boost::math::cdf(boost::math::complement(dist, t_stat));
  }
  return result;
}

Matrix svd_projection(const Matrix& table) {
  if (table.rows() < 2)
    throw RunError("svd_projection: need at least 2 rows");
  Matrix centered = table.rowwise() - table.colwise().mean();
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  Matrix coords = Matrix::Zero(table.rows(), 2);
  const long k = std::min<long>(2, svd.matrixV().cols());
  coords.leftCols(k) = centered * svd.matrixV().leftCols(k);
  return coords;
}

namespace {

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

void write_heatmap_csv(const HeatmapResult& result,
                       const std::vector<std::string>& field_names,
                       const std::string& path) {
  const long f = result.s.rows();
  if (static_cast<long>(field_names.size()) != f)
    throw std::logic_error("write_heatmap_csv: field name count mismatch");
  std::ofstream out(path);
  if (!out) throw RunError("cannot write " + path);
  out << "masked_text_field";
  for (const auto& name : field_names) out << "," << csv_quote(name);
  out << "\n";
  out.precision(17);
  for (long a = 0; a < f; ++a) {
    out << csv_quote(field_names[static_cast<std::size_t>(a)]);
    for (long b = 0; b < f; ++b) out << "," << result.s(a, b);
    out << "\n";
  }
}

void write_projection_csv(const Matrix& coords, const DatasetSchema& schema,
                          const std::string& path) {
  if (coords.rows() != schema.M || coords.cols() != 2)
    throw std::logic_error("write_projection_csv: coords must be M x 2");
  std::ofstream out(path);
  if (!out) throw RunError("cannot write " + path);
  out << "id,field,value,x,y\n";
  out.precision(17);
  for (int id = 0; id < schema.M; ++id) {
    auto [field, index] = schema.locate(id);
    out << id << "," << csv_quote(schema.field_names[static_cast<std::size_t>(field)])
        << "," << csv_quote(schema.vocabularies[static_cast<std::size_t>(field)]
                                                [static_cast<std::size_t>(index)])
        << "," << coords(id, 0) << "," << coords(id, 1) << "\n";
  }
}

}  // namespace flip
