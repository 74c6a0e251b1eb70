#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/SVD>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "flip/evalysis.hpp"
#include "flip/masking.hpp"

using namespace flip;

namespace {

double auc_brute_force(const std::vector<int>& labels,
                       const std::vector<double>& scores) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        wins += 1.0;
      else if (scores[i] == scores[j])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

std::string temp_path(const std::string& name) {
  return std::string("/tmp/flip_evalysis_") + name;
}

}  // namespace

TEST_CASE("auc handles perfect ranking and all-ties") {
  CHECK(auc({1, 0}, {0.9, 0.1}) == 1.0);
  CHECK(auc({1, 0}, {0.1, 0.9}) == 0.0);
  CHECK(auc({1, 0, 1, 0}, {0.3, 0.3, 0.3, 0.3}) == 0.5);
}

TEST_CASE("auc equals the pairwise brute force exactly") {
  Rng rng(501);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> labels(200);
    std::vector<double> scores(200);
    for (int i = 0; i < 200; ++i) {
      labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.4) ? 1 : 0;
      // Mix of a coarse grid (forcing ties) and continuous scores.
      scores[static_cast<std::size_t>(i)] =
          rng.bernoulli(0.5) ? static_cast<double>(rng.below(20)) / 19.0
                             : rng.uniform();
    }
    labels[0] = 1;
    labels[1] = 0;
    CHECK(auc(labels, scores) == auc_brute_force(labels, scores));
  }
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
  Rng rng(502);
  std::vector<int> labels(120);
  std::vector<double> scores(120), warped(120);
  for (int i = 0; i < 120; ++i) {
    labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
    scores[static_cast<std::size_t>(i)] = rng.uniform(-3.0, 3.0);
    warped[static_cast<std::size_t>(i)] =
        std::exp(scores[static_cast<std::size_t>(i)]) * 7.0 + 2.0;
  }
  labels[0] = 1;
  labels[1] = 0;
  CHECK(auc(labels, scores) == auc(labels, warped));
}

TEST_CASE("auc rejects one-class input") {
  CHECK_THROWS_AS(auc({1, 1}, {0.2, 0.3}), RunError);
  CHECK_THROWS_AS(auc({0, 0}, {0.2, 0.3}), RunError);
}

TEST_CASE("logloss formula, clipping, and the ln 2 identity") {
  CHECK(logloss({1}, {0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(logloss({1}, {1.0}) ==
        doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-9));
  CHECK(logloss({0}, {0.0}) ==
        doctest::Approx(-std::log(1.0 - 1e-7)).epsilon(1e-9));

  std::vector<int> labels(100);
  std::vector<double> probs(100);
  Rng rng(503);
  for (int i = 0; i < 100; ++i) {
    labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
    probs[static_cast<std::size_t>(i)] = rng.uniform();
  }
  double want = 0.0;
  for (int i = 0; i < 100; ++i) {
    double p = std::min(std::max(probs[static_cast<std::size_t>(i)], 1e-7), 1.0 - 1e-7);
    want += labels[static_cast<std::size_t>(i)] ? -std::log(p) : -std::log(1.0 - p);
  }
  want /= 100.0;
  CHECK(logloss(labels, probs) == doctest::Approx(want).epsilon(1e-10));

  std::vector<double> half(100, 0.5);
  CHECK(logloss(labels, half) == std::log(2.0));
}

TEST_CASE("permutation null sits at one half") {
  Rng rng(504);
  std::vector<int> labels(300);
  std::vector<double> scores(300);
  for (int i = 0; i < 300; ++i) {
    labels[static_cast<std::size_t>(i)] = rng.bernoulli(0.5) ? 1 : 0;
    scores[static_cast<std::size_t>(i)] = rng.uniform();
  }
  labels[0] = 1;
  labels[1] = 0;
  NullDistribution null = auc_permutation_null(labels, scores, 200, rng);
  CHECK(null.sd > 0.0);
  CHECK(std::abs(null.mean - 0.5) < 5.0 * null.sd / std::sqrt(200.0));
}

// ------------------------------------------------------------------ heatmap

namespace {

struct Probe {
  DatasetSchema schema;
  Tokenizer tok;
  std::vector<TabularSample> tab;
  std::vector<TextualSample> text;
};

Probe make_probe(int records, int fields) {
  SyntheticConfig cfg;
  cfg.n = 400;
  cfg.fields = fields;
  cfg.vocab_size = 5;
  SyntheticDataset data = generate_synthetic(cfg, 505);
  Probe p;
  p.schema = build_schema(data.field_names, data.train);
  std::vector<TabularSample> all = encode_all(p.schema, data.train);
  Template tmpl;
  std::vector<std::string> docs;
  for (const TabularSample& s : all) docs.push_back(render_text(s, p.schema, tmpl));
  p.tok = build_tokenizer(docs, 4096);
  for (int i = 0; i < records; ++i) {
    p.tab.push_back(all[static_cast<std::size_t>(i)]);
    p.text.push_back(tokenize_with_spans(all[static_cast<std::size_t>(i)], p.schema,
                                         tmpl, p.tok, 128));
  }
  return p;
}

}  // namespace

TEST_CASE("untrained heatmap is bounded, asymmetric, and near chance") {
  const int fields = 6;
  Probe p = make_probe(150, fields);

  IdTowerConfig idc;
  idc.d_emb = 4;
  idc.dnn_sizes = {8, 6};
  idc.cross_depth = 1;
  IdTower id_tower(p.schema.M, p.schema.F(), idc, 506);
  // Cold-start v rows sit near the normalizer's epsilon floor; inflate.
  Rng rng(507);
  Parameter& emb = id_tower.embedding_table();
  emb.value = uniform_init(rng, emb.value.rows(), emb.value.cols(), -0.5, 0.5);

  EncoderSpec spec;
  spec.vocab = p.tok.V();
  spec.d_text = 8;
  spec.n_layers = 1;
  spec.n_heads = 2;
  spec.d_ff = 12;
  spec.l_max = 128;
  TextTower text_tower(spec, 508);

  ObjectiveConfig oc;
  oc.d_text = spec.d_text;
  oc.d_tab = id_tower.d_tab();
  oc.vocab = p.tok.V();
  oc.num_features = p.schema.M;
  oc.num_fields = fields;
  oc.icl_dim = 5;
  Objectives obj(oc, 509);

  HeatmapResult r =
      masked_similarity_heatmap(id_tower, text_tower, obj, p.schema, p.tab, p.text, 64);
  CHECK(r.s.rows() == fields);
  CHECK(r.s.cols() == fields);
  CHECK(r.n_records == 150);
  CHECK(r.s.maxCoeff() <= 1.0 + 1e-9);
  CHECK(r.s.minCoeff() >= -1.0 - 1e-9);
  CHECK(r.diag_p >= 0.0);
  CHECK(r.diag_p <= 1.0);
  // No tied towers: the matrix has no reason to be symmetric.
  CHECK((r.s - r.s.transpose()).cwiseAbs().maxCoeff() > 1e-9);
  // Untrained model: diagonal-max rate stays within a generous null band.
  const double chance = 1.0 / fields;
  const double sd = std::sqrt(chance * (1.0 - chance) / fields);
  CHECK(r.diagonal_max_fraction <= chance + 3.5 * sd);

  HeatmapResult again =
      masked_similarity_heatmap(id_tower, text_tower, obj, p.schema, p.tab, p.text, 64);
  CHECK((r.s - again.s).cwiseAbs().maxCoeff() == 0.0);
}

// ---------------------------------------------------------------------- svd

TEST_CASE("svd projection of 2-D input preserves pairwise distances") {
  Rng rng(510);
  Matrix table(12, 2);
  for (long i = 0; i < 12; ++i) {
    table(i, 0) = rng.uniform(-2.0, 2.0);
    table(i, 1) = rng.uniform(-2.0, 2.0);
  }
  Matrix coords = svd_projection(table);
  Matrix centered = table.rowwise() - table.colwise().mean();
  for (long i = 0; i < 12; ++i)
    for (long j = 0; j < 12; ++j) {
      double want = (centered.row(i) - centered.row(j)).norm();
      double got = (coords.row(i) - coords.row(j)).norm();
      CHECK(got == doctest::Approx(want).epsilon(1e-9));
    }
}

TEST_CASE("svd projection of identical rows is all zeros") {
  Matrix table = Matrix::Ones(5, 7) * 3.25;
  Matrix coords = svd_projection(table);
  CHECK(coords.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("svd projection satisfies the rank-2 energy identity") {
  Rng rng(511);
  Matrix table(30, 6);
  for (long i = 0; i < 30; ++i)
    for (long j = 0; j < 6; ++j) table(i, j) = rng.normal();
  Matrix coords = svd_projection(table);

  Matrix centered = table.rowwise() - table.colwise().mean();
  Eigen::BDCSVD<Matrix> svd(centered);
  const auto& sv = svd.singularValues();
  double kept = sv(0) * sv(0) + sv(1) * sv(1);
  double discarded = 0.0;
  for (long k = 2; k < sv.size(); ++k) discarded += sv(k) * sv(k);

  CHECK(coords.squaredNorm() == doctest::Approx(kept).epsilon(1e-8));
  CHECK(centered.squaredNorm() - coords.squaredNorm() ==
        doctest::Approx(discarded).epsilon(1e-8));
}

TEST_CASE("svd projection of a single column puts all energy on x") {
  Matrix table(4, 1);
  table << 1.0, 2.0, 3.0, 10.0;
  Matrix coords = svd_projection(table);
  CHECK(coords.col(1).cwiseAbs().maxCoeff() == 0.0);
  CHECK(coords.col(0).cwiseAbs().maxCoeff() > 1.0);
}

// ---------------------------------------------------------------------- csv

TEST_CASE("csv writers emit labeled, parseable tables") {
  Probe p = make_probe(4, 3);

  HeatmapResult r;
  r.s = Matrix::Zero(3, 3);
  r.s << 0.9, 0.1, -0.2, 0.0, 0.8, 0.3, 0.1, 0.2, 0.7;
  std::string hpath = temp_path("heatmap.csv");
  write_heatmap_csv(r, p.schema.field_names, hpath);
  std::ifstream in(hpath);
  std::string header;
  std::getline(in, header);
  CHECK(header ==
        "masked_text_field,\"field_0\",\"field_1\",\"field_2\"");
  int rows = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3);

  Matrix coords = Matrix::Zero(p.schema.M, 2);
  coords.col(0).setLinSpaced(p.schema.M, 0.0, 1.0);
  std::string ppath = temp_path("projection.csv");
  write_projection_csv(coords, p.schema, ppath);
  std::ifstream pin(ppath);
  std::getline(pin, header);
  CHECK(header == "id,field,value,x,y");
  rows = 0;
  while (std::getline(pin, line))
    if (!line.empty()) ++rows;
  CHECK(rows == p.schema.M);

  std::remove(hpath.c_str());
  std::remove(ppath.c_str());
}
