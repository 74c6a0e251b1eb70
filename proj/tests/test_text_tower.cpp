#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "flip/text_tower.hpp"
#include "gradcheck.hpp"

using namespace flip;

namespace {

EncoderSpec tiny_spec() {
  EncoderSpec spec;
  spec.vocab = 12;
  spec.d_text = 8;
  spec.n_layers = 2;
  spec.n_heads = 2;
  spec.d_ff = 16;
  spec.l_max = 10;
  return spec;
}

TextualSample seq(std::vector<int> ids) {
  TextualSample s;
  s.token_ids = std::move(ids);
  return s;
}

}  // namespace

TEST_CASE("encode returns one row per (sample, position)") {
  TextTower tower(tiny_spec(), 1);
  SeqLayout layout;
  Tape t;
  Var w = tower.encode(t, {seq({1, 4, 5, 6}), seq({1, 7, 8})}, layout);
  CHECK(layout.batch == 2);
  CHECK(layout.max_len == 4);
  CHECK(layout.lengths == std::vector<int>{4, 3});
  CHECK(t.value(w).rows() == 8);
  CHECK(t.value(w).cols() == 8);
}

TEST_CASE("padding never leaks into real positions") {
  TextTower tower(tiny_spec(), 2);
  std::vector<TextualSample> pair = {seq({1, 4, 5, 6, 9}), seq({1, 7, 8})};

  SeqLayout joint_layout, solo_layout;
  Tape t1, t2;
  Matrix joint = t1.value(tower.encode(t1, pair, joint_layout));
  Matrix solo = t2.value(tower.encode(t2, {pair[1]}, solo_layout));

  for (int i = 0; i < 3; ++i) {
    Eigen::RowVectorXd padded_row = joint.row(joint_layout.row(1, i));
    Eigen::RowVectorXd solo_row = solo.row(solo_layout.row(0, i));
    CHECK((padded_row - solo_row).norm() < 1e-12);
  }
}

TEST_CASE("permuting the batch permutes the outputs") {
  TextTower tower(tiny_spec(), 3);
  std::vector<TextualSample> batch = {seq({1, 4, 5}), seq({1, 6, 7}), seq({1, 8, 9})};
  auto reversed = batch;
  std::reverse(reversed.begin(), reversed.end());
  SeqLayout la, lb;
  Tape t1, t2;
  Matrix a = t1.value(tower.encode(t1, batch, la));
  Matrix b = t2.value(tower.encode(t2, reversed, lb));
  for (int bi = 0; bi < 3; ++bi)
    for (int pos = 0; pos < 3; ++pos)
      CHECK((a.row(la.row(bi, pos)) - b.row(lb.row(2 - bi, pos))).norm() == 0.0);
}

TEST_CASE("attention rows are distributions over unmasked keys") {
  TextTower tower(tiny_spec(), 4);
  SeqLayout layout;
  AttentionProbe probe;
  Tape t;
  tower.encode(t, {seq({1, 4, 5, 6}), seq({1, 7})}, layout, &probe);
  // 2 layers x 2 samples x 2 heads.
  REQUIRE(probe.probs.size() == 8);
  for (const auto& P : probe.probs) {
    CHECK((P.rows() == 4 || P.rows() == 2));
    CHECK(P.cols() == P.rows());  // keys limited to the sample's real tokens
    for (long r = 0; r < P.rows(); ++r) {
      CHECK(P.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(P.row(r).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("zeroed positions and one layer make the encoder permutation-equivariant") {
  EncoderSpec spec = tiny_spec();
  spec.n_layers = 1;
  TextTower tower(spec, 5);
  tower.params.at("pos/emb").value.setZero();

  std::vector<TextualSample> batch = {seq({1, 4, 5, 6})};
  std::vector<TextualSample> permuted = {seq({1, 6, 4, 5})};  // rotate non-CLS
  SeqLayout la, lb;
  Tape t1, t2;
  Matrix a = t1.value(tower.encode(t1, batch, la));
  Matrix b = t2.value(tower.encode(t2, permuted, lb));
  // token 4 moved from position 1 to 2, token 5 from 2 to 3, token 6 from 3 to 1
  CHECK((a.row(1) - b.row(2)).norm() < 1e-12);
  CHECK((a.row(2) - b.row(3)).norm() < 1e-12);
  CHECK((a.row(3) - b.row(1)).norm() < 1e-12);
  CHECK((a.row(0) - b.row(0)).norm() < 1e-12);
}

TEST_CASE("encoder gradients match finite differences") {
  EncoderSpec spec = tiny_spec();
  spec.n_layers = 1;  // keep the finite-difference sweep affordable
  spec.d_ff = 12;
  TextTower tower(spec, 6);
  std::vector<TextualSample> batch = {seq({1, 4, 5, 6}), seq({1, 7, 8})};

  auto build = [&](Tape& t) {
    SeqLayout layout;
    Var w = tower.encode(t, batch, layout);
    // Mean over real rows only; padded rows are out of contract.
    std::vector<int> valid;
    for (int b = 0; b < layout.batch; ++b)
      for (int i = 0; i < layout.lengths[b]; ++i) valid.push_back(layout.row(b, i));
    Var real = t.select_rows(w, valid);
    return t.mean(t.mul(real, t.sigmoid(real)));
  };
  auto rep = flip::testing::check_gradients(tower.params.all(), build);
  INFO(rep.worst);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("dropout is active only with an rng and perturbs activations") {
  EncoderSpec spec = tiny_spec();
  spec.dropout = 0.5;
  TextTower tower(spec, 7);
  std::vector<TextualSample> batch = {seq({1, 4, 5})};
  SeqLayout layout;

  Tape t1, t2, t3;
  Matrix eval1 = t1.value(tower.encode(t1, batch, layout));
  Matrix eval2 = t2.value(tower.encode(t2, batch, layout));
  CHECK((eval1 - eval2).norm() == 0.0);  // eval mode: no rng, no noise

  Rng rng(11);
  Matrix train = t3.value(tower.encode(t3, batch, layout, nullptr, &rng));
  CHECK((train - eval1).norm() > 0.0);
}

TEST_CASE("sequence and vocabulary bounds are enforced") {
  TextTower tower(tiny_spec(), 8);
  SeqLayout layout;
  Tape t;
  CHECK_THROWS_AS(
      tower.encode(t, {seq({1, 2, 3, 4, 5, 6, 7, 8, 9, 2, 3})}, layout),
      SchemaError);  // 11 tokens > l_max 10
  Tape t2;
  CHECK_THROWS_AS(tower.encode(t2, {seq({1, 12})}, layout), SchemaError);
  Tape t3;
  CHECK_THROWS_AS(tower.encode(t3, {}, layout), TrainError);
}

TEST_CASE("spec validation") {
  EncoderSpec spec = tiny_spec();
  spec.d_text = 9;  // not divisible by 2 heads
  CHECK_THROWS_AS(TextTower(spec, 1), ConfigError);
  spec = tiny_spec();
  spec.dropout = 1.0;
  CHECK_THROWS_AS(TextTower(spec, 1), ConfigError);
}
