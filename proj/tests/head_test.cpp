#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "remote/mmoe.hpp"
#include "remote/relation.hpp"

namespace remote {
namespace {

using D = BasicTensor<double>;

D random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  D t(Shape{r, c});
  for (auto& x : t.data()) x = n(rng);
  return t;
}

// Two levels, text rows = 3, vision rows = 4, width d.
ExpertSet<double> random_experts(Tape<double>& tape, std::size_t d, std::mt19937_64& rng, double sd = 1.0) {
  ExpertSet<double> set{{}, 2};
  for (std::size_t k = 0; k < 2; ++k) set.experts.push_back(tape.constant(random_matrix(3, d, rng, sd)));
  for (std::size_t k = 0; k < 2; ++k) set.experts.push_back(tape.constant(random_matrix(4, d, rng, sd)));
  set.experts.push_back(tape.constant(random_matrix(3, d, rng, sd)));
  set.experts.push_back(tape.constant(random_matrix(4, d, rng, sd)));
  return set;
}

TEST(RouteTest, ZeroProjectionIsUniform) {
  Tape<double> tape;
  std::mt19937_64 rng(1);
  const auto set = random_experts(tape, 4, rng);
  const D w = route(set, tape.constant(D(Shape{24, 6}))).value();
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(w[k], 1.0 / 6.0, 1e-15);
}

TEST(RouteTest, DominantLogitSaturates) {
  Tape<double> tape;
  std::mt19937_64 rng(2);
  auto set = random_experts(tape, 4, rng);
  // Expert 3 pools to a vector with first entry 1; a column reading that
  // entry with weight 20 lifts its logit by 20 over the rest.
  D e3(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) e3(i, 0) = 1.0;
  set.experts[3] = tape.constant(e3);
  D p(Shape{24, 6});
  p(3 * 4 + 0, 3) = 20.0;
  const D w = route(set, tape.constant(p)).value();
  EXPECT_GT(w[3], 0.999);
}

TEST(RouteTest, MatchesPoolConcatProjectSoftmaxOracle) {
  Tape<double> tape;
  std::mt19937_64 rng(3);
  const auto set = random_experts(tape, 4, rng);
  const D p = random_matrix(24, 6, rng);
  const D w = route(set, tape.constant(p)).value();
  std::vector<double> pooled;
  for (const auto& e : set.experts) {
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t i = 0; i < e.rows(); ++i) s += e.value()(i, k);
      pooled.push_back(s / static_cast<double>(e.rows()));
    }
  }
  std::vector<double> logits(6, 0.0);
  for (std::size_t c = 0; c < 6; ++c)
    for (std::size_t r = 0; r < 24; ++r) logits[c] += pooled[r] * p(r, c);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(w[c], logits[c] / z, 1e-12);
}

TEST(RouteTest, WrongExpertCountIsConfigError) {
  Tape<double> tape;
  std::mt19937_64 rng(4);
  const auto set = random_experts(tape, 4, rng);
  EXPECT_THROW(route(set, tape.constant(D(Shape{32, 8}))), ConfigError);
  EXPECT_THROW(route(set, tape.constant(D(Shape{24, 6})), std::vector<bool>(5, true)), ConfigError);
}

TEST(RouteTest, SimplexOverRandomInputs) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    Tape<double> tape;
    const auto set = random_experts(tape, 3, rng, 3.0);
    const D w = route(set, tape.constant(random_matrix(18, 6, rng, 3.0))).value();
    double s = 0.0;
    for (std::size_t k = 0; k < 6; ++k) {
      EXPECT_GE(w[k], 0.0);
      s += w[k];
    }
    ASSERT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(RouteTest, LogitShiftLeavesWeightsUnchanged) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Tape<double> tape;
    const auto set = random_experts(tape, 3, rng);
    const Var<double> logits = routing_logits(set, tape.constant(random_matrix(18, 6, rng)));
    const double c = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
    const D a = softmax(logits, 1).value();
    const D b = softmax(add_scalar(logits, c), 1).value();
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(a[k], b[k], 1e-12);
    EXPECT_EQ(predict(a.data()), predict(b.data()));
  }
}

TEST(RouteTest, MaskedExpertsGetZeroWeight) {
  Tape<double> tape;
  std::mt19937_64 rng(7);
  const auto set = random_experts(tape, 3, rng);
  ExpertFlags flags;
  flags.t2v = false;
  const auto mask = expert_mask(flags, 2);
  EXPECT_EQ(mask, (std::vector<bool>{true, true, false, false, true, true}));
  const D w = route(set, tape.constant(random_matrix(18, 6, rng)), mask).value();
  EXPECT_EQ(w[2], 0.0);
  EXPECT_EQ(w[3], 0.0);
  EXPECT_NEAR(w[0] + w[1] + w[4] + w[5], 1.0, 1e-12);
  const D u = uniform_route(tape, 6, mask).value();
  EXPECT_EQ(u.values(), (std::vector<double>{0.25, 0.25, 0.0, 0.0, 0.25, 0.25}));
}

TEST(MixTest, SingleWeightOnTextTopFallsBackOnVisionSide) {
  Tape<double> tape;
  std::mt19937_64 rng(8);
  const auto set = random_experts(tape, 3, rng);
  const auto mixed = mix(set, tape.constant(D::matrix({{0, 0, 0, 0, 1, 0}})));
  EXPECT_EQ(mixed.text_side.value().values(), set.experts[4].value().values());
  EXPECT_EQ(mixed.vision_side.value().values(), set.experts[5].value().values());
}

TEST(MixTest, EqualExpertsPerSideReturnThatTensor) {
  Tape<double> tape;
  std::mt19937_64 rng(9);
  const Var<double> x = tape.constant(random_matrix(3, 2, rng)), y = tape.constant(random_matrix(4, 2, rng));
  const ExpertSet<double> set{{x, x, y, y, x, y}, 2};
  const auto mixed = mix(set, tape.constant(D::full(Shape{1, 6}, 1.0 / 6.0)));
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(mixed.text_side.value()[k], x.value()[k], 1e-12);
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(mixed.vision_side.value()[k], y.value()[k], 1e-12);
}

TEST(MixTest, MatchesWeightedSumOracleAndStaysConvex) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    Tape<double> tape;
    const auto set = random_experts(tape, 3, rng);
    const D w = route(set, tape.constant(random_matrix(18, 6, rng))).value();
    const auto mixed = mix(set, tape.constant(w));
    const std::vector<std::size_t> text{0, 1, 4}, vision{2, 3, 5};
    for (const auto& [side, out] : {std::pair{text, mixed.text_side.value()}, {vision, mixed.vision_side.value()}}) {
      double z = 0.0;
      for (std::size_t k : side) z += w[k];
      for (std::size_t e = 0; e < out.numel(); ++e) {
        double want = 0.0, lo = 1e300, hi = -1e300;
        for (std::size_t k : side) {
          const double v = set.experts[k].value()[e];
          want += w[k] / z * v;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
        EXPECT_NEAR(out[e], want, 1e-12);
        EXPECT_GE(out[e], lo - 1e-12);
        EXPECT_LE(out[e], hi + 1e-12);
      }
    }
  }
}

TEST(MixTest, ShapeMismatchWithinSide) {
  Tape<double> tape;
  std::mt19937_64 rng(11);
  auto set = random_experts(tape, 3, rng);
  set.experts[1] = tape.constant(D(Shape{5, 3}));
  EXPECT_THROW(mix(set, tape.constant(D::full(Shape{1, 6}, 1.0 / 6.0))), DimensionError);
}

TEST(EntityReprTest, SpanPooling) {
  Tape<double> tape;
  std::mt19937_64 rng(12);
  const D rows = random_matrix(6, 3, rng);
  const Var<double> x = tape.constant(rows);
  const D one = entity_repr(x, Span{2, 3}).value();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(one[k], rows(2, k));
  const D two = entity_repr(x, Span{2, 4}).value();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(two[k], 0.5 * (rows(2, k) + rows(3, k)), 1e-15);
  const D marker = entity_repr(x, Span{2, 4}, SpanRepr::kMarker).value();
  for (std::size_t k = 0; k < 3; ++k) EXPECT_DOUBLE_EQ(marker[k], rows(1, k));
  EXPECT_THROW(entity_repr(x, Span{3, 3}), ContractError);
  EXPECT_THROW(entity_repr(x, Span{5, 7}), ContractError);

  const Var<double> same = tape.constant(D::matrix({{1, 2}, {1, 2}, {1, 2}, {1, 2}}));
  EXPECT_EQ(entity_repr(same, Span{1, 4}).value().values(), (std::vector<double>{1, 2}));
}

TEST(ObjectReprTest, CaptionThenRegion) {
  Tape<double> tape;
  std::mt19937_64 rng(13);
  const D text = random_matrix(5, 2, rng), vision = random_matrix(4, 2, rng);
  const MixedRepresentation<double> mixed{tape.constant(text), tape.constant(vision)};
  // One-token caption, object 1 of two one-patch objects (2 rows each).
  const D rep = object_repr(mixed, Span{3, 4}, 1, 2).value();
  ASSERT_EQ(rep.shape(), (Shape{1, 4}));
  EXPECT_DOUBLE_EQ(rep[0], text(3, 0));
  EXPECT_DOUBLE_EQ(rep[1], text(3, 1));
  EXPECT_NEAR(rep[2], 0.5 * (vision(2, 0) + vision(3, 0)), 1e-15);
  EXPECT_NEAR(rep[3], 0.5 * (vision(2, 1) + vision(3, 1)), 1e-15);
  EXPECT_THROW(object_repr(mixed, Span{3, 4}, 2, 2), ContractError);
}

HeadParams<double> head_params(Tape<double>& tape, const D& w1, const D& b1, const D& w2, const D& b2) {
  return {tape.constant(w1), tape.constant(b1), tape.constant(w2), tape.constant(b2)};
}

TEST(ClassifyTest, ZeroWeightsPredictNone) {
  Tape<double> tape;
  const auto p = head_params(tape, D(Shape{8, 5}), D(Shape{1, 5}), D(Shape{5, 4}), D(Shape{1, 4}));
  const Var<double> logits = classify_logits(tape.constant(D(Shape{1, 2})), tape.constant(D(Shape{1, 4})), p);
  EXPECT_EQ(logits.value().values(), std::vector<double>(4, 0.0));
  EXPECT_EQ(predict(logits), 0);
}

TEST(ClassifyTest, CraftedWeightsSelectRelation) {
  Tape<double> tape;
  D w1(Shape{8, 1}), w2(Shape{1, 4});
  w1(0, 0) = 1.0;  // reads the first head feature
  w2(0, 2) = 5.0;
  const auto p = head_params(tape, w1, D(Shape{1, 1}), w2, D(Shape{1, 4}));
  const Var<double> logits =
      classify_logits(tape.constant(D::matrix({{1.0, 0.0}})), tape.constant(D::matrix({{0.0, 0.0}})), p);
  EXPECT_EQ(predict(logits), 2);
}

TEST(ClassifyTest, MatchesTwoLayerOracleForAllPairKinds) {
  std::mt19937_64 rng(14);
  const std::size_t d = 3, h = 5, r = 4;
  Tape<double> tape;
  const D w1 = random_matrix(4 * d, h, rng), b1 = random_matrix(1, h, rng), w2 = random_matrix(h, r, rng),
          b2 = random_matrix(1, r, rng);
  const auto p = head_params(tape, w1, b1, w2, b2);
  for (std::size_t hw : {d, 2 * d})
    for (std::size_t tw : {d, 2 * d}) {
      const D head = random_matrix(1, hw, rng), tail = random_matrix(1, tw, rng);
      std::vector<double> x(4 * d, 0.0);
      for (std::size_t k = 0; k < hw; ++k) x[k] = head[k];
      for (std::size_t k = 0; k < tw; ++k) x[2 * d + k] = tail[k];
      std::vector<double> hidden(h);
      for (std::size_t j = 0; j < h; ++j) {
        double s = b1[j];
        for (std::size_t k = 0; k < 4 * d; ++k) s += x[k] * w1(k, j);
        hidden[j] = std::tanh(s);
      }
      const D got = classify_logits(tape.constant(head), tape.constant(tail), p).value();
      for (std::size_t c = 0; c < r; ++c) {
        double s = b2[c];
        for (std::size_t j = 0; j < h; ++j) s += hidden[j] * w2(j, c);
        EXPECT_NEAR(got[c], s, 1e-12);
      }
    }
  EXPECT_THROW(classify_logits(tape.constant(D(Shape{1, 7})), tape.constant(D(Shape{1, 3})), p), ConfigError);
}

TEST(PredictTest, LowestIdWinsTies) {
  EXPECT_EQ(predict(std::vector<double>{1, 3, 3, 2}), 1);
  EXPECT_EQ(predict(std::vector<double>{2, 2}), 0);
}

TEST(LossTest, UniformLogitsGiveLogR) {
  for (std::size_t R : {2u, 3u, 28u}) {
    Tape<double> tape;
    const double loss = relation_loss(tape.constant(D::full(Shape{1, R}, 0.7)), 1).value()[0];
    EXPECT_NEAR(loss, std::log(static_cast<double>(R)), 1e-12);
  }
  EXPECT_NEAR(std::log(28.0), 3.332, 5e-4);
}

TEST(LossTest, SaturatedAndScriptedValues) {
  Tape<double> tape;
  EXPECT_LT(relation_loss(tape.constant(D::matrix({{0, 30, 0}})), 1).value()[0], 1e-9);
  EXPECT_NEAR(relation_loss(tape.constant(D::matrix({{1, 2, 3}})), 2).value()[0], 0.40760596, 1e-8);
}

TEST(LossTest, OutOfRangeGoldNamesSample) {
  Tape<double> tape;
  try {
    relation_loss(tape.constant(D::matrix({{0, 0}})), 2, "s-17");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("s-17"), std::string::npos);
  }
}

TEST(LossTest, NonNegativeAndShiftInvariantArgmax) {
  std::mt19937_64 rng(15);
  for (int trial = 0; trial < 200; ++trial) {
    Tape<double> tape;
    const D logits = random_matrix(1, 5, rng, 4.0);
    const int gold = static_cast<int>(rng() % 5);
    const double c = std::normal_distribution<double>(0.0, 10.0)(rng);
    const Var<double> l = tape.constant(logits);
    EXPECT_GE(relation_loss(l, gold).value()[0], 0.0);
    EXPECT_NEAR(relation_loss(l, gold).value()[0], relation_loss(add_scalar(l, c), gold).value()[0], 1e-9);
    EXPECT_EQ(predict(l), predict(add_scalar(l, c)));
  }
}

const std::vector<std::string> kNames{"none", "a", "b", "c"};

TEST(ScoreTest, AllCorrect) {
  const auto m = score({1, 2, 3, 1}, {1, 2, 3, 1}, kNames);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
}

TEST(ScoreTest, AllNonePredictions) {
  const auto m = score({0, 0, 0}, {1, 2, 0}, kNames);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.f1, 0.0);
  EXPECT_NEAR(m.accuracy, 1.0 / 3.0, 1e-15);
}

TEST(ScoreTest, HandCountedBatch) {
  // 3 TP, 1 FP (predicted b on a none pair), 2 FN (missed as none).
  const std::vector<int> preds{1, 2, 3, 2, 0, 0, 0};
  const std::vector<int> golds{1, 2, 3, 0, 1, 3, 0};
  const auto m = score(preds, golds, kNames);
  EXPECT_NEAR(m.precision, 0.75, 1e-12);
  EXPECT_NEAR(m.recall, 0.6, 1e-12);
  EXPECT_NEAR(m.f1, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(m.accuracy, 4.0 / 7.0, 1e-12);
  EXPECT_EQ(m.per_relation.at("b").fp, 1u);
}

TEST(ScoreTest, PermutationInvarianceAndLengthCheck) {
  std::mt19937_64 rng(16);
  std::vector<int> p(100), g(100);
  for (auto& x : p) x = static_cast<int>(rng() % 4);
  for (auto& x : g) x = static_cast<int>(rng() % 4);
  const auto a = score(p, g, kNames);
  std::vector<std::size_t> order(100);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> p2, g2;
  for (auto i : order) p2.push_back(p[i]), g2.push_back(g[i]);
  const auto b = score(p2, g2, kNames);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_THROW(score({1}, {1, 2}, kNames), ContractError);
}

}  // namespace
}  // namespace remote
