#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "remote/checkpoint.hpp"
#include "remote/gradcheck.hpp"
#include "remote/synthetic.hpp"
#include "remote/train.hpp"

namespace remote {
namespace {

RunConfig small_config() {
  RunConfig c;
  c.d = 8;
  c.layers = 2;
  c.patch_size = 2;
  c.pos_frequencies = 2;
  c.mlp_hidden = 16;
  c.learning_rate = 0.003;
  c.batch_size = 8;
  c.dropout = 0.1;
  c.steps = 6;
  c.log_every = 3;
  c.seed = 21;
  c.synthetic.image_size = 4;
  return c;
}

RunConfig tiny_config() {
  RunConfig c;
  c.d = 8;
  c.layers = 2;
  c.vocab_size = 16;
  c.patch_size = 2;
  c.pos_frequencies = 2;
  c.seed = 3;
  c.synthetic.image_size = 4;
  return c;
}

// --- Config -----------------------------------------------------------------

TEST(ConfigTest, UnknownKeysAreRejectedAtEveryLevel) {
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"d": 8, "depth": 3})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"features": {"colour": true}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"synthetic": {"size": 4}})")), ConfigError);
  EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"d": "eight"})")), ConfigError);
}

TEST(ConfigTest, DefaultsFollowTheTrainingRecipe) {
  const RunConfig c;
  EXPECT_EQ(c.learning_rate, 1e-5);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.dropout, 0.5);
  EXPECT_EQ(c.max_tokens, 128u);
  EXPECT_EQ(c.max_objects, 12u);
  EXPECT_EQ(c.weight_decay, 0.01);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.adam_eps, 1e-8);
  EXPECT_EQ(c.expert_count(), 2 * c.layers + 2);
}

TEST(ConfigTest, JsonRoundTripIsStable) {
  RunConfig c = small_config();
  c.mot_variant = MotVariant::kCrossAttention;
  c.features.depth = false;
  c.experts.v = false;
  c.synthetic.variant = SyntheticVariant::kLowLevel;
  const std::string once = to_json(c).dump();
  const std::string twice = to_json(config_from_json(nlohmann::json::parse(once))).dump();
  EXPECT_EQ(once, twice);
  EXPECT_EQ(config_from_json(nlohmann::json::parse(R"({"L": 3})")).layers, 3u);
}

TEST(ConfigTest, ImpossibleConfigsAreRejected) {
  auto bad = [](auto edit) {
    RunConfig c = small_config();
    edit(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  bad([](RunConfig& c) { c.d = 0; });
  bad([](RunConfig& c) { c.layers = 1; });
  bad([](RunConfig& c) { c.relations = {"none"}; });
  bad([](RunConfig& c) { c.relations = {"a", "none"}; });
  bad([](RunConfig& c) { c.dropout = 1.0; });
  bad([](RunConfig& c) { c.lambda = 0.0; });
  bad([](RunConfig& c) { c.synthetic.image_size = 5; });
  bad([](RunConfig& c) { c.experts = {false, false, false, false}; });
}

// --- Synthetic data ------------------------------------------------------------

// Independent rule checker: class A nouns are ids 7..10, class B 11..14;
// boxes overlap when their centre gaps are under the half-width sums.
std::set<std::tuple<std::string, std::string, int>> oracle_triplets(const SampleRecord& s) {
  std::set<std::tuple<std::string, std::string, int>> out;
  const std::size_t ne = s.entity_spans.size(), no = s.objects.size();
  for (std::size_t i = 0; i < ne; ++i)
    for (std::size_t j = 0; j < ne; ++j) {
      const int a = s.tokens[s.entity_spans[i].begin], b = s.tokens[s.entity_spans[j].begin];
      if (i != j && a >= 7 && a <= 10 && b >= 11 && b <= 14)
        out.emplace("e" + std::to_string(i), "e" + std::to_string(j), 1);
    }
  for (std::size_t i = 0; i < ne; ++i)
    for (std::size_t k = 0; k < no; ++k) {
      const int e = s.tokens[s.entity_spans[i].begin];
      bool hit = false;
      for (std::size_t t = s.caption_spans[k].begin; t < s.caption_spans[k].end; ++t) hit |= s.tokens[t] == e;
      if (hit) out.emplace("e" + std::to_string(i), "o" + std::to_string(k), 2);
    }
  auto depth = [](const ObjectDescriptor& o) {
    double sum = 0.0;
    for (float v : o.depth) sum += v;
    return sum / static_cast<double>(o.depth.size());
  };
  for (std::size_t a = 0; a < no; ++a)
    for (std::size_t b = 0; b < no; ++b) {
      if (a == b) continue;
      const auto &pa = s.objects[a].position, &pb = s.objects[b].position;
      const bool overlap = std::abs(pa.cx - pb.cx) * 2 < pa.w + pb.w && std::abs(pa.cy - pb.cy) * 2 < pa.h + pb.h;
      if (overlap && depth(s.objects[a]) + 0.1 < depth(s.objects[b]))
        out.emplace("o" + std::to_string(a), "o" + std::to_string(b), 3);
    }
  return out;
}

TEST(SyntheticTest, GoldLabelsMatchIndependentRuleChecker) {
  for (auto variant : {SyntheticVariant::kDefault, SyntheticVariant::kLowLevel}) {
    RunConfig cfg = small_config();
    cfg.synthetic.variant = variant;
    const auto splits = synthetic::generate(cfg, 300, 50, 5);
    std::map<int, std::size_t> seen;
    for (const auto& s : splits.train) {
      std::set<std::tuple<std::string, std::string, int>> got;
      for (const auto& t : s.gold_triplets) {
        got.emplace(t.head.str(), t.tail.str(), t.relation);
        ++seen[t.relation];
      }
      ASSERT_EQ(got, oracle_triplets(s)) << s.sample_id;
      validate_sample(s, cfg.limits());
    }
    for (int r = 1; r <= 3; ++r) EXPECT_GT(seen[r], 20u) << "relation " << r << " is rare";
  }
}

TEST(SyntheticTest, FrontAndOverlapGivesInFrontOf) {
  const RunConfig cfg = small_config();
  std::mt19937_64 rng(1);
  SampleRecord s = synthetic::make_sample(cfg, "x", rng);
  s.objects[0].position = {0.3f, 0.5f, 0.3f, 0.3f};
  s.objects[1].position = {0.32f, 0.48f, 0.3f, 0.3f};
  std::fill(s.objects[0].depth.begin(), s.objects[0].depth.end(), 0.2f);
  std::fill(s.objects[1].depth.begin(), s.objects[1].depth.end(), 0.8f);
  const auto triplets = synthetic::planted_triplets(s, synthetic::Vocabulary(cfg.vocab_size));
  bool found = false, reversed = false;
  for (const auto& t : triplets) {
    found |= t.head == Ref::object(0) && t.tail == Ref::object(1) && t.relation == synthetic::kInFrontOf;
    reversed |= t.head == Ref::object(1) && t.tail == Ref::object(0);
  }
  EXPECT_TRUE(found);
  EXPECT_FALSE(reversed);
}

TEST(SyntheticTest, LowLevelFillersComeFromTheNounPool) {
  RunConfig cfg = small_config();
  cfg.synthetic.variant = SyntheticVariant::kLowLevel;
  const synthetic::Vocabulary vocab(cfg.vocab_size);
  for (const auto& s : synthetic::generate(cfg, 50, 0, 9).train) {
    const std::size_t sep = static_cast<std::size_t>(
        std::find(s.tokens.begin(), s.tokens.end(), tokens::kSep) - s.tokens.begin());
    for (std::size_t i = 1; i < sep; ++i) {
      const int t = s.tokens[i];
      if (t != tokens::kEntityOpen && t != tokens::kEntityClose) {
        EXPECT_TRUE(vocab.is_noun(t));
      }
    }
  }
}

TEST(SyntheticTest, FixedSeedGivesIdenticalFileAndSplitFollowsHash) {
  const RunConfig cfg = small_config();
  auto dump = [&] {
    std::ostringstream os;
    const auto splits = synthetic::generate(cfg, 40, 10, 77);
    write_jsonl(os, splits.train);
    write_jsonl(os, splits.eval);
    return os.str();
  };
  EXPECT_EQ(dump(), dump());
  const auto splits = synthetic::generate(cfg, 40, 10, 77);
  for (const auto& s : splits.train) EXPECT_FALSE(is_eval_sample(s.sample_id));
  for (const auto& s : splits.eval) EXPECT_TRUE(is_eval_sample(s.sample_id));
  RunConfig bad = cfg;
  bad.relations = {"none", "x"};
  EXPECT_THROW(synthetic::generate(bad, 1, 1, 1), ConfigError);
}

// --- Records and files ---------------------------------------------------------------

TEST(SampleIoTest, JsonlRoundTripIsByteIdentical) {
  const auto data = synthetic::generate(small_config(), 30, 0, 4).train;
  std::ostringstream first;
  write_jsonl(first, data);
  std::istringstream in(first.str());
  const auto back = read_jsonl(in);
  EXPECT_EQ(back, data);
  std::ostringstream second;
  write_jsonl(second, back);
  EXPECT_EQ(first.str(), second.str());
}

TEST(SampleIoTest, InvalidRecordsNameTheSample) {
  auto s = synthetic::generate(small_config(), 1, 0, 4).train.front();
  s.sample_id = "broken-7";
  s.gold_triplets.push_back({Ref::entity(0), Ref::object(9), 2});
  try {
    validate_sample(s);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("broken-7"), std::string::npos);
  }
  std::istringstream garbage("{\"sample_id\": 3\n");
  EXPECT_THROW(read_jsonl(garbage), DataError);
}

TEST(CheckpointTest, RoundTripIsByteIdentical) {
  const RunConfig cfg = small_config();
  const auto params = init_parameters<float>(cfg, 5);
  const std::string blob = serialize_checkpoint(cfg, params);
  const Checkpoint ck = parse_checkpoint(blob);
  EXPECT_EQ(serialize_checkpoint(ck.config, ck.params), blob);
  EXPECT_EQ(to_json(ck.config).dump(), to_json(cfg).dump());
  check_compatible(params, ck.params);
}

TEST(CheckpointTest, ShapeMismatchNamesParameter) {
  RunConfig cfg = small_config();
  const auto params = init_parameters<float>(cfg, 5);
  cfg.mlp_hidden = 32;
  try {
    check_compatible(init_parameters<float>(cfg, 5), params);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("head.w1"), std::string::npos) << e.what();
  }
  std::string blob = serialize_checkpoint(small_config(), params);
  blob.pop_back();
  EXPECT_THROW(parse_checkpoint(blob), DataError);
  EXPECT_THROW(parse_checkpoint("{\"format\": \"other\"}\n"), DataError);
}

// --- Training and evaluation -----------------------------------------------------------

TEST(TrainTest, ZeroLearningRateLeavesParametersUntouched) {
  RunConfig cfg = small_config();
  cfg.learning_rate = 0.0;
  const auto data = synthetic::generate(cfg, 10, 0, 2).train;
  const auto result = train(cfg, data);
  EXPECT_EQ(serialize_checkpoint(cfg, result.params), serialize_checkpoint(cfg, init_parameters<float>(cfg, cfg.seed)));
}

double mean_loss(const RunConfig& cfg, ParameterStore<float>& params, const SampleRecord& s) {
  Tape<float> tape(false);
  Leaves<float> leaves(tape, params);
  const auto f = forward_sample(leaves, s, cfg);
  double total = 0.0;
  const auto pairs = candidate_pairs(s);
  for (const auto& [h, t] : pairs)
    total += relation_loss(pair_logits(leaves, f, s, h, t, cfg), gold_relation(s, h, t)).value()[0];
  return total / static_cast<double>(pairs.size());
}

TEST(TrainTest, OneStepOnOneSampleLowersItsLoss) {
  RunConfig cfg = small_config();
  cfg.learning_rate = 1e-2;
  cfg.dropout = 0.0;
  cfg.steps = 1;
  cfg.log_every = 1;
  const auto data = synthetic::generate(cfg, 1, 0, 3).train;
  auto before = init_parameters<float>(cfg, cfg.seed);
  auto result = train(cfg, data);
  EXPECT_LT(mean_loss(cfg, result.params, data[0]), mean_loss(cfg, before, data[0]));
}

TEST(TrainTest, FixedSeedRunsAreBitIdentical) {
  const RunConfig cfg = small_config();
  const auto data = synthetic::generate(cfg, 20, 0, 2).train;
  const auto a = train(cfg, data), b = train(cfg, data);
  EXPECT_EQ(serialize_checkpoint(cfg, a.params), serialize_checkpoint(cfg, b.params));
  EXPECT_EQ(history_csv(a.history), history_csv(b.history));
  ASSERT_EQ(a.history.size(), 2u);
  EXPECT_EQ(a.history.back().step, cfg.steps);
}

TEST(TrainTest, EvaluatingTrainSplitReproducesFinalHistoryRow) {
  const RunConfig cfg = small_config();
  const auto data = synthetic::generate(cfg, 20, 0, 8).train;
  auto result = train(cfg, data);
  const auto m = evaluate(cfg, result.params, data).metrics;
  EXPECT_EQ(to_json(m).dump(), to_json(result.history.back().train).dump());
}

TEST(TrainTest, NonFiniteLossAbortsWithStepAndGroup) {
  RunConfig cfg = small_config();
  cfg.learning_rate = 1e35;
  cfg.steps = 50;
  const auto data = synthetic::generate(cfg, 10, 0, 2).train;
  try {
    train(cfg, data);
    FAIL() << "expected a numerical failure";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("step "), std::string::npos) << what;
    EXPECT_NE(what.find("group"), std::string::npos) << what;
  }
}

TEST(TrainTest, EmptyDatasetIsDataError) { EXPECT_THROW(train(small_config(), {}), DataError); }

TEST(EvaluateTest, UntrainedAccuracyOnRandomGoldsIsNearChance) {
  // Golds drawn uniformly at random are independent of the untrained
  // predictions, so accuracy concentrates at 1/R.
  const RunConfig cfg = small_config();
  auto params = init_parameters<float>(cfg, 4);
  const auto data = synthetic::generate(cfg, 60, 0, 6).train;
  const auto pairs = evaluate(cfg, params, data).pairs;
  std::mt19937_64 rng(99);
  std::vector<int> preds;
  for (const auto& p : pairs) preds.push_back(p.pred);
  const double r = static_cast<double>(cfg.relation_count());
  const double n = 1000.0 * static_cast<double>(preds.size());
  double hits = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<int> golds;
    for (std::size_t k = 0; k < preds.size(); ++k) golds.push_back(static_cast<int>(rng() % cfg.relation_count()));
    hits += score(preds, golds, cfg.relations).accuracy * static_cast<double>(preds.size());
  }
  const double sigma = std::sqrt((1.0 / r) * (1.0 - 1.0 / r) / n);
  EXPECT_NEAR(hits / n, 1.0 / r, 4.0 * sigma);
}

TEST(EvaluateTest, DumpsAndDisabledRoutingChangeOutputs) {
  RunConfig cfg = small_config();
  cfg.steps = 30;
  cfg.log_every = 30;
  const auto data = synthetic::generate(cfg, 40, 0, 10).train;
  auto result = train(cfg, data);
  std::ostringstream preds, weights;
  const auto full = evaluate(cfg, result.params, data, {&preds, &weights, ""});
  std::istringstream lines(weights.str());
  std::string header;
  std::getline(lines, header);
  EXPECT_EQ(header, "sample_id,relation_gold,relation_pred,w_0,w_1,w_2,w_3,w_4,w_5");
  std::size_t rows = 0;
  for (std::string line; std::getline(lines, line);) ++rows;
  EXPECT_EQ(rows, full.pairs.size());

  RunConfig uniform = cfg;
  uniform.disable_mmoe = true;
  const auto flat = evaluate(uniform, result.params, data);
  for (float w : flat.pairs.front().expert_weights) EXPECT_FLOAT_EQ(w, 1.0f / 6.0f);
  std::size_t changed = 0;
  for (std::size_t k = 0; k < full.pairs.size(); ++k) changed += full.pairs[k].logits != flat.pairs[k].logits;
  EXPECT_EQ(changed, full.pairs.size());
}

// --- Gradient check ---------------------------------------------------------------------

TEST(GradCheckTest, TinyConfigPassesEveryGroup) {
  const auto report = grad_check(tiny_config(), 3);
  EXPECT_TRUE(report.passed());
  for (const char* g : {"embeddings", "encoder", "fusion", "attention", "router", "classifier"}) {
    ASSERT_TRUE(report.groups.contains(g)) << g;
    EXPECT_LT(report.groups.at(g).max_relative_error, 1e-3) << g;
    EXPECT_GT(report.groups.at(g).max_abs_gradient, 0.0) << g;
  }
}

TEST(GradCheckTest, CorruptedBackwardFailsExactlyThatGroup) {
  GradCheckOptions opts;
  opts.fault = OpKind::kSigmoid;
  const auto report = grad_check(tiny_config(), 3, opts);
  EXPECT_FALSE(report.passed());
  EXPECT_EQ(report.failing_groups(), std::vector<std::string>{"fusion"});
}

TEST(GradCheckTest, ZeroHeadMakesLossConstant) {
  const RunConfig cfg = tiny_config();
  GradCheckOptions opts;
  opts.zero_head = true;
  const auto report = grad_check(cfg, 3, opts);
  EXPECT_NEAR(report.loss, std::log(4.0), 1e-12);
  for (const auto& [name, g] : report.groups)
    if (name != "classifier") {
      EXPECT_LT(g.max_abs_gradient, 1e-6) << name;
    }
  EXPECT_TRUE(report.passed());

  // The output bias is the one parameter the loss still depends on: its
  // gradient is the mean over pairs of softmax(0) minus the gold one-hot.
  auto params = init_parameters<double>(cfg, 3);
  for (const char* n : {"head.w1", "head.b1", "head.w2", "head.b2"})
    std::fill(params.get(n).data().begin(), params.get(n).data().end(), 0.0);
  const SampleRecord s = grad_check_sample(cfg);
  PlanLog plans;
  Tape<double> tape(true, 1);
  tape.backward(grad_check_loss(tape, params, s, cfg, plans));
  const auto pairs = candidate_pairs(s);
  std::vector<double> want(4, 0.25);
  for (const auto& [h, t] : pairs) want[static_cast<std::size_t>(gold_relation(s, h, t))] -= 1.0 / pairs.size();
  const auto& g = *params.get("head.b2").grad();
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(g[k], want[k], 1e-12);
  for (double x : *params.get("head.w1").grad()) EXPECT_EQ(x, 0.0);
}

TEST(GradCheckTest, RejectsLargeConfigs) {
  RunConfig cfg = tiny_config();
  cfg.d = 16;
  EXPECT_THROW(grad_check(cfg, 1), ConfigError);
  cfg = tiny_config();
  cfg.layers = 3;
  EXPECT_THROW(grad_check(cfg, 1), ConfigError);
}

}  // namespace
}  // namespace remote
