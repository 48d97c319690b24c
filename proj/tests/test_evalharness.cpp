#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "support/bleu_oracle.hpp"
#include "ucmr/evalharness.hpp"

namespace {

using namespace ucmr;
using eval::Class;
using eval::PredictionRecord;

using Tokens = std::vector<std::string>;
using oracle::bleu_oracle;

PredictionRecord rec(Class gold, Class pred) { return {"x", gold, pred, std::nullopt, std::nullopt}; }

TEST(MicroAccuracy, Examples) {
  EXPECT_DOUBLE_EQ(eval::micro_accuracy({rec(Class::Yes, Class::Yes), rec(Class::No, Class::No)}), 1.0);
  EXPECT_DOUBLE_EQ(eval::micro_accuracy({rec(Class::Yes, Class::Yes), rec(Class::No, Class::No),
                                         rec(Class::Inquire, Class::Inquire), rec(Class::Irrelevant, Class::Yes)}),
                   0.75);
  EXPECT_THROW(eval::micro_accuracy({}), Error);
}

TEST(MacroAccuracy, ImbalancedSet) {
  std::vector<PredictionRecord> rs(9, rec(Class::Yes, Class::Yes));
  rs.push_back(rec(Class::No, Class::Yes));
  EXPECT_DOUBLE_EQ(eval::micro_accuracy(rs), 0.9);
  EXPECT_DOUBLE_EQ(eval::macro_accuracy(rs), 0.5);
}

TEST(MacroAccuracy, SingleClassEqualsMicro) {
  std::vector<PredictionRecord> rs = {rec(Class::No, Class::No), rec(Class::No, Class::Yes), rec(Class::No, Class::No)};
  EXPECT_DOUBLE_EQ(eval::macro_accuracy(rs), eval::micro_accuracy(rs));
  EXPECT_THROW(eval::macro_accuracy({}), Error);
}

TEST(Accuracy, BoundsAndBalancedEquality) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> c(0, 3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<PredictionRecord> rs;
    for (int i = 0; i < 1 + trial % 17; ++i) rs.push_back(rec(eval::kClasses[c(rng)], eval::kClasses[c(rng)]));
    double mi = eval::micro_accuracy(rs), ma = eval::macro_accuracy(rs);
    EXPECT_GE(mi, 0.0);
    EXPECT_LE(mi, 1.0);
    EXPECT_GE(ma, 0.0);
    EXPECT_LE(ma, 1.0);
  }
  // Balanced gold, equal per-class accuracy (1 of 2 each).
  std::vector<PredictionRecord> rs;
  for (Class k : eval::kClasses) {
    rs.push_back(rec(k, k));
    rs.push_back(rec(k, k == Class::Yes ? Class::No : Class::Yes));
  }
  EXPECT_DOUBLE_EQ(eval::micro_accuracy(rs), eval::macro_accuracy(rs));
}

TEST(Bleu, Examples) {
  Tokens ref = {"the", "cat", "sat"};
  EXPECT_DOUBLE_EQ(eval::bleu(ref, ref, 1), 1.0);
  EXPECT_DOUBLE_EQ(eval::bleu(ref, ref, 3), 1.0);
  EXPECT_DOUBLE_EQ(eval::bleu({}, ref, 4), 0.0);
  EXPECT_NEAR(eval::bleu({"the", "the", "the"}, ref, 1), 1.0 / 3.0, 1e-9);
  EXPECT_THROW(eval::bleu(ref, {}, 1), Error);
}

TEST(Bleu, SelfScoreIsOneUpToLength) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> w(0, 5), len(1, 9);
  for (int trial = 0; trial < 100; ++trial) {
    Tokens a(static_cast<std::size_t>(len(rng)));
    for (auto& t : a) t = "w" + std::to_string(w(rng));
    for (int n = 1; n <= static_cast<int>(std::min<std::size_t>(a.size(), 4)); ++n) EXPECT_DOUBLE_EQ(eval::bleu(a, a, n), 1.0);
  }
}

TEST(Bleu, BrevityPenalty) {
  Tokens ref = {"a", "b", "c", "d"};
  EXPECT_NEAR(eval::bleu({"a", "b"}, ref, 1), std::exp(1.0 - 4.0 / 2.0), 1e-12);
}

TEST(Bleu, MatchesBruteForceOracle) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> w(0, 4), len(0, 10), rlen(1, 10);
  for (int trial = 0; trial < 50; ++trial) {
    Tokens cand(static_cast<std::size_t>(len(rng))), ref(static_cast<std::size_t>(rlen(rng)));
    for (auto& t : cand) t = "w" + std::to_string(w(rng));
    for (auto& t : ref) t = "w" + std::to_string(w(rng));
    for (int n : {1, 4}) EXPECT_EQ(eval::bleu(cand, ref, n), bleu_oracle(cand, ref, n)) << "trial " << trial;
  }
}

// --- datasets and e2e -------------------------------------------------------

std::vector<eval::DialogExample> balanced_set() {
  std::vector<eval::DialogExample> ds;
  int i = 0;
  for (Class c : eval::kClasses) {
    eval::DialogExample e;
    e.id = "ex" + std::to_string(i++);
    e.question = "Can I?";
    e.gold_class = c;
    if (c == Class::Inquire) e.gold_question = "Is the chicken coughing today?";
    ds.push_back(e);
  }
  return ds;
}

TEST(E2E, OraclePipelineScoresOne) {
  auto rep = eval::run_e2e_eval(balanced_set(), eval::oracle_prediction);
  EXPECT_DOUBLE_EQ(rep.micro, 1.0);
  EXPECT_DOUBLE_EQ(rep.macro, 1.0);
  ASSERT_TRUE(rep.bleu1 && rep.bleu4);
  EXPECT_DOUBLE_EQ(*rep.bleu1, 1.0);
  EXPECT_DOUBLE_EQ(*rep.bleu4, 1.0);
  EXPECT_EQ(rep.bleu_pairs, 1);
}

TEST(E2E, ConstantIrrelevantOnBalancedSet) {
  auto rep = eval::run_e2e_eval(balanced_set(), eval::constant_pipeline(Class::Irrelevant));
  EXPECT_DOUBLE_EQ(rep.micro, 0.25);
  EXPECT_DOUBLE_EQ(rep.macro, 0.25);
  EXPECT_FALSE(rep.bleu1);
  auto j = eval::to_json(rep);
  EXPECT_TRUE(j["bleu1"].is_null());
  EXPECT_EQ(j["per_class"]["irrelevant"]["correct"], 1);
  EXPECT_TRUE(j.contains("bleu_convention"));
}

TEST(E2E, BleuOnlyOverInquirePairs) {
  auto ds = balanced_set();
  eval::Pipeline p = [](const eval::DialogExample& e) {
    return eval::Prediction{Class::Inquire, std::string(e.gold_class == Class::Inquire ? "Is the chicken coughing?" : "x")};
  };
  auto rep = eval::run_e2e_eval(ds, p);
  EXPECT_EQ(rep.bleu_pairs, 1);
  Tokens ref = eval::bleu_tokens("Is the chicken coughing today?");
  EXPECT_DOUBLE_EQ(*rep.bleu1, eval::bleu(eval::bleu_tokens("Is the chicken coughing?"), ref, 1));
}

TEST(E2E, ErrorsCarryExampleId) {
  eval::Pipeline p = [](const eval::DialogExample&) -> eval::Prediction {
    throw Error(ErrorCode::PipelineError, "boom");
  };
  try {
    eval::run_e2e_eval(balanced_set(), p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::PipelineError);
    EXPECT_NE(std::string(e.what()).find("ex0"), std::string::npos);
  }
  EXPECT_THROW(eval::run_e2e_eval({}, eval::oracle_prediction), Error);
}

TEST(Dataset, ParsesAndValidates) {
  std::istringstream in(
      R"({"id":"a","rule_text":"r","scenario":"s","question":"q?","follow_ups":[{"q":"Is it?","a":"Yes"}],"gold_class":"yes","gold_question":null})"
      "\n"
      R"({"id":"b","rule_text":"r","scenario":"","question":"q?","follow_ups":[],"gold_class":"inquire","gold_question":"Is it?"})"
      "\n");
  auto ds = eval::read_dataset(in);
  ASSERT_EQ(ds.size(), 2u);
  EXPECT_EQ(ds[0].follow_ups.size(), 1u);
  EXPECT_EQ(ds[1].gold_class, Class::Inquire);
  EXPECT_EQ(eval::example_from_json(eval::to_json(ds[1])).gold_question, ds[1].gold_question);

  std::istringstream bad(R"({"id":"c","question":"q","gold_class":"inquire","gold_question":null})");
  EXPECT_THROW(eval::read_dataset(bad), Error);
  std::istringstream unknown(R"({"id":"d","question":"q","gold_class":"maybe"})");
  EXPECT_THROW(eval::read_dataset(unknown), Error);
}

}  // namespace
