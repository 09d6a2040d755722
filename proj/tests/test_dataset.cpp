#include <gtest/gtest.h>

#include <set>
#include <sstream>
#include <vector>

#include "common.hpp"

using namespace ctxinv;
using ctxinv::testing::default_lab;

TEST(Dataset, DefaultMixtureShape) {
  const auto& lab = default_lab();
  const auto counts = lab.mixture.category_counts();
  EXPECT_EQ(counts.at(Category::C), 32);
  EXPECT_EQ(counts.at(Category::CS), 32);
  EXPECT_EQ(lab.mixture.size(), 64u);
  EXPECT_NO_THROW(validate_uniqueness(lab.mixture.examples));
  for (const auto& ex : lab.mixture.examples) {
    ASSERT_TRUE(ex.context);
    EXPECT_EQ(*ex.context, ex.label);
    EXPECT_EQ(lab.facts.is_memorized(ex.subject), ex.category == Category::CS);
  }
  // held-out contexts are unassigned answers untouched by the mixture
  for (TokenId c : lab.mixture.held_out_contexts) {
    EXPECT_FALSE(lab.facts.is_assigned(c));
    EXPECT_TRUE(lab.space->is_answer(c));
  }
}

TEST(Dataset, SubjectOnlyPoints) {
  LabConfig cfg;
  cfg.counts.n_S_seen = 4;
  cfg.counts.n_S_unseen = 3;
  const Lab lab = build_lab(cfg);
  const auto counts = lab.mixture.category_counts();
  EXPECT_EQ(counts.at(Category::SSeen), 4);
  EXPECT_EQ(counts.at(Category::SUnseen), 3);
  for (const auto& ex : lab.mixture.of(Category::SSeen)) {
    EXPECT_FALSE(ex.context);
    EXPECT_NEAR(subject_predictiveness(lab.state, ex.subject, ex.label), cfg.params.delta_M, 1e-10);
  }
  for (const auto& ex : lab.mixture.of(Category::SUnseen)) {
    EXPECT_LT(subject_predictiveness(lab.state, ex.subject, ex.label), cfg.params.delta_S);
  }
}

TEST(Dataset, VerificationAgainstLiveState) {
  const auto& lab = default_lab();
  PretrainParams wrong = lab.params;
  wrong.delta_C = 0.2;  // the state was built with 0.1
  EXPECT_THROW(make_training_mixture(lab.state, lab.facts, wrong, MixtureCounts{}, 1), DatasetError);

  // unseen S points must stay below delta_S
  PretrainParams strict = lab.params;
  strict.delta_S = 1e-4;
  MixtureCounts counts;
  counts.n_S_unseen = 1;
  EXPECT_THROW(make_training_mixture(lab.state, lab.facts, strict, counts, 1), DatasetError);
}

TEST(Dataset, InsufficientTokens) {
  const auto& lab = default_lab();
  MixtureCounts counts;
  counts.n_C = 1000;
  try {
    make_training_mixture(lab.state, lab.facts, lab.params, counts, 1);
    FAIL();
  } catch (const DatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("insufficient"), std::string::npos);
  }
}

TEST(Dataset, UniquenessRules) {
  const auto space = TokenSpace::build(3, 4, 10);
  const TokenId r = space.relation();
  const auto a = Example::with_context(space.answer(0), space.subject(0), r, space.answer(0), Category::C);
  const auto dup = Example::with_context(space.answer(1), space.subject(0), r, space.answer(0), Category::C);
  const auto clash = Example::with_context(space.answer(1), space.subject(0), r, space.answer(1), Category::C);
  EXPECT_THROW(validate_uniqueness(std::vector<Example>{a, dup}), DatasetError);
  EXPECT_THROW(validate_uniqueness(std::vector<Example>{a, clash}), DatasetError);
  auto aug = clash;
  aug.category = Category::CfAug;
  EXPECT_NO_THROW(validate_uniqueness(std::vector<Example>{a, aug}));
}

TEST(Dataset, ConflictTests) {
  const auto& lab = default_lab();
  ASSERT_EQ(lab.testset.size(), 16u);
  std::set<TokenId> contexts;
  for (const auto& t : lab.testset) {
    EXPECT_EQ(t.category, Category::ConflictTest);
    EXPECT_NE(*t.context, t.label);
    EXPECT_EQ(lab.facts.answer(t.subject), t.label);
    EXPECT_GE(subject_predictiveness(lab.state, t.subject, t.label), lab.params.delta_M - 1e-9);
    EXPECT_TRUE(contexts.insert(*t.context).second);
  }
  EXPECT_NO_THROW(check_conflict_hygiene(lab.mixture.examples, lab.testset));

  // a test context that is also a training answer is rejected
  auto leaky = lab.testset;
  leaky[0].context = lab.mixture.examples[0].label;
  EXPECT_THROW(check_conflict_hygiene(lab.mixture.examples, leaky), DatasetError);

  Dataset tampered = lab.mixture;
  tampered.held_out_contexts.push_back(lab.mixture.examples[3].label);
  EXPECT_THROW(make_conflict_testset(lab.state, lab.facts, lab.params, tampered, 4, 9), DatasetError);
}

TEST(Dataset, Augmentation) {
  const auto& lab = default_lab();
  ASSERT_EQ(lab.augmentation.size(), 8u);  // 25% of 32
  std::vector<Example> training = lab.mixture.examples;
  training.insert(training.end(), lab.augmentation.begin(), lab.augmentation.end());
  EXPECT_NO_THROW(check_conflict_hygiene(training, lab.testset));
  for (const auto& ex : lab.augmentation) {
    EXPECT_EQ(ex.category, Category::CfAug);
    EXPECT_TRUE(lab.facts.is_memorized(ex.subject));
    EXPECT_NE(lab.facts.answer(ex.subject), ex.label);
    EXPECT_EQ(*ex.context, ex.label);
  }
}

TEST(Dataset, FilterRecoversPartition) {
  const auto& lab = default_lab();
  const auto [kept, dropped] = perplexity_filter(lab.state, lab.mixture, 0.5);
  ASSERT_EQ(kept.size(), 32u);
  ASSERT_EQ(dropped.size(), 32u);
  for (const auto& ex : kept.examples) EXPECT_EQ(ex.category, Category::C);
  for (const auto& ex : dropped.examples) EXPECT_EQ(ex.category, Category::CS);

  const auto [all, none] = perplexity_filter(lab.state, lab.mixture, 1.0);
  EXPECT_EQ(all.examples, lab.mixture.examples);
  EXPECT_TRUE(none.empty());
  EXPECT_THROW(perplexity_filter(lab.state, lab.mixture, 0.0), Error);
}

TEST(Dataset, Deterministic) {
  const Lab a = build_lab(LabConfig{});
  const Lab b = build_lab(LabConfig{});
  EXPECT_EQ(a.mixture.examples, b.mixture.examples);
  EXPECT_EQ(a.testset, b.testset);
  LabConfig other;
  other.seed = 5;
  EXPECT_NE(build_lab(other).mixture.examples, a.mixture.examples);
}

TEST(Dataset, JsonlRoundTrip) {
  const auto& lab = default_lab();
  std::vector<Example> all = lab.mixture.examples;
  all.insert(all.end(), lab.spare_s_points.begin(), lab.spare_s_points.end());
  all.insert(all.end(), lab.testset.begin(), lab.testset.end());
  std::stringstream ss;
  write_examples_jsonl(ss, all);
  EXPECT_EQ(read_examples_jsonl(ss), all);

  std::istringstream bad(R"({"category": "C", "tokens": [1], "label": 2})");
  EXPECT_THROW(read_examples_jsonl(bad), DatasetError);
  std::istringstream unknown(R"({"category": "X", "tokens": [1, 2], "label": 2})");
  EXPECT_THROW(read_examples_jsonl(unknown), DatasetError);
}
