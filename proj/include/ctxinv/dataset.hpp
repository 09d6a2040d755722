#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxinv/errors.hpp"
#include "ctxinv/model.hpp"
#include "ctxinv/pretrain.hpp"

namespace ctxinv {

struct Dataset {
  std::vector<Example> examples;
  std::vector<TokenId> held_out_contexts;  // answers reserved for conflict tests

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }

  std::map<Category, int> category_counts() const {
    std::map<Category, int> counts;
    for (const auto& ex : examples) ++counts[ex.category];
    return counts;
  }

  std::vector<Example> of(Category cat) const {
    std::vector<Example> out;
    std::copy_if(examples.begin(), examples.end(), std::back_inserter(out),
                 [cat](const Example& e) { return e.category == cat; });
    return out;
  }

  operator std::span<const Example>() const { return examples; }
};

struct MixtureCounts {
  int n_C = 32;
  int n_CS = 32;
  int n_S_seen = 0;
  int n_S_unseen = 0;
};

/// Every subject keeps one answer and every (subject, answer) pair appears at
/// most once. CF_AUG examples are exempt.
inline void validate_uniqueness(std::span<const Example> examples) {
  std::map<TokenId, TokenId> answer_of;
  std::set<std::pair<TokenId, TokenId>> pairs;
  for (const auto& ex : examples) {
    if (ex.category == Category::CfAug) continue;
    auto [it, inserted] = answer_of.emplace(ex.subject, ex.label);
    if (!inserted && it->second != ex.label) {
      throw DatasetError("subject " + std::to_string(ex.subject.value) + " paired with two answers");
    }
    if (!pairs.emplace(ex.subject, ex.label).second) {
      throw DatasetError("duplicate subject-answer pair (" + std::to_string(ex.subject.value) + ", " +
                         std::to_string(ex.label.value) + ")");
    }
  }
}

/// No conflict-test context may appear as a training answer or context.
inline void check_conflict_hygiene(std::span<const Example> training, std::span<const Example> tests) {
  std::set<TokenId> used;
  for (const auto& ex : training) {
    used.insert(ex.label);
    if (ex.context) used.insert(*ex.context);
  }
  for (const auto& t : tests) {
    if (t.context && used.count(*t.context)) {
      throw DatasetError("conflict-test context " + std::to_string(t.context->value) +
                         " appears in the training data");
    }
  }
}

namespace detail {

inline std::vector<TokenId> shuffled(std::vector<TokenId> pool, std::mt19937_64& rng) {
  std::shuffle(pool.begin(), pool.end(), rng);
  return pool;
}

inline std::vector<TokenId> take(std::vector<TokenId>& pool, int count, const char* what) {
  if (count < 0) throw DatasetError(std::string("negative count for ") + what);
  if (static_cast<int>(pool.size()) < count) {
    throw DatasetError(std::string("insufficient tokens: need ") + std::to_string(count) + " " + what +
                       ", have " + std::to_string(pool.size()));
  }
  std::vector<TokenId> out(pool.begin(), pool.begin() + count);
  pool.erase(pool.begin(), pool.begin() + count);
  return out;
}

inline std::set<TokenId> tokens_used(std::span<const Example> examples) {
  std::set<TokenId> used;
  for (const auto& ex : examples) {
    used.insert(ex.subject);
    used.insert(ex.label);
    if (ex.context) used.insert(*ex.context);
  }
  return used;
}

/// Answers that are nobody's fact and not yet used.
inline std::vector<TokenId> free_answers(const TokenSpace& space, const FactBase& facts,
                                         const std::set<TokenId>& used) {
  std::vector<TokenId> out;
  for (int j = 0; j < space.num_answers(); ++j) {
    const TokenId a = space.answer(j);
    if (!facts.is_assigned(a) && !used.count(a)) out.push_back(a);
  }
  return out;
}

inline double uniform_answer_mass(const ModelState& state, TokenId subject) {
  const TokenSpace& space = state.space();
  const Vector p = softmax(value_logits(state, subject));
  return p.segment(space.num_subjects(), space.num_answers()).mean();
}

constexpr double kVerifyTol = 1e-9;

inline void verify_category(const ModelState& state, const PretrainParams& params, const Example& ex) {
  const TokenSpace& space = state.space();
  auto fail = [&](const std::string& why) {
    throw DatasetError("category verification failed for " + std::string(to_string(ex.category)) +
                       " example (subject " + std::to_string(ex.subject.value) + "): " + why);
  };
  const Vector ps = softmax(value_logits(state, ex.subject));
  switch (ex.category) {
    case Category::C:
    case Category::CS: {
      const TokenId c = *ex.context;
      const Vector pc = softmax(value_logits(state, c));
      if (std::abs(pc(c.value) - params.delta_C) > kVerifyTol) fail("context mass differs from delta_C");
      if (ex.category == Category::C) {
        const auto answers = ps.segment(space.num_subjects(), space.num_answers());
        if (answers.maxCoeff() - answers.minCoeff() > kVerifyTol) fail("subject is not uniform over answers");
        if (!(pc(c.value) > ps(c.value))) fail("context is not the only predictive feature");
      } else {
        if (!(ps(c.value) > pc(c.value))) fail("subject is not more predictive than context");
        if (!(pc(c.value) > uniform_answer_mass(state, ex.subject) &&
              pc(c.value) > 1.0 / space.num_answers())) {
          fail("context is not predictive");
        }
      }
      break;
    }
    case Category::SSeen:
      if (!(ps(ex.label.value) > params.delta_M - kVerifyTol)) fail("fact is not memorized");
      break;
    case Category::SUnseen:
      if (!(ps(ex.label.value) < params.delta_S)) fail("fact mass is not below delta_S");
      break;
    case Category::ConflictTest:
      if (!(ps(ex.label.value) > params.delta_M - kVerifyTol)) fail("parametric answer is not memorized");
      if (*ex.context == ex.label) fail("context equals the parametric answer");
      break;
    case Category::CfAug:
      break;
  }
}

}  // namespace detail

/// Builds D_C, D_C+S and the subject-only points from a fact base, verifying
/// every example's category against the live state.
inline Dataset make_training_mixture(const ModelState& state, const FactBase& facts, const PretrainParams& params,
                                     const MixtureCounts& counts, std::uint64_t seed) {
  const TokenSpace& space = state.space();
  std::mt19937_64 rng(seed);
  auto memorized = detail::shuffled(facts.memorized_subjects(), rng);
  auto fresh = detail::shuffled(facts.fresh_subjects(), rng);
  const TokenId r = space.relation();

  Dataset out;
  for (TokenId s : detail::take(fresh, counts.n_C, "non-memorized subjects for C points")) {
    const TokenId c = facts.answer(s);
    out.examples.push_back(Example::with_context(c, s, r, c, Category::C));
  }
  for (TokenId s : detail::take(memorized, counts.n_CS, "memorized subjects for C+S points")) {
    const TokenId c = facts.answer(s);
    out.examples.push_back(Example::with_context(c, s, r, c, Category::CS));
  }
  for (TokenId s : detail::take(memorized, counts.n_S_seen, "memorized subjects for seen S points")) {
    out.examples.push_back(Example::fact(s, r, facts.answer(s), Category::SSeen));
  }
  for (TokenId s : detail::take(fresh, counts.n_S_unseen, "non-memorized subjects for unseen S points")) {
    out.examples.push_back(Example::fact(s, r, facts.answer(s), Category::SUnseen));
  }
  validate_uniqueness(out.examples);
  for (const auto& ex : out.examples) detail::verify_category(state, params, ex);
  out.held_out_contexts = detail::free_answers(space, facts, detail::tokens_used(out.examples));
  return out;
}

/// Pairs memorized subjects absent from `training` with held-out contexts c != a.
/// Each example's label is the parametric answer a.
inline std::vector<Example> make_conflict_testset(const ModelState& state, const FactBase& facts,
                                                  const PretrainParams& params, const Dataset& training,
                                                  int count, std::uint64_t seed) {
  if (count == 0) return {};
  check_conflict_hygiene(training.examples,
                         [&] {
                           std::vector<Example> probe;
                           for (TokenId c : training.held_out_contexts)
                             probe.push_back(Example::with_context(c, TokenId{0}, TokenId{0}, c,
                                                                   Category::ConflictTest));
                           return probe;
                         }());
  const TokenSpace& space = state.space();
  const auto used = detail::tokens_used(training.examples);
  std::vector<TokenId> subjects;
  for (TokenId s : facts.memorized_subjects())
    if (!used.count(s)) subjects.push_back(s);

  std::mt19937_64 rng(seed);
  subjects = detail::shuffled(std::move(subjects), rng);
  auto contexts = detail::shuffled(training.held_out_contexts, rng);
  const auto chosen_subjects = detail::take(subjects, count, "unused memorized subjects for conflict tests");
  const auto chosen_contexts = detail::take(contexts, count, "held-out contexts for conflict tests");

  std::vector<Example> tests;
  for (int i = 0; i < count; ++i) {
    const TokenId s = chosen_subjects[i];
    tests.push_back(Example::with_context(chosen_contexts[i], s, space.relation(), facts.answer(s),
                                          Category::ConflictTest));
  }
  for (const auto& t : tests) detail::verify_category(state, params, t);
  check_conflict_hygiene(training.examples, tests);
  return tests;
}

/// Counterfactual training points [c', s_m, r] -> c' where s_m memorized a
/// different answer. Subjects and contexts avoid every token used in `avoid`.
inline std::vector<Example> make_cf_augmentation(const ModelState& state, const FactBase& facts, int count,
                                                 std::uint64_t seed, std::span<const Example> avoid) {
  if (count == 0) return {};
  const TokenSpace& space = state.space();
  const auto used = detail::tokens_used(avoid);
  std::vector<TokenId> subjects;
  for (TokenId s : facts.memorized_subjects())
    if (!used.count(s)) subjects.push_back(s);

  std::mt19937_64 rng(seed);
  subjects = detail::shuffled(std::move(subjects), rng);
  auto contexts = detail::shuffled(detail::free_answers(space, facts, used), rng);
  const auto chosen_subjects = detail::take(subjects, count, "memorized subjects for augmentation");
  const auto chosen_contexts = detail::take(contexts, count, "free contexts for augmentation");

  std::vector<Example> out;
  for (int i = 0; i < count; ++i) {
    const TokenId c = chosen_contexts[i];
    out.push_back(Example::with_context(c, chosen_subjects[i], space.relation(), c, Category::CfAug));
  }
  return out;
}

/// Context-ablated score: loss of the label given only [s, r].
inline double no_context_loss(const ModelState& state, const Example& ex) {
  return example_loss(state, Example::fact(ex.subject, ex.relation, ex.label, ex.category));
}

/// Drops the round((1 - keep_fraction) * n) examples with the lowest
/// context-ablated loss. Ties go to the earlier example; both partitions keep
/// the original order.
inline std::pair<Dataset, Dataset> perplexity_filter(const ModelState& state, const Dataset& data,
                                                     double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) throw Error("keep_fraction must be in (0, 1]");
  const std::size_t n = data.size();
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!data.examples[i].has_context()) throw DatasetError("perplexity filter expects 3-token examples");
    score[i] = no_context_loss(state, data.examples[i]);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  const auto n_remove = static_cast<std::size_t>(std::lround((1.0 - keep_fraction) * static_cast<double>(n)));
  std::vector<bool> removed(n, false);
  for (std::size_t k = 0; k < n_remove; ++k) removed[order[k]] = true;

  Dataset kept, dropped;
  kept.held_out_contexts = dropped.held_out_contexts = data.held_out_contexts;
  for (std::size_t i = 0; i < n; ++i) (removed[i] ? dropped : kept).examples.push_back(data.examples[i]);
  return {std::move(kept), std::move(dropped)};
}

// Line-delimited records: {"category": "C", "tokens": [c, s, r], "label": a}

inline void write_examples_jsonl(std::ostream& os, std::span<const Example> examples) {
  for (const auto& ex : examples) {
    nlohmann::json rec;
    rec["category"] = std::string(to_string(ex.category));
    std::vector<int> ids;
    for (TokenId t : ex.tokens()) ids.push_back(t.value);
    rec["tokens"] = ids;
    rec["label"] = ex.label.value;
    os << rec.dump() << '\n';
  }
}

inline std::vector<Example> read_examples_jsonl(std::istream& is) {
  std::vector<Example> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      const auto cat = parse_category(rec.at("category").get<std::string>());
      if (!cat) throw DatasetError("unknown category");
      const auto ids = rec.at("tokens").get<std::vector<int>>();
      const TokenId label{rec.at("label").get<int>()};
      if (ids.size() == 3) {
        out.push_back(Example::with_context(TokenId{ids[0]}, TokenId{ids[1]}, TokenId{ids[2]}, label, *cat));
      } else if (ids.size() == 2) {
        out.push_back(Example::fact(TokenId{ids[0]}, TokenId{ids[1]}, label, *cat));
      } else {
        throw DatasetError("record must hold 2 or 3 tokens");
      }
    } catch (const nlohmann::json::exception& e) {
      throw DatasetError("dataset line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DatasetError& e) {
      throw DatasetError("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ctxinv
