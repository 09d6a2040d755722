#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ctxinv/dataset.hpp"
#include "ctxinv/model.hpp"
#include "ctxinv/pretrain.hpp"
#include "ctxinv/token_space.hpp"

namespace ctxinv {

struct LabConfig {
  PretrainParams params;
  MixtureCounts counts;
  int n_test = 16;
  double aug_ratio = 0.25;  // augmentation examples as a fraction of n_CS
  int n_spare = 1;          // memorized subjects held back for subject-only probes
  std::uint64_t seed = 0;

  int augmentation_count() const { return static_cast<int>(std::lround(aug_ratio * counts.n_CS)); }
};

/// Everything an experiment needs, built deterministically from one seed.
struct Lab {
  PretrainParams params;
  TokenSpacePtr space;
  FactBase facts;
  ModelState state;
  Dataset mixture;
  std::vector<Example> testset;
  std::vector<Example> augmentation;
  std::vector<Example> spare_s_points;  // memorized [s, r] facts unused elsewhere
};

inline Lab build_lab(const LabConfig& cfg) {
  cfg.params.validate();
  if (cfg.n_test < 0 || cfg.n_spare < 0 || !(cfg.aug_ratio >= 0.0)) {
    throw DatasetError("counts must be non-negative");
  }
  Lab lab;
  lab.params = cfg.params;
  lab.space = make_token_space(cfg.params.num_subjects, cfg.params.num_answers, cfg.params.dim);
  const int n_aug = cfg.augmentation_count();
  // one memorized subject per role that needs one, and no more
  const int n_memorized = cfg.counts.n_CS + cfg.counts.n_S_seen + cfg.n_test + n_aug + cfg.n_spare;
  lab.facts = make_fact_base(*lab.space, n_memorized, cfg.seed);
  lab.state = build_initial_state(lab.space, cfg.params, lab.facts);
  lab.mixture = make_training_mixture(lab.state, lab.facts, cfg.params, cfg.counts, cfg.seed + 1);
  lab.testset = make_conflict_testset(lab.state, lab.facts, cfg.params, lab.mixture, cfg.n_test, cfg.seed + 2);

  std::vector<Example> used = lab.mixture.examples;
  used.insert(used.end(), lab.testset.begin(), lab.testset.end());
  lab.augmentation = make_cf_augmentation(lab.state, lab.facts, n_aug, cfg.seed + 3, used);
  used.insert(used.end(), lab.augmentation.begin(), lab.augmentation.end());

  const auto taken = detail::tokens_used(used);
  for (TokenId s : lab.facts.memorized_subjects()) {
    if (static_cast<int>(lab.spare_s_points.size()) == cfg.n_spare) break;
    if (!taken.count(s)) {
      lab.spare_s_points.push_back(Example::fact(s, lab.space->relation(), lab.facts.answer(s), Category::SSeen));
    }
  }
  if (static_cast<int>(lab.spare_s_points.size()) < cfg.n_spare) throw DatasetError("no spare memorized subjects");
  for (const auto& ex : lab.spare_s_points) detail::verify_category(lab.state, cfg.params, ex);
  return lab;
}

}  // namespace ctxinv
