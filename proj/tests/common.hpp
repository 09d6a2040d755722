#pragma once

#include <random>
#include <vector>

#include "ctxinv/ctxinv.hpp"

namespace ctxinv::testing {

/// Small random model: every entry of W_KQ and W_V drawn from N(0, scale^2).
inline ModelState random_state(TokenSpacePtr space, std::mt19937_64& rng, double scale = 0.5) {
  std::normal_distribution<double> normal(0.0, scale);
  ModelState s = ModelState::zeros(space);
  for (Eigen::Index i = 0; i < s.wkq.size(); ++i) s.wkq.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < s.wv.size(); ++i) s.wv.data()[i] = normal(rng);
  return s;
}

inline Example random_example(const TokenSpace& space, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> subj(0, space.num_subjects() - 1);
  std::uniform_int_distribution<int> ans(0, space.num_answers() - 1);
  std::uniform_int_distribution<int> label(0, space.num_tokens() - 1);
  std::bernoulli_distribution has_context(0.6);
  const TokenId s = space.subject(subj(rng));
  if (has_context(rng)) {
    return Example::with_context(space.answer(ans(rng)), s, space.relation(), TokenId{label(rng)}, Category::C);
  }
  return Example::fact(s, space.relation(), TokenId{label(rng)}, Category::SSeen);
}

/// The default lab shared by the heavier tests; built once per binary.
inline const Lab& default_lab() {
  static const Lab lab = build_lab(LabConfig{});
  return lab;
}

}  // namespace ctxinv::testing
