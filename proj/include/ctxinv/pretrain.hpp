#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "ctxinv/errors.hpp"
#include "ctxinv/model.hpp"
#include "ctxinv/token_space.hpp"

namespace ctxinv {

/// Scalar knobs that define the synthesized pretrained state.
struct PretrainParams {
  double delta_C = 0.10;  // softmax mass a context's value embedding puts on itself
  double delta_M = 0.50;  // softmax mass a memorized subject puts on its answer
  double o_c = 0.1;       // baseline answer-token inner product
  double o_r = 0.05;      // relation-token inner product
  double delta_S = 0.01;  // unseen-fact threshold for subject-only points
  int num_subjects = 112;
  int num_answers = 160;
  int dim = 275;
  int n = 64;  // finetuning set size used by the closed forms

  /// Throws ParamError naming the first violated inequality.
  void validate() const {
    auto fail = [](const std::string& what) { throw ParamError("parameter constraint violated: " + what); };
    auto in_unit = [](double x) { return x > 0.0 && x < 1.0; };
    if (num_subjects < 1) fail("K_S >= 1");
    if (num_answers < 2) fail("K_A >= 2");
    if (dim < num_subjects + num_answers + 3) fail("d >= K_S + K_A + 3");
    if (!in_unit(delta_C)) fail("0 < delta_C < 1");
    if (!in_unit(delta_M)) fail("0 < delta_M < 1");
    if (!in_unit(delta_S)) fail("0 < delta_S < 1");
    if (!(delta_C > 3.0 / (num_answers - 1))) fail("delta_C > 3/(K_A - 1)");
    if (!(delta_M > 2.0 * delta_C)) fail("delta_M > 2*delta_C");
    if (!(o_c > 0.0)) fail("o_c > 0");
    if (!(o_r > 0.0)) fail("o_r > 0");
    if (!(o_r <= o_c)) fail("o_r <= o_c");
  }
};

/// Which answer each subject is paired with, and which of those facts the
/// pretrained model memorized. Subject i is paired with answer i, so answers
/// K_S .. K_A-1 are never the fact of any subject.
struct FactBase {
  std::vector<TokenId> answer_of;  // indexed by subject id
  std::vector<bool> memorized;     // indexed by subject id

  TokenId answer(TokenId subject) const { return answer_of.at(subject.value); }
  bool is_memorized(TokenId subject) const { return memorized.at(subject.value); }

  std::vector<TokenId> memorized_subjects() const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < memorized.size(); ++i)
      if (memorized[i]) out.push_back(TokenId{static_cast<int>(i)});
    return out;
  }
  std::vector<TokenId> fresh_subjects() const {
    std::vector<TokenId> out;
    for (std::size_t i = 0; i < memorized.size(); ++i)
      if (!memorized[i]) out.push_back(TokenId{static_cast<int>(i)});
    return out;
  }
  bool is_assigned(TokenId answer) const {
    return std::find(answer_of.begin(), answer_of.end(), answer) != answer_of.end();
  }
};

/// Pairs subject i with answer i and memorizes a seeded random subset of
/// `num_memorized` subjects.
inline FactBase make_fact_base(const TokenSpace& space, int num_memorized, std::uint64_t seed) {
  if (space.num_answers() < space.num_subjects()) {
    throw DatasetError("need K_A >= K_S to pair every subject with a unique answer");
  }
  if (num_memorized < 0 || num_memorized > space.num_subjects()) {
    throw DatasetError("cannot memorize " + std::to_string(num_memorized) + " of " +
                       std::to_string(space.num_subjects()) + " subjects");
  }
  FactBase facts;
  facts.answer_of.reserve(space.num_subjects());
  for (int i = 0; i < space.num_subjects(); ++i) facts.answer_of.push_back(space.answer(i));
  std::vector<int> order(space.num_subjects());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  facts.memorized.assign(space.num_subjects(), false);
  for (int k = 0; k < num_memorized; ++k) facts.memorized[order[k]] = true;
  return facts;
}

/// Target inner products v_0(t, x) = phi(t)^T W_V phi(x) for every token pair.
struct ValueTable {
  Matrix values;  // K x K, row = output token t, column = input token x
  double v_context_self = 0.0;     // v_0(c, c)
  double v_memorized_answer = 0.0;  // v_0(a, s) for a memorized subject s
};

/// log((K_A - 1) e^{o_c} + e^{o_r} + K_S): the softmax mass outside the
/// favoured answer, shared by every value embedding in the table.
inline double value_table_log_normalizer(const PretrainParams& p) {
  return std::log((p.num_answers - 1) * std::exp(p.o_c) + std::exp(p.o_r) + p.num_subjects);
}

/// Builds the value table of the pretrained model:
///   v_0(c', x) = o_c for answers c' other than x's favoured answer,
///   v_0(r, x)  = o_r, v_0(s', x) = 0 for every subject s',
///   v_0(c, c)  chosen so softmax(v_0(c))_c = delta_C,
///   v_0(a, s)  chosen so softmax(v_0(s))_a = delta_M for memorized (s, a).
/// Non-memorized subjects and the relation token spread uniform mass over answers.
inline ValueTable build_value_table(const PretrainParams& params, const FactBase& facts) {
  params.validate();
  const int ks = params.num_subjects;
  const int ka = params.num_answers;
  const int k = ks + ka + 1;
  if (static_cast<int>(facts.answer_of.size()) != ks || static_cast<int>(facts.memorized.size()) != ks) {
    throw ShapeError("fact base does not cover every subject");
  }
  std::set<int> seen;
  for (TokenId a : facts.answer_of) {
    if (a.value < ks || a.value >= ks + ka) throw DatasetError("subject paired with a non-answer token");
    if (!seen.insert(a.value).second) {
      throw DatasetError("subject-answer assignment is not injective (answer " + std::to_string(a.value) +
                         " used twice)");
    }
  }

  const double log_norm = value_table_log_normalizer(params);
  ValueTable table;
  table.v_context_self = std::log(params.delta_C / (1.0 - params.delta_C)) + log_norm;
  table.v_memorized_answer = std::log(params.delta_M / (1.0 - params.delta_M)) + log_norm;

  Matrix& v = table.values;
  v = Matrix::Zero(k, k);
  v.block(ks, 0, ka, k).setConstant(params.o_c);
  v.row(ks + ka).setConstant(params.o_r);
  for (int j = 0; j < ka; ++j) v(ks + j, ks + j) = table.v_context_self;
  for (int i = 0; i < ks; ++i) {
    if (facts.memorized[i]) v(facts.answer_of[i].value, i) = table.v_memorized_answer;
  }
  return table;
}

/// Minimum-norm W_V with Phi^T W_V Phi = V, i.e. W_V = (Phi^+)^T V Phi^+.
inline Matrix solve_wv(const TokenSpace& space, const Matrix& target, double tolerance = 1e-9) {
  const Matrix& phi = space.embeddings();
  if (target.rows() != phi.cols() || target.cols() != phi.cols()) {
    throw ShapeError("value table must be K x K with K = " + std::to_string(phi.cols()));
  }
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(phi);
  if (cod.rank() != phi.cols()) throw SolveError("token embedding matrix is rank deficient");
  const Matrix pinv = cod.pseudoInverse();
  Matrix wv = pinv.transpose() * target * pinv;
  const double residual = (phi.transpose() * wv * phi - target).cwiseAbs().maxCoeff();
  if (!(residual < tolerance)) {
    throw SolveError("value solve residual " + std::to_string(residual) + " exceeds tolerance");
  }
  return wv;
}

inline Matrix solve_wv(const TokenSpace& space, const ValueTable& table) {
  return solve_wv(space, table.values);
}

/// Pretrained state: W_KQ = 0 (equal pre-softmax attention) and W_V realizing
/// the value table.
inline ModelState build_initial_state(TokenSpacePtr space, const PretrainParams& params,
                                      const FactBase& facts) {
  if (space->num_subjects() != params.num_subjects || space->num_answers() != params.num_answers ||
      space->dim() != params.dim) {
    throw ShapeError("token space does not match pretrain parameters");
  }
  const ValueTable table = build_value_table(params, facts);
  ModelState state = ModelState::zeros(space);
  state.wv = solve_wv(*space, table);
  return state;
}

inline bool memorization_check(const ModelState& state, TokenId subject, TokenId answer, double threshold) {
  return subject_predictiveness(state, subject, answer) > threshold;
}

}  // namespace ctxinv
