#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctxinv/errors.hpp"
#include "ctxinv/token_space.hpp"

namespace ctxinv {

enum class Category { C, CS, SSeen, SUnseen, ConflictTest, CfAug };

inline std::string_view to_string(Category c) {
  switch (c) {
    case Category::C:
      return "C";
    case Category::CS:
      return "C+S";
    case Category::SSeen:
      return "S_seen";
    case Category::SUnseen:
      return "S_unseen";
    case Category::ConflictTest:
      return "CONFLICT_TEST";
    case Category::CfAug:
      return "CF_AUG";
  }
  return "?";
}

inline std::optional<Category> parse_category(std::string_view s) {
  for (Category c : {Category::C, Category::CS, Category::SSeen, Category::SUnseen,
                     Category::ConflictTest, Category::CfAug}) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

/// A labeled input: either [c, s, r] or [s, r], predicting `label` after r.
struct Example {
  std::optional<TokenId> context;
  TokenId subject;
  TokenId relation;
  TokenId label;
  Category category = Category::C;

  static Example with_context(TokenId c, TokenId s, TokenId r, TokenId label, Category cat) {
    return Example{c, s, r, label, cat};
  }
  static Example fact(TokenId s, TokenId r, TokenId label, Category cat) {
    return Example{std::nullopt, s, r, label, cat};
  }

  bool has_context() const { return context.has_value(); }

  std::vector<TokenId> tokens() const {
    if (context) return {*context, subject, relation};
    return {subject, relation};
  }

  bool operator==(const Example&) const = default;
};

/// Trainable weights of the one-layer, single-head model plus its frozen head.
struct ModelState {
  Matrix wkq;
  Matrix wv;
  TokenSpacePtr head;
  int timestep = 0;

  static ModelState zeros(TokenSpacePtr space) {
    const int d = space->dim();
    return ModelState{Matrix::Zero(d, d), Matrix::Zero(d, d), std::move(space), 0};
  }

  const TokenSpace& space() const { return *head; }
};

enum class Reduction { Mean, Sum };

/// Attention of the relation (query) token over the keys of one input.
/// For 3-token inputs the relation key is masked and `relation` is exactly 0.
struct AttentionWeights {
  double context = 0.0;
  double subject = 0.0;
  double relation = 0.0;
};

namespace detail {

inline void check_example(const TokenSpace& space, const Example& ex) {
  auto bad = [](std::string_view what) { throw ShapeError(std::string("invalid example: ") + std::string(what)); };
  if (ex.context && !space.is_answer(*ex.context)) bad("context is not an answer token");
  if (!space.is_subject(ex.subject)) bad("subject is not a subject token");
  if (ex.relation != space.relation()) bad("relation slot does not hold the relation token");
  if (!space.contains(ex.label)) bad("label out of range");
}

/// The two unmasked keys: {c, s} for [c, s, r], {s, r} for [s, r].
inline std::array<TokenId, 2> active_keys(const Example& ex) {
  if (ex.context) return {*ex.context, ex.subject};
  return {ex.subject, ex.relation};
}

inline Vector softmax(const Vector& z) {
  const double mx = z.maxCoeff();
  Vector e = (z.array() - mx).exp().matrix();
  return e / e.sum();
}

inline double log_softmax_at(const Vector& z, int index) {
  const double mx = z.maxCoeff();
  return z(index) - mx - std::log((z.array() - mx).exp().sum());
}

/// Everything the loss and both gradients need for one example.
struct Forward {
  std::array<TokenId, 2> keys;
  std::array<double, 2> sigma;
  Vector xbar;    // attention-weighted key embedding
  Vector logits;  // z = W_H^T W_V xbar
  Vector probs;
  double loss = 0.0;
};

inline Forward forward(const ModelState& state, const Example& ex) {
  const TokenSpace& space = state.space();
  check_example(space, ex);
  const Matrix& phi = space.embeddings();
  Forward f;
  f.keys = active_keys(ex);
  const Vector query = state.wkq * phi.col(space.relation().value);
  const double s0 = phi.col(f.keys[0].value).dot(query);
  const double s1 = phi.col(f.keys[1].value).dot(query);
  // two-key softmax written as a logistic for stability
  f.sigma[0] = 1.0 / (1.0 + std::exp(s1 - s0));
  f.sigma[1] = 1.0 / (1.0 + std::exp(s0 - s1));
  f.xbar = f.sigma[0] * phi.col(f.keys[0].value) + f.sigma[1] * phi.col(f.keys[1].value);
  f.logits = phi.transpose() * (state.wv * f.xbar);
  f.probs = softmax(f.logits);
  f.loss = -log_softmax_at(f.logits, ex.label.value);
  return f;
}

inline void require_nonempty(std::span<const Example> data, std::string_view what) {
  if (data.empty()) throw Error(std::string(what) + ": empty dataset");
}

}  // namespace detail

inline AttentionWeights attention_weights(const ModelState& state, const Example& ex) {
  const auto f = detail::forward(state, ex);
  if (ex.context) return {f.sigma[0], f.sigma[1], 0.0};
  return {0.0, f.sigma[0], f.sigma[1]};
}

/// Logits over all K tokens at the relation position.
inline Vector forward_last_token(const ModelState& state, const Example& ex) {
  return detail::forward(state, ex).logits;
}

/// v(t) = W_H^T W_V phi(t): the logits a single token's value embedding votes for.
inline Vector value_logits(const ModelState& state, TokenId t) {
  const Matrix& phi = state.space().embeddings();
  return phi.transpose() * (state.wv * phi.col(t.value));
}

/// softmax(W_H^T W_V phi(s))_answer.
inline double subject_predictiveness(const ModelState& state, TokenId subject, TokenId answer) {
  return detail::softmax(value_logits(state, subject))(answer.value);
}

inline double example_loss(const ModelState& state, const Example& ex) {
  return detail::forward(state, ex).loss;
}

inline double nll_loss(const ModelState& state, std::span<const Example> data) {
  detail::require_nonempty(data, "nll_loss");
  double total = 0.0;
  for (const auto& ex : data) total += detail::forward(state, ex).loss;
  return total / static_cast<double>(data.size());
}

/// Negative gradient of one example's loss w.r.t. W_KQ:
///   phi(X) [diag(sigma) - sigma sigma^T] phi(X)^T W_V^T W_H (e_a - softmax(z)) phi(r)^T
/// over the unmasked keys X.
inline Matrix grad_wkq(const ModelState& state, const Example& ex) {
  const TokenSpace& space = state.space();
  const Matrix& phi = space.embeddings();
  const auto f = detail::forward(state, ex);

  Vector residual = -f.probs;
  residual(ex.label.value) += 1.0;
  const Vector back = state.wv.transpose() * (phi * residual);

  Eigen::Matrix<double, Eigen::Dynamic, 2> keys(space.dim(), 2);
  keys.col(0) = phi.col(f.keys[0].value);
  keys.col(1) = phi.col(f.keys[1].value);
  const Eigen::Vector2d sigma(f.sigma[0], f.sigma[1]);
  const Eigen::Matrix2d jacobian = Eigen::Matrix2d(sigma.asDiagonal()) - sigma * sigma.transpose();
  const Eigen::Vector2d key_values = keys.transpose() * back;

  const Vector left = keys * (jacobian * key_values);
  return left * phi.col(space.relation().value).transpose();
}

inline Matrix grad_wkq(const ModelState& state, std::span<const Example> data,
                       Reduction reduction = Reduction::Mean) {
  detail::require_nonempty(data, "grad_wkq");
  Matrix g = Matrix::Zero(state.wkq.rows(), state.wkq.cols());
  for (const auto& ex : data) g += grad_wkq(state, ex);
  if (reduction == Reduction::Mean) g /= static_cast<double>(data.size());
  return g;
}

/// Negative gradient of the loss w.r.t. W_V:
///   W_H (e_a - softmax(z)) [sum_y sigma_y phi(y)]^T, averaged (or summed) over examples.
inline Matrix grad_wv(const ModelState& state, std::span<const Example> data,
                      Reduction reduction = Reduction::Mean) {
  detail::require_nonempty(data, "grad_wv");
  const Matrix& phi = state.space().embeddings();
  Matrix g = Matrix::Zero(state.wv.rows(), state.wv.cols());
  for (const auto& ex : data) {
    const auto f = detail::forward(state, ex);
    Vector residual = -f.probs;
    residual(ex.label.value) += 1.0;
    g.noalias() += (phi * residual) * f.xbar.transpose();
  }
  if (reduction == Reduction::Mean) g /= static_cast<double>(data.size());
  return g;
}

enum class WeightKind { KQ, V };

/// Central-difference estimate of grad f at `at`, entry by entry.
template <class Loss>
Matrix central_difference(const Matrix& at, Loss&& loss, double step) {
  if (!(step > 0.0)) throw Error("finite difference step must be positive");
  Matrix grad(at.rows(), at.cols());
  Matrix probe = at;
  for (Eigen::Index j = 0; j < at.cols(); ++j) {
    for (Eigen::Index i = 0; i < at.rows(); ++i) {
      const double orig = probe(i, j);
      probe(i, j) = orig + step;
      const double up = loss(static_cast<const Matrix&>(probe));
      probe(i, j) = orig - step;
      const double down = loss(static_cast<const Matrix&>(probe));
      probe(i, j) = orig;
      grad(i, j) = (up - down) / (2.0 * step);
    }
  }
  return grad;
}

/// Finite-difference estimate of the negative loss gradient w.r.t. W_KQ or W_V.
inline Matrix finite_diff_grad(const ModelState& state, std::span<const Example> data,
                               WeightKind which, double step) {
  ModelState probe = state;
  auto loss = [&](const Matrix& w) {
    (which == WeightKind::KQ ? probe.wkq : probe.wv) = w;
    return nll_loss(probe, data);
  };
  const Matrix& at = which == WeightKind::KQ ? state.wkq : state.wv;
  return -central_difference(at, loss, step);
}

/// Same estimate restricted to selected entries; other entries are left at 0.
inline Matrix finite_diff_grad(const ModelState& state, std::span<const Example> data,
                               WeightKind which, double step,
                               std::span<const std::pair<int, int>> entries) {
  if (!(step > 0.0)) throw Error("finite difference step must be positive");
  ModelState probe = state;
  Matrix& w = which == WeightKind::KQ ? probe.wkq : probe.wv;
  Matrix out = Matrix::Zero(w.rows(), w.cols());
  for (auto [i, j] : entries) {
    const double orig = w(i, j);
    w(i, j) = orig + step;
    const double up = nll_loss(probe, data);
    w(i, j) = orig - step;
    const double down = nll_loss(probe, data);
    w(i, j) = orig;
    out(i, j) = -(up - down) / (2.0 * step);
  }
  return out;
}

/// Entrywise relative error; entries smaller than `floor` in magnitude are
/// compared on an absolute scale of `floor`.
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-3) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("relative error shape mismatch");
  double worst = 0.0;
  for (Eigen::Index j = 0; j < a.cols(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      const double scale = std::max({std::abs(a(i, j)), std::abs(b(i, j)), floor});
      worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / scale);
    }
  }
  return worst;
}

inline bool all_finite(const ModelState& state) {
  return state.wkq.allFinite() && state.wv.allFinite();
}

}  // namespace ctxinv
