#pragma once

#include <cmath>
#include <cstdio>
#include <compare>
#include <memory>
#include <ostream>
#include <string>
#include <string_view>

#include <Eigen/Dense>

#include "ctxinv/errors.hpp"

namespace ctxinv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Index of a token in the vocabulary.
///
/// Layout: subjects occupy [0, K_S), answers (contexts) [K_S, K_S + K_A), and
/// the single relation token is K_S + K_A.
struct TokenId {
  int value = 0;

  constexpr auto operator<=>(const TokenId&) const = default;
};

inline std::ostream& operator<<(std::ostream& os, TokenId t) { return os << t.value; }

enum class TokenKind { Subject, Answer, Relation };

inline std::string_view to_string(TokenKind kind) {
  switch (kind) {
    case TokenKind::Subject:
      return "subject";
    case TokenKind::Answer:
      return "answer";
    case TokenKind::Relation:
      return "relation";
  }
  return "unknown";
}

/// Token universe with the orthogonal embedding geometry of the toy model.
///
/// Every subject embedding is sqrt(1/2) * (own component) + sqrt(1/2) * theta_S,
/// every answer embedding is sqrt(1/2) * (own component) + sqrt(1/2) * theta_C,
/// and the relation embedding is orthogonal to both families. Components are
/// distinct standard basis vectors:
///
///   subject i   -> e_i
///   answer j    -> e_{K_S + j}
///   theta_S     -> e_{K_S + K_A}
///   theta_C     -> e_{K_S + K_A + 1}
///   relation    -> e_{K_S + K_A + 2}
///
/// Immutable after construction.
class TokenSpace {
 public:
  static TokenSpace build(int num_subjects, int num_answers, int dim) {
    if (num_subjects <= 0 || num_answers <= 0) {
      throw DimensionError("token space needs at least one subject and one answer");
    }
    const int required = num_subjects + num_answers + 3;
    if (dim < required) {
      throw DimensionError("embedding dimension " + std::to_string(dim) +
                           " is too small: need d >= K_S + K_A + 3 = " +
                           std::to_string(required));
    }
    return TokenSpace(num_subjects, num_answers, dim);
  }

  int num_subjects() const { return num_subjects_; }
  int num_answers() const { return num_answers_; }
  int dim() const { return dim_; }
  int num_tokens() const { return num_subjects_ + num_answers_ + 1; }

  TokenId subject(int i) const { return TokenId{i}; }
  TokenId answer(int j) const { return TokenId{num_subjects_ + j}; }
  TokenId relation() const { return TokenId{num_subjects_ + num_answers_}; }

  bool contains(TokenId t) const { return t.value >= 0 && t.value < num_tokens(); }

  TokenKind kind(TokenId t) const {
    if (!contains(t)) throw ShapeError("token id " + std::to_string(t.value) + " out of range");
    if (t.value < num_subjects_) return TokenKind::Subject;
    if (t.value < num_subjects_ + num_answers_) return TokenKind::Answer;
    return TokenKind::Relation;
  }

  bool is_subject(TokenId t) const { return contains(t) && kind(t) == TokenKind::Subject; }
  bool is_answer(TokenId t) const { return contains(t) && kind(t) == TokenKind::Answer; }

  /// d x K matrix whose columns are the token embeddings. This is also the
  /// frozen output head W_H.
  const Matrix& embeddings() const { return phi_; }

  auto embedding(TokenId t) const { return phi_.col(t.value); }

  const Vector& theta_subject() const { return theta_s_; }
  const Vector& theta_context() const { return theta_c_; }

  Vector subject_component(int i) const { return basis(i); }
  Vector answer_component(int j) const { return basis(num_subjects_ + j); }

 private:
  TokenSpace(int num_subjects, int num_answers, int dim)
      : num_subjects_(num_subjects), num_answers_(num_answers), dim_(dim) {
    const double half = std::sqrt(0.5);
    theta_s_ = basis(num_subjects + num_answers);
    theta_c_ = basis(num_subjects + num_answers + 1);
    phi_ = Matrix::Zero(dim, num_tokens());
    for (int i = 0; i < num_subjects; ++i) {
      phi_(i, i) = half;
      phi_(num_subjects + num_answers, i) = half;
    }
    for (int j = 0; j < num_answers; ++j) {
      const int col = num_subjects + j;
      phi_(col, col) = half;
      phi_(num_subjects + num_answers + 1, col) = half;
    }
    phi_(num_subjects + num_answers + 2, relation().value) = 1.0;
  }

  Vector basis(int i) const {
    Vector e = Vector::Zero(dim_);
    e(i) = 1.0;
    return e;
  }

  int num_subjects_;
  int num_answers_;
  int dim_;
  Matrix phi_;
  Vector theta_s_;
  Vector theta_c_;
};

using TokenSpacePtr = std::shared_ptr<const TokenSpace>;

inline TokenSpacePtr make_token_space(int num_subjects, int num_answers, int dim) {
  return std::make_shared<const TokenSpace>(TokenSpace::build(num_subjects, num_answers, dim));
}

/// u^T M v.
inline double project_bilinear(const Matrix& m, const Vector& u, const Vector& v) {
  if (m.rows() != u.size() || m.cols() != v.size()) {
    throw ShapeError("bilinear form shape mismatch: M is " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", u has " + std::to_string(u.size()) +
                     ", v has " + std::to_string(v.size()));
  }
  return u.dot(m * v);
}

/// Debug dump: one row per token, `token_id,kind,x0,...,x{d-1}`.
inline void write_embedding_csv(std::ostream& os, const TokenSpace& space) {
  os << "token_id,kind";
  for (int k = 0; k < space.dim(); ++k) os << ",x" << k;
  os << '\n';
  char buf[32];
  for (int t = 0; t < space.num_tokens(); ++t) {
    os << t << ',' << to_string(space.kind(TokenId{t}));
    for (int k = 0; k < space.dim(); ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", space.embeddings()(k, t));
      os << ',' << buf;
    }
    os << '\n';
  }
}

}  // namespace ctxinv
