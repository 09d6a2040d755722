#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <string>

#include "ctxinv/token_space.hpp"

using namespace ctxinv;

namespace {

const double kHalf = std::sqrt(0.5);

void expect_geometry(const TokenSpace& space) {
  const Matrix& phi = space.embeddings();
  const Vector& ts = space.theta_subject();
  const Vector& tc = space.theta_context();
  EXPECT_EQ(ts.dot(tc), 0.0);
  for (int t = 0; t < space.num_tokens(); ++t) {
    EXPECT_NEAR(phi.col(t).norm(), 1.0, 1e-15) << "token " << t;
  }
  for (int i = 0; i < space.num_subjects(); ++i) {
    const auto e = space.embedding(space.subject(i));
    EXPECT_NEAR(e.dot(ts), kHalf, 1e-15);
    EXPECT_EQ(e.dot(tc), 0.0);
    EXPECT_NEAR(e.dot(space.subject_component(i)), kHalf, 1e-15);
  }
  for (int j = 0; j < space.num_answers(); ++j) {
    const auto e = space.embedding(space.answer(j));
    EXPECT_NEAR(e.dot(tc), kHalf, 1e-15);
    EXPECT_EQ(e.dot(ts), 0.0);
    EXPECT_NEAR(e.dot(space.answer_component(j)), kHalf, 1e-15);
  }
  const auto r = space.embedding(space.relation());
  EXPECT_EQ(r.dot(ts), 0.0);
  EXPECT_EQ(r.dot(tc), 0.0);

  // full Gram matrix: 1/2 within a family, 0 across families and against r
  const Matrix gram = phi.transpose() * phi;
  for (int a = 0; a < space.num_tokens(); ++a) {
    for (int b = 0; b < space.num_tokens(); ++b) {
      double expected = 0.0;
      if (a == b) {
        expected = 1.0;
      } else if (space.kind(TokenId{a}) == space.kind(TokenId{b}) && space.kind(TokenId{a}) != TokenKind::Relation) {
        expected = 0.5;
      }
      ASSERT_NEAR(gram(a, b), expected, 1e-15) << a << "," << b;
    }
  }
}

}  // namespace

TEST(TokenSpace, LayoutAndKinds) {
  const auto space = TokenSpace::build(3, 5, 11);
  EXPECT_EQ(space.num_tokens(), 9);
  EXPECT_EQ(space.subject(2).value, 2);
  EXPECT_EQ(space.answer(0).value, 3);
  EXPECT_EQ(space.relation().value, 8);
  EXPECT_EQ(space.kind(TokenId{2}), TokenKind::Subject);
  EXPECT_EQ(space.kind(TokenId{7}), TokenKind::Answer);
  EXPECT_EQ(space.kind(TokenId{8}), TokenKind::Relation);
  EXPECT_FALSE(space.contains(TokenId{9}));
  EXPECT_THROW(space.kind(TokenId{-1}), ShapeError);
  EXPECT_EQ(space.embeddings().rows(), 11);
  EXPECT_EQ(space.embeddings().cols(), 9);
}

TEST(TokenSpace, GeometryOnRandomSizes) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> ks(1, 12), ka(1, 12), extra(0, 5);
  for (int trial = 0; trial < 25; ++trial) {
    const int s = ks(rng), a = ka(rng);
    const auto space = TokenSpace::build(s, a, s + a + 3 + extra(rng));
    expect_geometry(space);
  }
}

TEST(TokenSpace, DefaultSizeGeometry) { expect_geometry(TokenSpace::build(112, 160, 275)); }

TEST(TokenSpace, RejectsSmallDimension) {
  try {
    TokenSpace::build(32, 64, 98);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("99"), std::string::npos) << e.what();
  }
  EXPECT_NO_THROW(TokenSpace::build(32, 64, 99));
  EXPECT_THROW(TokenSpace::build(0, 4, 10), DimensionError);
}

TEST(TokenSpace, BilinearForm) {
  const auto space = TokenSpace::build(2, 2, 7);
  const Matrix id = Matrix::Identity(7, 7);
  EXPECT_DOUBLE_EQ(project_bilinear(id, space.theta_context(), space.embedding(space.answer(1))), kHalf);
  EXPECT_EQ(project_bilinear(id, space.theta_subject(), space.embedding(space.relation())), 0.0);

  Matrix m = Matrix::Zero(7, 7);
  m(space.theta_context().size() - 2, space.theta_context().size() - 1) = 3.0;  // theta_C row, relation column
  EXPECT_DOUBLE_EQ(project_bilinear(m, space.theta_context(), space.embedding(space.relation())), 3.0);
  EXPECT_THROW(project_bilinear(Matrix::Zero(6, 7), space.theta_context(), space.theta_context()), ShapeError);
}

TEST(TokenSpace, EmbeddingCsv) {
  const auto space = TokenSpace::build(1, 1, 5);
  std::ostringstream os;
  write_embedding_csv(os, space);
  const std::string out = os.str();
  EXPECT_EQ(out.substr(0, out.find('\n')), "token_id,kind,x0,x1,x2,x3,x4");
  EXPECT_NE(out.find("2,relation,0,0,0,0,1\n"), std::string::npos) << out;
  EXPECT_NE(out.find("0,subject,0.70710678118654757,0,0.70710678118654757,0,0\n"), std::string::npos) << out;
}
