#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "common.hpp"

using namespace ctxinv;
namespace th = ctxinv::theory;

namespace {

PretrainParams small_defaults() {
  PretrainParams p;
  p.num_subjects = 32;
  p.num_answers = 64;
  p.dim = 99;
  return p;
}

}  // namespace

// Reference values evaluated independently at 40 significant digits.
TEST(Theory, FrozenValues32x64) {
  const auto cf = th::closed_forms(small_defaults(), 64);
  EXPECT_NEAR(cf.v0.v0_cc, 2.434363940455245, 1e-13);
  EXPECT_NEAR(cf.v0.v0_cs_memorized, 4.6315885177914643, 1e-13);
  EXPECT_NEAR(cf.m.lambda_C, 0.96657344193336261, 1e-14);
  EXPECT_NEAR(cf.m.lambda_CS, 0.75, 1e-14);
  EXPECT_NEAR(cf.m.m_C, 2.2563341886509533, 1e-13);
  EXPECT_NEAR(cf.m.m_CS, -1.6479184330021645, 1e-13);
  EXPECT_NEAR(cf.gains.A1, 0.6789261990441311, 1e-13);
  EXPECT_NEAR(cf.gains.A2, 0.55691830461747117, 1e-13);
}

TEST(Theory, FrozenValuesDefaults) {
  const auto cf = th::closed_forms(PretrainParams{}, 64);
  EXPECT_NEAR(cf.v0.v0_cc, 3.4684178831785071, 1e-13);
  EXPECT_NEAR(cf.v0.v0_cs_memorized, 5.6656424605147265, 1e-13);
  EXPECT_NEAR(cf.m.lambda_C, 0.97979540090711422, 1e-14);
  EXPECT_NEAR(cf.m.lambda_CS, 0.75, 1e-14);
  EXPECT_NEAR(cf.m.m_C, 3.3003603502715784, 1e-13);
  EXPECT_NEAR(cf.m.m_CS, -1.6479184330021645, 1e-13);
  EXPECT_NEAR(cf.gains.A1, 1.7555781782154008, 1e-13);
  EXPECT_NEAR(cf.gains.A2, 1.6009444662380963, 1e-13);
}

TEST(Theory, HalfContextMassLeavesPartition) {
  PretrainParams p;
  p.delta_C = 0.5;
  EXPECT_NEAR(th::closed_form_v0(p).v0_cc, th::log_partition(p), 1e-15);
}

// v0 from the formulas against the value table read back through softmax.
TEST(Theory, ValueFormulasMatchLiveState) {
  const auto& lab = ctxinv::testing::default_lab();
  const auto v0 = th::closed_form_v0(lab.params);
  const Matrix& phi = lab.space->embeddings();
  const Matrix table = phi.transpose() * lab.state.wv * phi;
  const TokenId c = lab.space->answer(5);
  EXPECT_NEAR(table(c.value, c.value), v0.v0_cc, 1e-10);
  const TokenId s = lab.facts.memorized_subjects().front();
  EXPECT_NEAR(table(lab.facts.answer(s).value, s.value), v0.v0_cs_memorized, 1e-10);
  EXPECT_NEAR(table(c.value, lab.facts.fresh_subjects().front().value), v0.o_c, 1e-10);

  // invert softmax(v(c))_c = delta_C numerically: logit(p) + log(sum of the other exps)
  const Vector z = value_logits(lab.state, c);
  const double rest = z.array().exp().sum() - std::exp(z(c.value));
  EXPECT_NEAR(th::logit(lab.params.delta_C) + std::log(rest), v0.v0_cc, 1e-10);
}

TEST(Theory, SignalsMatchForwardPasses) {
  const auto& lab = ctxinv::testing::default_lab();
  const auto m = th::closed_form_m(lab.params);
  for (const auto& ex : lab.mixture.examples) {
    const double numeric = attention_signal(lab.state, ex);
    const double expected = ex.category == Category::C ? m.m_C : m.m_CS;
    ASSERT_NEAR(numeric, expected, 1e-10) << to_string(ex.category);
    const double lambda = 1.0 - detail::softmax(forward_last_token(lab.state, ex))(ex.label.value);
    ASSERT_NEAR(lambda, ex.category == Category::C ? m.lambda_C : m.lambda_CS, 1e-12);
  }
  EXPECT_GT(m.m_C, 0.0);
  EXPECT_LT(m.m_CS, 0.0);
  EXPECT_GT(std::abs(m.m_C), std::abs(m.m_CS));
}

// Signs hold for every valid parameter set; the magnitude ordering does not,
// and closed_form_A must refuse exactly those sets.
TEST(Theory, InvariantsOnRandomValidParams) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int checked = 0, refused = 0;
  while (checked < 500) {
    PretrainParams p;
    p.num_answers = 8 + static_cast<int>(u(rng) * 200);
    p.num_subjects = 1 + static_cast<int>(u(rng) * p.num_answers);
    p.dim = p.num_subjects + p.num_answers + 3;
    p.delta_C = 3.0 / (p.num_answers - 1) + u(rng) * 0.3;
    p.delta_M = std::min(0.999, 2.0 * p.delta_C + u(rng) * 0.5);
    p.o_c = 0.01 + u(rng);
    p.o_r = u(rng) * p.o_c;
    try {
      p.validate();
    } catch (const ParamError&) {
      continue;
    }
    ++checked;
    const auto m = th::closed_form_m(p);
    ASSERT_GT(m.m_C, 0.0);
    ASSERT_LT(m.m_CS, 0.0);
    const int n = 2 * (1 + static_cast<int>(u(rng) * 64));
    if (std::abs(m.m_C) > std::abs(m.m_CS)) {
      const auto g = th::closed_form_A(p, n);
      EXPECT_GT(g.A1, 0.0);
      EXPECT_GT(g.A1, g.A2);
    } else {
      ++refused;
      EXPECT_THROW(th::closed_form_A(p, n), Error);
    }
  }
  EXPECT_GT(refused, 0);
  EXPECT_LT(refused, checked / 4);
}

TEST(Theory, OrderingNotImpliedByConstraints) {
  PretrainParams p;
  p.num_subjects = 1;
  p.num_answers = 18;
  p.dim = 22;
  p.delta_C = 0.1796224336908958;
  p.delta_M = 0.8505366806570234;
  p.o_c = 0.3055498600489178;
  p.o_r = 0.18228207653552114;
  ASSERT_NO_THROW(p.validate());
  const auto m = th::closed_form_m(p);
  EXPECT_NEAR(m.m_C, 1.26788395889332708, 1e-12);
  EXPECT_NEAR(m.m_CS, -1.53940187043538297, 1e-12);
  EXPECT_THROW(th::closed_form_A(p, 64), Error);
}

TEST(Theory, LargeSplitLimit) {
  const PretrainParams p;
  const auto m = th::closed_form_m(p);
  const auto g = th::closed_form_A(p, 2'000'000);
  EXPECT_NEAR(g.A1, m.m_C + m.m_CS, 1e-5);
  EXPECT_NEAR(g.A2, m.m_C + m.m_CS, 1e-5);
  EXPECT_LT(g.A2, m.m_C + m.m_CS);
  EXPECT_THROW(th::closed_form_A(p, 3), Error);
}

TEST(Theory, SubjectSignalVanishesAsMemorizationWeakens) {
  PretrainParams p;
  double prev = -1e9;
  for (double gap : {0.3, 0.1, 0.01, 1e-4, 1e-7}) {
    p.delta_M = p.delta_C + gap;
    const double m_cs = th::closed_form_m(p).m_CS;
    EXPECT_LT(m_cs, 0.0);
    EXPECT_GT(m_cs, prev);
    prev = m_cs;
  }
  EXPECT_GT(prev, -1e-5);
}

TEST(Theory, LogisticPredictionLimits) {
  const PretrainParams p;
  const auto at0 = th::predict_t1_attention(p, 64, 0.0);
  EXPECT_EQ(at0.sigma_c_C, 0.5);
  EXPECT_EQ(at0.sigma_c_CS, 0.5);
  const auto big = th::predict_t1_attention(p, 64, 1e6);
  EXPECT_EQ(big.sigma_c_C, 1.0);
  EXPECT_GT(big.sigma_c_CS, 0.5);
}

TEST(Theory, PredictedAttentionMatchesEngine) {
  const auto& lab = ctxinv::testing::default_lab();
  const auto n = static_cast<int>(lab.mixture.size());
  for (double eta : {0.5, 10.0, 40.96}) {
    ModelState next = lab.state;
    next.wkq += eta * grad_wkq(lab.state, lab.mixture);
    const auto pred = th::predict_t1_attention(lab.params, n, eta);
    for (const auto& ex : lab.mixture.examples) {
      const double sigma = attention_weights(next, ex).context;
      ASSERT_NEAR(sigma, ex.category == Category::C ? pred.sigma_c_C : pred.sigma_c_CS, 1e-10) << eta;
    }
  }
}
