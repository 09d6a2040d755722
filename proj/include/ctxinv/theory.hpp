#pragma once

#include <cmath>
#include <string>

#include "ctxinv/errors.hpp"
#include "ctxinv/pretrain.hpp"

// Closed-form values of the pretrained-state analysis. Every function here is
// evaluated from the scalar parameters alone and never touches a ModelState,
// so it can cross-check the numeric pipeline.

namespace ctxinv::theory {

struct ValueClosedForms {
  double v0_cc = 0.0;             // v_0(c, c)
  double v0_cs_memorized = 0.0;   // v_0(c, s) when (s, c) is memorized
  double o_c = 0.0;               // v_0(c, s) when s is not memorized
  double o_r = 0.0;
};

struct AttentionSignals {
  double m_C = 0.0;
  double m_CS = 0.0;
  double lambda_C = 0.0;
  double lambda_CS = 0.0;
};

struct PhaseGains {
  double A1 = 0.0;  // attention-logit gain of a context-critical point after one step
  double A2 = 0.0;  // same for a point whose subject is also predictive
};

struct ClosedForms {
  ValueClosedForms v0;
  AttentionSignals m;
  PhaseGains gains;
};

inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// log((K_A - 1) exp(o_c) + exp(o_r) + K_S)
inline double log_partition(const PretrainParams& p) {
  return std::log((p.num_answers - 1) * std::exp(p.o_c) + std::exp(p.o_r) + p.num_subjects);
}

inline ValueClosedForms closed_form_v0(const PretrainParams& p) {
  const double lz = log_partition(p);
  return {logit(p.delta_C) + lz, logit(p.delta_M) + lz, p.o_c, p.o_r};
}

/// m_C = lambda_C [logit(delta_C) + log Z - o_c],
/// m_CS = lambda_CS [logit(delta_C) - logit(delta_M)], with
/// lambda = (1 + exp(half-weighted exponent) / Z)^{-1} per category.
inline AttentionSignals closed_form_m(const PretrainParams& p) {
  const double lz = log_partition(p);
  const double z = std::exp(lz);
  const double lc = logit(p.delta_C);
  const double lm = logit(p.delta_M);
  AttentionSignals out;
  out.lambda_C = 1.0 / (1.0 + std::exp(0.5 * lc + 0.5 * lz + 0.5 * p.o_c) / z);
  out.lambda_CS = 1.0 / (1.0 + std::exp(0.5 * lc + 0.5 * lm + lz) / z);
  out.m_C = out.lambda_C * (lc + lz - p.o_c);
  out.m_CS = out.lambda_CS * (lc - lm);
  return out;
}

/// A1 = ((n+2)/n) m_C + m_CS, A2 = m_C + ((n+2)/n) m_CS for an even C / C+S split
/// of n points. Throws if the sign and ordering invariants fail.
inline PhaseGains closed_form_A(const PretrainParams& p, int n) {
  if (n < 2 || n % 2 != 0) throw Error("closed_form_A needs an even split with n >= 2");
  const AttentionSignals m = closed_form_m(p);
  const double w = static_cast<double>(n + 2) / n;
  PhaseGains g{w * m.m_C + m.m_CS, m.m_C + w * m.m_CS};
  auto fail = [](const std::string& what) { throw Error("closed-form invariant violated: " + what); };
  if (!(m.m_C > 0.0)) fail("m_C > 0");
  if (!(m.m_CS < 0.0)) fail("m_CS < 0");
  if (!(std::abs(m.m_C) > std::abs(m.m_CS))) fail("|m_C| > |m_CS|");
  if (!(g.A1 > 2.0 / n * m.m_C)) fail("A1 > (2/n) m_C");
  if (!(g.A1 > g.A2)) fail("A1 > A2");
  return g;
}

inline ClosedForms closed_forms(const PretrainParams& p, int n) {
  return {closed_form_v0(p), closed_form_m(p), closed_form_A(p, n)};
}

struct PredictedAttention {
  double sigma_c_C = 0.5;   // attention to context on a C point at t = 1
  double sigma_c_CS = 0.5;  // attention to context on a C+S point at t = 1
};

/// sigma_c = 1 / (1 + exp(-eta A / 8)) per category after one full-batch step.
inline PredictedAttention predict_t1_attention(const PretrainParams& p, int n, double eta) {
  const PhaseGains g = closed_form_A(p, n);
  return {1.0 / (1.0 + std::exp(-eta * g.A1 / 8.0)), 1.0 / (1.0 + std::exp(-eta * g.A2 / 8.0))};
}

}  // namespace ctxinv::theory
