#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>
#include <vector>

#include "common.hpp"

using namespace ctxinv;
using ctxinv::testing::default_lab;

namespace {

TrainSpec spec_for(const Lab& lab, std::optional<double> eta, int steps) {
  TrainSpec spec;
  spec.eta = eta;
  spec.steps = steps;
  spec.dataset = lab.mixture.examples;
  spec.testset = lab.testset;
  return spec;
}

}  // namespace

TEST(Dynamics, FirstPhaseSigns) {
  const auto& lab = default_lab();
  const auto p = gradient_projections(lab.state, lab.mixture);
  EXPECT_GT(p.theta_C, 1e-12);
  EXPECT_LT(p.theta_S, -1e-12);
  EXPECT_DOUBLE_EQ(p.theta_C, -p.theta_S);
}

TEST(Dynamics, EtaStarFlipsSigns) {
  const auto& lab = default_lab();
  const auto eta = find_eta_star(lab.state, lab.mixture);
  ASSERT_TRUE(eta);
  EXPECT_GE(*eta, 1e-2);
  EXPECT_LE(*eta, 1e4);
  const auto result = train(lab.state, spec_for(lab, eta, 1));
  EXPECT_LT(result.trace.rows[1].grad_proj_thetaC, -1e-12);
  EXPECT_GT(result.trace.rows[1].grad_proj_thetaS, 1e-12);
  // C points gain more context attention than C+S points
  EXPECT_GT(result.trace.rows[1].sigma_c_C, result.trace.rows[1].sigma_c_CS);

  const std::vector<double> tiny{1e-6, 2e-6};
  EXPECT_FALSE(find_eta_star(lab.state, lab.mixture, tiny));
  EXPECT_THROW(find_eta_star(lab.state, lab.mixture, std::vector<double>{}), ParamError);
  EXPECT_THROW(find_eta_star(lab.state, lab.mixture, std::vector<double>{2.0, 1.0}), ParamError);
}

TEST(Dynamics, AutoEtaResolves) {
  const auto& lab = default_lab();
  const auto result = train(lab.state, spec_for(lab, std::nullopt, 1));
  EXPECT_EQ(result.trace.eta, *find_eta_star(lab.state, lab.mixture));
}

TEST(Dynamics, GeometricGrid) {
  const auto grid = default_eta_grid();
  EXPECT_EQ(grid.front(), 1e-2);
  EXPECT_LE(grid.back(), 1e4);
  EXPECT_GT(grid.back() * 2, 1e4);
  EXPECT_EQ(grid.size(), 20u);
}

TEST(Dynamics, ZeroRateKeepsState) {
  const auto& lab = default_lab();
  auto spec = spec_for(lab, 0.0, 3);
  spec.trainable = {true, true};
  const auto result = train(lab.state, spec);
  ASSERT_EQ(result.trace.rows.size(), 4u);
  EXPECT_EQ(result.state.wkq, lab.state.wkq);
  EXPECT_EQ(result.state.wv, lab.state.wv);
  for (const auto& row : result.trace.rows) {
    EXPECT_EQ(row.loss_total, result.trace.rows[0].loss_total);
    EXPECT_EQ(row.M_C, result.trace.rows[0].M_C);
    EXPECT_EQ(row.subject_predictiveness, result.trace.rows[0].subject_predictiveness);
  }
}

TEST(Dynamics, TraceRowsAndColumns) {
  const auto& lab = default_lab();
  const auto result = train(lab.state, spec_for(lab, 1.0, 5));
  ASSERT_EQ(result.trace.rows.size(), 6u);
  for (int t = 0; t <= 5; ++t) EXPECT_EQ(result.trace.rows[t].step, t);
  EXPECT_TRUE(std::isnan(result.trace.rows[0].loss_S));
  EXPECT_EQ(result.trace.rows[0].sigma_c_C, 0.5);
  EXPECT_EQ(result.trace.rows[0].M_C, eval_conflict_metric(lab.state, lab.testset));
  EXPECT_EQ(result.trace.rows[0].subject_predictiveness.size(), 32u);

  std::ostringstream os;
  write_trace_csv(os, result.trace);
  const std::string csv = os.str();
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "step,loss_total,loss_C,loss_CS,loss_S,sigma_c_C,sigma_c_CS,grad_proj_thetaC,grad_proj_thetaS,M_C,"
            "m_C_numeric,m_CS_numeric");
  EXPECT_NE(csv.find(",nan,"), std::string::npos);
}

TEST(Dynamics, SpecValidation) {
  const auto& lab = default_lab();
  auto spec = spec_for(lab, 1.0, 0);
  EXPECT_THROW(train(lab.state, spec), ParamError);
  spec = spec_for(lab, -1.0, 1);
  EXPECT_THROW(train(lab.state, spec), ParamError);
  spec = spec_for(lab, 1.0, 1);
  spec.trainable = {false, false};
  EXPECT_THROW(train(lab.state, spec), ParamError);
  spec = spec_for(lab, 1.0, 1);
  spec.dataset.clear();
  EXPECT_THROW(train(lab.state, spec), DatasetError);
}

TEST(Dynamics, DivergenceGuard) {
  const auto& lab = default_lab();
  ModelState broken = lab.state;
  broken.wv(0, 0) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(train(broken, spec_for(lab, 1.0, 3)), DivergenceError);
  ModelState nan_keys = lab.state;
  nan_keys.wkq(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(nan_keys, spec_for(lab, 1.0, 3)), DivergenceError);
}

TEST(Dynamics, ConflictMetric) {
  const auto& lab = default_lab();
  ModelState flat = lab.state;
  flat.wv.setZero();
  EXPECT_DOUBLE_EQ(eval_conflict_metric(flat, lab.testset), 0.5);
  EXPECT_THROW(eval_conflict_metric(lab.state, std::vector<Example>{}), DatasetError);
  const double m0 = eval_conflict_metric(lab.state, lab.testset);
  EXPECT_GT(m0, 0.0);
  EXPECT_LT(m0, 0.5);
}

TEST(Dynamics, InversionOverFirstTwoSteps) {
  const auto& lab = default_lab();
  const auto result = train(lab.state, spec_for(lab, find_eta_star(lab.state, lab.mixture), 2));
  const auto& r = result.trace.rows;
  EXPECT_GT(r[1].M_C, r[0].M_C);
  EXPECT_GT(r[1].M_C, r[2].M_C);
}

TEST(Dynamics, SubjectPointShiftsAttention) {
  const auto& lab = default_lab();
  const auto res = run_prop2_experiment(lab.state, lab.mixture.examples, lab.spare_s_points);
  EXPECT_EQ(res.new_proj.theta_C, res.old_proj.theta_C);
  EXPECT_GT(res.new_proj.theta_S, res.old_proj.theta_S);
  EXPECT_GT(res.s_contribution_formula, 0.0);
  EXPECT_NEAR(res.s_contribution_measured, res.s_contribution_formula, 1e-12);
  EXPECT_THROW(run_prop2_experiment(lab.state, lab.mixture.examples, std::vector<Example>{}), DatasetError);
}

TEST(Dynamics, ValueStepMakesSubjectsPredictive) {
  const auto& lab = default_lab();
  for (double eta : {1e-3, 1.0, 40.96}) {
    for (const auto& d : run_prop3_experiment(lab.state, lab.mixture.examples, eta)) {
      EXPECT_GT(d.delta(), 0.0) << eta;
    }
  }
  for (const auto& d : run_prop3_experiment(lab.state, lab.mixture.examples, 0.0)) EXPECT_EQ(d.delta(), 0.0);

  // small-rate deltas follow the first-order term
  const double eta = 1e-6;
  const auto deltas = run_prop3_experiment(lab.state, lab.mixture.examples, eta);
  const auto slope = prop3_first_order(lab.state, lab.mixture.examples);
  ASSERT_EQ(deltas.size(), slope.size());
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    EXPECT_GT(slope[i], 0.0);
    EXPECT_NEAR(deltas[i].delta() / eta, slope[i], 1e-4 * slope[i]);
  }
}

TEST(Dynamics, QueryKeyOnlyLeavesValues) {
  const auto& lab = default_lab();
  const auto eta = find_eta_star(lab.state, lab.mixture);
  auto spec = spec_for(lab, eta, 3);
  const auto qk = train(lab.state, spec);
  for (const auto& row : qk.trace.rows) EXPECT_EQ(row.subject_predictiveness, qk.trace.rows[0].subject_predictiveness);
  spec.trainable = {true, true};
  const auto joint = train(lab.state, spec);
  const auto& before = joint.trace.rows[0].subject_predictiveness;
  const auto& after = joint.trace.rows[1].subject_predictiveness;
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_GT(after[i], before[i]);
}

TEST(Dynamics, PeakAnalysis) {
  const std::vector<double> series{0.1, 0.5, 0.9, 0.8, 0.7, 0.7, 0.6};
  const auto pk = analyze_peak(series);
  EXPECT_EQ(pk.peak, 2);
  EXPECT_EQ(pk.decreasing_run, 2);
  EXPECT_DOUBLE_EQ(pk.decline, 0.9 - 0.6);
  EXPECT_TRUE(non_decreasing(std::vector<double>{1.0, 1.0, 2.0}));
  EXPECT_FALSE(non_decreasing(std::vector<double>{1.0, 0.9}));
  EXPECT_THROW(analyze_peak(std::vector<double>{}), Error);
}
