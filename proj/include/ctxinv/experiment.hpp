#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctxinv/config.hpp"
#include "ctxinv/dataset.hpp"
#include "ctxinv/dynamics.hpp"
#include "ctxinv/errors.hpp"
#include "ctxinv/lab.hpp"
#include "ctxinv/svg.hpp"
#include "ctxinv/theory.hpp"

namespace ctxinv {

enum ExitCode { kExitPass = 0, kExitPropertyFailure = 1, kExitConfigError = 2, kExitDivergence = 3 };

struct Check {
  enum class Status { Pass, Fail, Skipped };
  std::string name;
  Status status = Status::Pass;
  std::string detail;
};

inline std::string_view to_string(Check::Status s) {
  switch (s) {
    case Check::Status::Pass:
      return "pass";
    case Check::Status::Fail:
      return "fail";
    case Check::Status::Skipped:
      return "skipped";
  }
  return "?";
}

struct ExperimentResult {
  std::string experiment;
  nlohmann::json config;
  std::optional<double> eta;
  bool eta_searched = false;
  DynamicsTrace trace;
  std::optional<DynamicsTrace> baseline;  // comparison run, plotted dashed
  nlohmann::json metrics = nlohmann::json::object();
  std::vector<Check> checks;

  bool pass() const {
    return std::none_of(checks.begin(), checks.end(), [](const Check& c) { return c.status == Check::Status::Fail; });
  }

  void check(std::string name, bool ok, std::string detail = "") {
    checks.push_back({std::move(name), ok ? Check::Status::Pass : Check::Status::Fail, std::move(detail)});
  }
  void skip(std::string name, std::string why) {
    checks.push_back({std::move(name), Check::Status::Skipped, std::move(why)});
  }

  nlohmann::json summary() const {
    nlohmann::json out;
    out["experiment"] = experiment;
    out["config"] = config;
    out["eta"] = eta ? nlohmann::json(*eta) : nlohmann::json(nullptr);
    if (eta_searched) out["eta_star"] = eta ? nlohmann::json(*eta) : nlohmann::json("NOT_FOUND");
    out["metrics"] = metrics;
    nlohmann::json list = nlohmann::json::array();
    for (const auto& c : checks) {
      list.push_back({{"name", c.name}, {"status", std::string(to_string(c.status))}, {"detail", c.detail}});
    }
    out["checks"] = list;
    if (!trace.rows.empty()) {
      const auto& last = trace.rows.back();
      out["final"] = {{"step", last.step},         {"loss_total", last.loss_total}, {"sigma_c_C", last.sigma_c_C},
                      {"sigma_c_CS", last.sigma_c_CS}, {"M_C", last.M_C}};
    }
    out["pass"] = pass();
    return out;
  }
};

namespace detail {

inline std::string show(double x) { return format_double(x); }

// JSON has no NaN; absent quantities become null.
inline nlohmann::json num_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); }

struct EtaChoice {
  std::optional<double> eta;
  bool searched = false;
};

inline EtaChoice resolve_eta(const ExperimentConfig& cfg, const Lab& lab) {
  if (cfg.eta) return {cfg.eta, false};
  return {find_eta_star(lab.state, lab.mixture), true};
}

inline TrainSpec make_spec(const ExperimentConfig& cfg, double eta, std::vector<Example> data,
                           const Lab& lab, Trainable trainable) {
  TrainSpec spec;
  spec.eta = eta;
  spec.steps = cfg.steps;
  spec.trainable = trainable;
  spec.dataset = std::move(data);
  spec.testset = lab.testset;
  return spec;
}

inline bool even_split(const ExperimentConfig& cfg) {
  const auto& c = cfg.lab.counts;
  return c.n_C == c.n_CS && c.n_C > 0 && c.n_S_seen == 0 && c.n_S_unseen == 0;
}

constexpr double kOracleTol = 1e-10;

inline void closed_form_checks(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  const auto m = theory::closed_form_m(lab.params);
  const TraceRow& t0 = r.trace.rows.front();
  r.metrics["m_C_closed_form"] = m.m_C;
  r.metrics["m_CS_closed_form"] = m.m_CS;
  if (std::isfinite(t0.m_C_numeric)) {
    r.check("m_C_matches_closed_form", std::abs(t0.m_C_numeric - m.m_C) <= kOracleTol,
            show(t0.m_C_numeric) + " vs " + show(m.m_C));
  } else {
    r.skip("m_C_matches_closed_form", "no C points");
  }
  if (std::isfinite(t0.m_CS_numeric)) {
    r.check("m_CS_matches_closed_form", std::abs(t0.m_CS_numeric - m.m_CS) <= kOracleTol,
            show(t0.m_CS_numeric) + " vs " + show(m.m_CS));
  } else {
    r.skip("m_CS_matches_closed_form", "no C+S points");
  }
  r.check("m_signs", m.m_C > 0.0 && m.m_CS < 0.0);
  r.check("m_ordering", std::abs(m.m_C) > std::abs(m.m_CS), show(std::abs(m.m_C)) + " vs " + show(std::abs(m.m_CS)));

  if (!even_split(cfg)) {
    r.skip("t1_attention_matches_prediction", "closed form assumes an even C / C+S split");
    return;
  }
  const int n = cfg.lab.counts.n_C + cfg.lab.counts.n_CS;
  try {
    const auto g = theory::closed_form_A(lab.params, n);
    r.metrics["A1"] = g.A1;
    r.metrics["A2"] = g.A2;
    r.check("A1_gt_A2", g.A1 > g.A2);
    const auto pred = theory::predict_t1_attention(lab.params, n, *r.eta);
    const TraceRow& t1 = r.trace.rows.at(1);
    const double err = std::max(std::abs(t1.sigma_c_C - pred.sigma_c_C), std::abs(t1.sigma_c_CS - pred.sigma_c_CS));
    r.metrics["t1_attention_error"] = err;
    r.check("t1_attention_matches_prediction", err <= kOracleTol, "max error " + show(err));
  } catch (const Error& e) {
    r.check("A1_gt_A2", false, e.what());
  }
}

inline void phase_checks(ExperimentResult& r) {
  const TraceRow& t0 = r.trace.rows.at(0);
  const TraceRow& t1 = r.trace.rows.at(1);
  r.metrics["grad_proj_thetaC_t0"] = t0.grad_proj_thetaC;
  r.metrics["grad_proj_thetaS_t0"] = t0.grad_proj_thetaS;
  r.metrics["grad_proj_thetaC_t1"] = t1.grad_proj_thetaC;
  r.metrics["grad_proj_thetaS_t1"] = t1.grad_proj_thetaS;
  r.check("first_phase_thetaC_positive", t0.grad_proj_thetaC > kSignFloor, show(t0.grad_proj_thetaC));
  r.check("first_phase_thetaS_negative", t0.grad_proj_thetaS < -kSignFloor, show(t0.grad_proj_thetaS));
  r.check("second_phase_thetaC_negative", t1.grad_proj_thetaC < -kSignFloor, show(t1.grad_proj_thetaC));
  r.check("second_phase_thetaS_positive", t1.grad_proj_thetaS > kSignFloor, show(t1.grad_proj_thetaS));
}

inline void report_shape(ExperimentResult& r, const char* prefix, const DynamicsTrace& trace, double TraceRow::*field) {
  const auto series = trace.column(field);
  if (std::any_of(series.begin(), series.end(), [](double x) { return !std::isfinite(x); })) return;
  const auto pk = analyze_peak(series);
  const std::string p = prefix;
  r.metrics[p + "_peak_step"] = pk.peak;
  r.metrics[p + "_peak"] = pk.peak_value;
  r.metrics[p + "_decreasing_run"] = pk.decreasing_run;
  r.metrics[p + "_decline"] = pk.decline;
}

inline void run_prop1(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  r.trace = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, {true, false})).trace;
  phase_checks(r);
  closed_form_checks(r, cfg, lab);
}

inline void run_theorem1(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  if (lab.testset.empty()) throw ConfigError("key 'n_test': theorem1 needs conflict tests");
  r.trace = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, {true, false})).trace;
  const auto& rows = r.trace.rows;
  r.metrics["M_C_0"] = rows[0].M_C;
  r.metrics["M_C_1"] = rows[1].M_C;
  r.metrics["M_C_2"] = rows[2].M_C;
  r.check("M_C_1_gt_M_C_0", rows[1].M_C > rows[0].M_C);
  r.check("M_C_1_gt_M_C_2", rows[1].M_C > rows[2].M_C);
  report_shape(r, "M_C", r.trace, &TraceRow::M_C);
  report_shape(r, "sigma_c_CS", r.trace, &TraceRow::sigma_c_CS);
}

inline void run_prop2(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  if (lab.spare_s_points.empty()) throw ConfigError("key 's_points': prop2 needs at least one subject-only point");
  const auto res = run_prop2_experiment(lab.state, lab.mixture.examples, lab.spare_s_points);
  r.metrics["theta_C_old"] = res.old_proj.theta_C;
  r.metrics["theta_C_new"] = res.new_proj.theta_C;
  r.metrics["theta_S_old"] = res.old_proj.theta_S;
  r.metrics["theta_S_new"] = res.new_proj.theta_S;
  r.metrics["s_contribution_measured"] = res.s_contribution_measured;
  r.metrics["s_contribution_formula"] = res.s_contribution_formula;
  const double dc = std::abs(res.new_proj.theta_C - res.old_proj.theta_C);
  r.check("theta_C_unchanged", dc <= 1e-12, "difference " + show(dc));
  r.check("theta_S_increases", res.new_proj.theta_S > res.old_proj.theta_S);
  const double de = std::abs(res.s_contribution_measured - res.s_contribution_formula);
  r.check("s_contribution_matches_formula", de <= 1e-12 * std::max(1.0, std::abs(res.s_contribution_formula)),
          "difference " + show(de));

  std::vector<Example> extended = lab.mixture.examples;
  extended.insert(extended.end(), lab.spare_s_points.begin(), lab.spare_s_points.end());
  r.trace = train(lab.state, make_spec(cfg, *r.eta, extended, lab, cfg.trainable)).trace;
}

inline void run_prop3(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  const auto deltas = run_prop3_experiment(lab.state, lab.mixture.examples, *r.eta);
  double lo = deltas.front().delta(), hi = lo;
  int positive = 0;
  for (const auto& d : deltas) {
    lo = std::min(lo, d.delta());
    hi = std::max(hi, d.delta());
    positive += d.delta() > 0.0;
  }
  r.metrics["delta_min"] = lo;
  r.metrics["delta_max"] = hi;
  r.metrics["c_examples"] = deltas.size();
  r.check("subject_predictiveness_increases", positive == static_cast<int>(deltas.size()),
          std::to_string(positive) + "/" + std::to_string(deltas.size()) + " positive");
  r.trace = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, {true, true})).trace;
}

inline void run_filter(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  const auto [kept, dropped] = perplexity_filter(lab.state, lab.mixture, cfg.keep_fraction);
  int agree = 0;
  for (const auto& ex : kept.examples) agree += ex.category == Category::C;
  for (const auto& ex : dropped.examples) agree += ex.category != Category::C;
  const double agreement = static_cast<double>(agree) / static_cast<double>(lab.mixture.size());
  r.metrics["kept"] = kept.size();
  r.metrics["dropped"] = dropped.size();
  r.metrics["partition_agreement"] = agreement;
  r.check("filter_recovers_partition", agree == static_cast<int>(lab.mixture.size()),
          std::to_string(agree) + "/" + std::to_string(lab.mixture.size()));
  if (kept.empty()) {
    r.check("filtered_sigma_c_non_decreasing", false, "filter kept nothing");
    return;
  }
  r.trace = train(lab.state, make_spec(cfg, *r.eta, kept.examples, lab, cfg.trainable)).trace;
  r.baseline = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, cfg.trainable)).trace;
  r.check("filtered_sigma_c_non_decreasing", non_decreasing(r.trace.column(&TraceRow::sigma_c_C)));
  report_shape(r, "baseline_sigma_c_CS", *r.baseline, &TraceRow::sigma_c_CS);
}

inline void run_augment(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  if (lab.testset.empty()) throw ConfigError("key 'n_test': augment needs conflict tests");
  std::vector<Example> augmented = lab.mixture.examples;
  augmented.insert(augmented.end(), lab.augmentation.begin(), lab.augmentation.end());
  r.trace = train(lab.state, make_spec(cfg, *r.eta, augmented, lab, cfg.trainable)).trace;
  r.baseline = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, cfg.trainable)).trace;
  const auto base = analyze_peak(r.baseline->column(&TraceRow::M_C));
  const auto aug = analyze_peak(r.trace.column(&TraceRow::M_C));
  r.metrics["augmentation_count"] = lab.augmentation.size();
  r.metrics["baseline_decline"] = base.decline;
  r.metrics["augmented_decline"] = aug.decline;
  r.metrics["baseline_peak_step"] = base.peak;
  r.metrics["augmented_peak_step"] = aug.peak;
  if (lab.augmentation.empty()) {
    r.skip("augmented_decline_smaller", "no augmentation examples");
  } else {
    r.check("augmented_decline_smaller", aug.decline < base.decline,
            show(aug.decline) + " vs baseline " + show(base.decline));
  }
}

inline void run_qk_only(ExperimentResult& r, const ExperimentConfig& cfg, const Lab& lab) {
  r.trace = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, {true, false})).trace;
  r.baseline = train(lab.state, make_spec(cfg, *r.eta, lab.mixture.examples, lab, {true, true})).trace;
  const auto& ref = r.trace.rows.front().subject_predictiveness;
  const bool frozen = std::all_of(r.trace.rows.begin(), r.trace.rows.end(),
                                  [&](const TraceRow& row) { return row.subject_predictiveness == ref; });
  r.check("qk_only_subject_predictiveness_fixed", frozen);
  const auto& before = r.baseline->rows[0].subject_predictiveness;
  const auto& after = r.baseline->rows[1].subject_predictiveness;
  double min_gain = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < before.size(); ++i) min_gain = std::min(min_gain, after[i] - before[i]);
  r.metrics["joint_min_gain_step1"] = num_or_null(min_gain);
  r.check("joint_subject_predictiveness_increases", !before.empty() && min_gain > 0.0, "min gain " + show(min_gain));
}

}  // namespace detail

/// Builds the lab and runs the named experiment. Throws on config or
/// divergence errors; property failures are recorded in the checks.
inline ExperimentResult run_named_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const Lab lab = build_lab(cfg.lab);
  ExperimentResult r;
  r.experiment = cfg.experiment;
  r.config = config_echo(cfg);
  const auto choice = detail::resolve_eta(cfg, lab);
  r.eta = choice.eta;
  r.eta_searched = choice.searched;
  if (choice.searched) {
    r.check("eta_star_found", choice.eta.has_value(),
            choice.eta ? "eta* = " + detail::show(*choice.eta) : "no grid rate flips both projections");
    if (!choice.eta) return r;
  }
  if (cfg.experiment == "prop1") detail::run_prop1(r, cfg, lab);
  else if (cfg.experiment == "theorem1") detail::run_theorem1(r, cfg, lab);
  else if (cfg.experiment == "prop2") detail::run_prop2(r, cfg, lab);
  else if (cfg.experiment == "prop3") detail::run_prop3(r, cfg, lab);
  else if (cfg.experiment == "filter") detail::run_filter(r, cfg, lab);
  else if (cfg.experiment == "augment") detail::run_augment(r, cfg, lab);
  else if (cfg.experiment == "qk-only") detail::run_qk_only(r, cfg, lab);
  else throw ConfigError("key 'experiment': unknown experiment '" + cfg.experiment + "'");
  return r;
}

inline void write_plots(std::ostream& os, const ExperimentResult& r) {
  svg::Panel attention{"attention to context", "mean sigma_c", {}};
  attention.series.push_back({"C", r.trace.column(&TraceRow::sigma_c_C), "#1f77b4"});
  attention.series.push_back({"C+S", r.trace.column(&TraceRow::sigma_c_CS), "#d62728"});
  svg::Panel conflict{"conflict metric", "M_C", {}};
  conflict.series.push_back({"M_C", r.trace.column(&TraceRow::M_C), "#2ca02c"});
  if (r.baseline) {
    attention.series.push_back({"C (baseline)", r.baseline->column(&TraceRow::sigma_c_C), "#9ecae1"});
    attention.series.push_back({"C+S (baseline)", r.baseline->column(&TraceRow::sigma_c_CS), "#fcae91"});
    conflict.series.push_back({"M_C (baseline)", r.baseline->column(&TraceRow::M_C), "#a1d99b"});
  }
  svg::write_panels(os, {attention, conflict});
}

struct RunOutcome {
  int exit_code = kExitPass;
  std::string message;
  std::optional<ExperimentResult> result;
};

/// Runs one experiment and writes trace.csv, summary.json and (optionally)
/// plots.svg into `out_dir`.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  RunOutcome out;
  try {
    out.result = run_named_experiment(cfg);
  } catch (const DivergenceError& e) {
    out.exit_code = kExitDivergence;
    out.message = std::string("numerical divergence: ") + e.what();
  } catch (const ParamError& e) {
    out.exit_code = kExitConfigError;
    out.message = e.what();
  } catch (const ConfigError& e) {
    out.exit_code = kExitConfigError;
    out.message = std::string("config error: ") + e.what();
  } catch (const DatasetError& e) {
    out.exit_code = kExitConfigError;
    out.message = std::string("config error: ") + e.what();
  } catch (const DimensionError& e) {
    out.exit_code = kExitConfigError;
    out.message = std::string("config error: ") + e.what();
  }

  std::filesystem::create_directories(out_dir);
  if (!out.result) {
    std::ofstream(out_dir / "summary.json") << nlohmann::json{{"experiment", cfg.experiment},
                                                              {"config", config_echo(cfg)},
                                                              {"error", out.message},
                                                              {"exit_code", out.exit_code},
                                                              {"pass", false}}
                                                   .dump(2)
                                            << '\n';
    return out;
  }
  const ExperimentResult& r = *out.result;
  {
    std::ofstream csv(out_dir / "trace.csv");
    write_trace_csv(csv, r.trace);
  }
  std::ofstream(out_dir / "summary.json") << r.summary().dump(2) << '\n';
  if (cfg.plots && !r.trace.rows.empty()) {
    std::ofstream svg_out(out_dir / "plots.svg");
    write_plots(svg_out, r);
  }
  out.exit_code = r.pass() ? kExitPass : kExitPropertyFailure;
  return out;
}

inline void print_checks(std::ostream& os, const ExperimentResult& r) {
  for (const auto& c : r.checks) {
    char line[160];
    std::snprintf(line, sizeof line, "%-40s %-7s ", c.name.c_str(), std::string(to_string(c.status)).c_str());
    os << line << c.detail << '\n';
  }
}

// ---- oracle battery ----

struct VerifyRow {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<VerifyRow> rows;
  bool pass() const {
    return std::all_of(rows.begin(), rows.end(), [](const VerifyRow& r) { return r.pass; });
  }
  void print(std::ostream& os) const {
    for (const auto& r : rows) {
      char line[160];
      std::snprintf(line, sizeof line, "%-36s %-5s ", r.name.c_str(), r.pass ? "PASS" : "FAIL");
      os << line << r.detail << '\n';
    }
    os << (pass() ? "all oracle checks passed" : "oracle checks FAILED") << '\n';
  }
};

/// Runs every oracle: embedding geometry, the value solve, gradient checks
/// and the closed-form cross-checks. `perturb_wv` adds N(0, amp^2) noise to the
/// pretrained W_V first (fault injection).
inline VerifyReport verify(const ExperimentConfig& cfg, std::optional<double> perturb_wv = std::nullopt) {
  validate_config(cfg);
  VerifyReport rep;
  auto row = [&](std::string name, bool ok, std::string detail) {
    rep.rows.push_back({std::move(name), ok, std::move(detail)});
  };
  using detail::show;
  Lab lab = build_lab(cfg.lab);
  const TokenSpace& space = *lab.space;
  std::mt19937_64 rng(cfg.seed() + 101);
  if (perturb_wv) {
    std::normal_distribution<double> noise(0.0, *perturb_wv);
    for (Eigen::Index i = 0; i < lab.state.wv.size(); ++i) lab.state.wv.data()[i] += noise(rng);
  }

  {
    const Matrix& phi = space.embeddings();
    const Matrix gram = phi.transpose() * phi;
    double worst = 0.0;
    for (int a = 0; a < space.num_tokens(); ++a) {
      for (int b = 0; b < space.num_tokens(); ++b) {
        const auto ka = space.kind(TokenId{a}), kb = space.kind(TokenId{b});
        const double expected = a == b ? 1.0 : (ka == kb && ka != TokenKind::Relation ? 0.5 : 0.0);
        worst = std::max(worst, std::abs(gram(a, b) - expected));
      }
    }
    const Vector r = space.embedding(space.relation());
    const double theta = std::abs(space.theta_subject().dot(r)) + std::abs(space.theta_context().dot(r)) +
                         std::abs(space.theta_subject().dot(space.theta_context()));
    row("embedding_geometry", worst <= 1e-15 && theta == 0.0, "max Gram deviation " + show(worst));
  }
  {
    const Matrix& phi = space.embeddings();
    const ValueTable table = build_value_table(lab.params, lab.facts);
    const double res = (phi.transpose() * lab.state.wv * phi - table.values).cwiseAbs().maxCoeff();
    row("value_table_residual", res <= 1e-9, "max residual " + show(res));
  }
  {
    // random small models, full central differences
    double worst_kq = 0.0, worst_v = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const int ks = 2 + trial % 3, ka = 2 + trial % 4;
      const auto small = make_token_space(ks, ka, ks + ka + 3 + trial % 3);
      std::normal_distribution<double> normal(0.0, 0.5);
      ModelState s = ModelState::zeros(small);
      for (Eigen::Index i = 0; i < s.wkq.size(); ++i) s.wkq.data()[i] = normal(rng);
      for (Eigen::Index i = 0; i < s.wv.size(); ++i) s.wv.data()[i] = normal(rng);
      std::uniform_int_distribution<int> subj(0, small->num_subjects() - 1), ans(0, small->num_answers() - 1),
          lbl(0, small->num_tokens() - 1);
      const std::vector<Example> data{
          Example::with_context(small->answer(ans(rng)), small->subject(subj(rng)), small->relation(),
                                TokenId{lbl(rng)}, Category::C),
          Example::fact(small->subject(subj(rng)), small->relation(), TokenId{lbl(rng)}, Category::SSeen)};
      worst_kq = std::max(worst_kq, max_relative_error(grad_wkq(s, data),
                                                       finite_diff_grad(s, data, WeightKind::KQ, 1e-5)));
      worst_v = std::max(worst_v, max_relative_error(grad_wv(s, data),
                                                     finite_diff_grad(s, data, WeightKind::V, 1e-5)));
    }
    // the lab model itself, on sampled entries including the invariant directions
    const int d = space.dim();
    const int tc = space.num_subjects() + space.num_answers() + 1, ts = tc - 1, rq = tc + 1;
    std::vector<std::pair<int, int>> entries{{tc, rq}, {ts, rq}};
    std::uniform_int_distribution<int> idx(0, d - 1);
    for (int k = 0; k < 30; ++k) entries.emplace_back(idx(rng), k % 2 ? rq : idx(rng));
    std::vector<Example> batch(lab.mixture.examples.begin(), lab.mixture.examples.begin() + 2);
    batch.push_back(lab.mixture.examples.back());
    auto pick = [&](const Matrix& full) {
      Matrix out = Matrix::Zero(full.rows(), full.cols());
      for (auto [i, j] : entries) out(i, j) = full(i, j);
      return out;
    };
    worst_kq = std::max(worst_kq, max_relative_error(pick(grad_wkq(lab.state, batch)),
                                                     finite_diff_grad(lab.state, batch, WeightKind::KQ, 1e-5, entries)));
    worst_v = std::max(worst_v, max_relative_error(pick(grad_wv(lab.state, batch)),
                                                   finite_diff_grad(lab.state, batch, WeightKind::V, 1e-5, entries)));
    row("grad_wkq_finite_difference", worst_kq < 1e-6, "max relative error " + show(worst_kq));
    row("grad_wv_finite_difference", worst_v < 1e-6, "max relative error " + show(worst_v));
  }
  {
    const Matrix& phi = space.embeddings();
    const Matrix table = phi.transpose() * lab.state.wv * phi;
    const auto v0 = theory::closed_form_v0(lab.params);
    double e_cc = 0.0, e_cs = 0.0, e_oc = 0.0;
    for (int j = 0; j < space.num_answers(); ++j) {
      const int c = space.answer(j).value;
      e_cc = std::max(e_cc, std::abs(table(c, c) - v0.v0_cc));
    }
    for (TokenId s : lab.facts.memorized_subjects()) {
      e_cs = std::max(e_cs, std::abs(table(lab.facts.answer(s).value, s.value) - v0.v0_cs_memorized));
    }
    for (TokenId s : lab.facts.fresh_subjects()) {
      e_oc = std::max(e_oc, std::abs(table(lab.facts.answer(s).value, s.value) - v0.o_c));
    }
    row("v0_context_self_closed_form", e_cc <= detail::kOracleTol, "max error " + show(e_cc));
    row("v0_memorized_closed_form", e_cs <= detail::kOracleTol, "max error " + show(e_cs));
    row("v0_baseline_closed_form", e_oc <= detail::kOracleTol, "max error " + show(e_oc));
  }
  const auto m = theory::closed_form_m(lab.params);
  {
    double e_c = 0.0, e_cs = 0.0;
    for (const auto& ex : lab.mixture.examples) {
      if (ex.category == Category::C) e_c = std::max(e_c, std::abs(attention_signal(lab.state, ex) - m.m_C));
      if (ex.category == Category::CS) e_cs = std::max(e_cs, std::abs(attention_signal(lab.state, ex) - m.m_CS));
    }
    row("m_C_closed_form", e_c <= detail::kOracleTol, "max error " + show(e_c));
    row("m_CS_closed_form", e_cs <= detail::kOracleTol, "max error " + show(e_cs));
    row("m_signs", m.m_C > 0.0 && m.m_CS < 0.0, "m_C " + show(m.m_C) + ", m_CS " + show(m.m_CS));
    row("m_ordering", std::abs(m.m_C) > std::abs(m.m_CS), "");
  }
  if (detail::even_split(cfg)) {
    const int n = cfg.lab.counts.n_C + cfg.lab.counts.n_CS;
    const auto eta = cfg.eta ? cfg.eta : find_eta_star(lab.state, lab.mixture);
    if (!eta) {
      row("t1_attention_prediction", false, "no eta* on the grid");
    } else {
      try {
        const auto pred = theory::predict_t1_attention(lab.params, n, *eta);
        ModelState next = lab.state;
        next.wkq += *eta * grad_wkq(lab.state, lab.mixture);
        double err = 0.0;
        for (const auto& ex : lab.mixture.examples) {
          const double want = ex.category == Category::C ? pred.sigma_c_C : pred.sigma_c_CS;
          err = std::max(err, std::abs(attention_weights(next, ex).context - want));
        }
        row("t1_attention_prediction", err <= detail::kOracleTol, "eta " + show(*eta) + ", max error " + show(err));
      } catch (const Error& e) {
        row("t1_attention_prediction", false, e.what());
      }
    }
  }
  return rep;
}

// ---- sweeps ----

struct SweepPoint {
  std::vector<std::pair<std::string, std::string>> settings;
};

inline std::vector<SweepPoint> sweep_grid(const ExperimentConfig& cfg) {
  if (cfg.sweep.empty()) throw ConfigError("sweep needs at least one 'sweep.<key> = ...' line");
  std::vector<SweepPoint> grid{SweepPoint{}};
  for (const auto& [key, values] : cfg.sweep) {
    if (values.empty()) throw ConfigError("key 'sweep." + key + "': empty sweep range");
    std::vector<SweepPoint> next;
    for (const auto& point : grid) {
      for (const auto& v : values) {
        SweepPoint p = point;
        p.settings.emplace_back(key, v);
        next.push_back(std::move(p));
      }
    }
    grid = std::move(next);
  }
  return grid;
}

struct SweepRun {
  SweepPoint point;
  std::string dir;
  int exit_code = 0;
  std::string message;
  nlohmann::json metrics = nlohmann::json::object();
  std::optional<double> eta;
};

struct SweepOutcome {
  std::vector<SweepRun> runs;
  int exit_code = kExitPass;
};

/// One run per grid point in `out_dir/run_NNN`, plus aggregate.csv and
/// sweep.json. Independent runs execute on up to `jobs` threads; failures are
/// recorded and do not stop the sweep.
inline SweepOutcome run_sweep(const ExperimentConfig& cfg, const std::filesystem::path& out_dir, int jobs,
                              std::ostream* log = nullptr) {
  const auto grid = sweep_grid(cfg);
  std::filesystem::create_directories(out_dir);
  SweepOutcome out;
  out.runs.resize(grid.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      SweepRun& run = out.runs[i];
      run.point = grid[i];
      char name[32];
      std::snprintf(name, sizeof name, "run_%03zu", i);
      run.dir = name;
      ExperimentConfig c = cfg;
      c.sweep.clear();
      try {
        for (const auto& [k, v] : run.point.settings) apply_setting(c, k, v);
        c.lab.params.n = c.lab.counts.n_C + c.lab.counts.n_CS;
        const auto res = run_experiment(c, out_dir / name);
        run.exit_code = res.exit_code;
        run.message = res.message;
        if (res.result) {
          run.metrics = res.result->metrics;
          run.eta = res.result->eta;
          for (const auto& chk : res.result->checks) {
            if (chk.status == Check::Status::Fail) run.message += (run.message.empty() ? "" : "; ") + chk.name;
          }
        }
      } catch (const std::exception& e) {
        run.exit_code = kExitConfigError;
        run.message = e.what();
      }
      if (log) {
        std::lock_guard<std::mutex> lock(log_mutex);
        *log << name;
        for (const auto& [k, v] : run.point.settings) *log << ' ' << k << '=' << v;
        *log << " -> exit " << run.exit_code << (run.message.empty() ? "" : " (" + run.message + ")") << '\n';
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(grid.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  // aggregate.csv: swept values, status, then the union of scalar metrics
  std::set<std::string> metric_keys;
  for (const auto& run : out.runs)
    for (const auto& [k, v] : run.metrics.items())
      if (v.is_number() || v.is_null()) metric_keys.insert(k);
  {
    std::ofstream csv(out_dir / "aggregate.csv");
    csv << "run";
    for (const auto& [k, _] : cfg.sweep) csv << ',' << k;
    csv << ",exit_code,pass,eta";
    for (const auto& k : metric_keys) csv << ',' << k;
    csv << '\n';
    for (const auto& run : out.runs) {
      csv << run.dir;
      for (const auto& [_, v] : run.point.settings) csv << ',' << v;
      csv << ',' << run.exit_code << ',' << (run.exit_code == 0 ? "true" : "false") << ','
          << (run.eta ? format_double(*run.eta) : "");
      for (const auto& k : metric_keys) {
        csv << ',';
        if (run.metrics.contains(k) && run.metrics[k].is_number()) {
          csv << format_double(run.metrics[k].get<double>());
        }
      }
      csv << '\n';
    }
  }

  nlohmann::json summary;
  summary["experiment"] = cfg.experiment;
  summary["config"] = config_echo(cfg);
  nlohmann::json runs = nlohmann::json::array();
  std::optional<std::size_t> first_failure;
  for (std::size_t i = 0; i < out.runs.size(); ++i) {
    const auto& run = out.runs[i];
    nlohmann::json settings = nlohmann::json::object();
    for (const auto& [k, v] : run.point.settings) settings[k] = v;
    runs.push_back({{"dir", run.dir}, {"settings", settings}, {"exit_code", run.exit_code}, {"message", run.message}});
    if (run.exit_code != 0 && !first_failure) first_failure = i;
    if (run.exit_code != 0) out.exit_code = kExitPropertyFailure;
  }
  summary["runs"] = runs;
  summary["first_failure"] = first_failure ? nlohmann::json(out.runs[*first_failure].dir) : nlohmann::json(nullptr);

  // augmentation sweeps: the largest ratio must decline less than the smallest
  if (cfg.experiment == "augment" && cfg.sweep.size() == 1 && cfg.sweep[0].first == "aug_ratio") {
    auto ratio = [](const SweepRun& r) { return std::stod(r.point.settings.front().second); };
    const auto [lo_it, hi_it] = std::minmax_element(
        out.runs.begin(), out.runs.end(), [&](const SweepRun& a, const SweepRun& b) { return ratio(a) < ratio(b); });
    const auto& lo = lo_it->metrics;
    const auto& hi = hi_it->metrics;
    const bool ok = lo.contains("augmented_decline") && hi.contains("augmented_decline") &&
                    hi["augmented_decline"].get<double>() < lo["augmented_decline"].get<double>();
    summary["endpoint_check"] = {{"name", "decline_decreases_with_aug_ratio"}, {"pass", ok}};
    if (!ok) out.exit_code = kExitPropertyFailure;
  }
  std::ofstream(out_dir / "sweep.json") << summary.dump(2) << '\n';
  return out;
}

}  // namespace ctxinv
