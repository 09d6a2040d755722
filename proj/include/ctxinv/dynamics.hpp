#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ctxinv/errors.hpp"
#include "ctxinv/model.hpp"

namespace ctxinv {

struct Trainable {
  bool kq = true;
  bool v = false;

  bool operator==(const Trainable&) const = default;
};

inline std::string to_string(Trainable t) {
  if (t.kq && t.v) return "KQ,V";
  if (t.kq) return "KQ";
  if (t.v) return "V";
  return "";
}

struct TrainSpec {
  std::optional<double> eta;  // nullopt: search with find_eta_star
  int steps = 50;
  Trainable trainable;
  std::vector<Example> dataset;
  std::vector<Example> testset;

  void validate() const {
    if (eta && !(*eta >= 0.0 && std::isfinite(*eta))) throw ParamError("learning rate must be finite and >= 0");
    if (steps < 1) throw ParamError("steps must be >= 1");
    if (!trainable.kq && !trainable.v) throw ParamError("trainable set is empty");
    if (dataset.empty()) throw DatasetError("training set is empty");
  }
};

/// Diagnostics at one step, measured before that step's update. Quantities
/// for an absent category are NaN.
struct TraceRow {
  int step = 0;
  double loss_total = 0.0;
  double loss_C = 0.0;
  double loss_CS = 0.0;
  double loss_S = 0.0;
  double sigma_c_C = 0.0;
  double sigma_c_CS = 0.0;
  double grad_proj_thetaC = 0.0;
  double grad_proj_thetaS = 0.0;
  double M_C = 0.0;
  double m_C_numeric = 0.0;
  double m_CS_numeric = 0.0;
  std::vector<double> subject_predictiveness;  // softmax(v(s))_c per C example, dataset order
};

struct DynamicsTrace {
  double eta = 0.0;
  Trainable trainable;
  std::vector<TraceRow> rows;

  std::vector<double> column(double TraceRow::*field) const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(r.*field);
    return out;
  }
};

struct GradientProjections {
  double theta_C = 0.0;  // theta_C^T (-grad_KQ L) phi(r)
  double theta_S = 0.0;
};

inline GradientProjections project_kq_gradient(const TokenSpace& space, const Matrix& neg_grad) {
  const Vector query = space.embedding(space.relation());
  return {project_bilinear(neg_grad, space.theta_context(), query),
          project_bilinear(neg_grad, space.theta_subject(), query)};
}

inline GradientProjections gradient_projections(const ModelState& state, std::span<const Example> data,
                                                Reduction reduction = Reduction::Mean) {
  return project_kq_gradient(state.space(), grad_wkq(state, data, reduction));
}

/// Mean over the test set of softmax(z)_c / (softmax(z)_c + softmax(z)_a).
inline double eval_conflict_metric(const ModelState& state, std::span<const Example> tests) {
  if (tests.empty()) throw DatasetError("conflict metric needs a nonempty test set");
  double total = 0.0;
  for (const auto& t : tests) {
    if (!t.context) throw DatasetError("conflict examples need a context");
    const Vector z = forward_last_token(state, t);
    // softmax ratio of two entries is a logistic in their logit gap
    total += 1.0 / (1.0 + std::exp(z(t.label.value) - z(t.context->value)));
  }
  return total / static_cast<double>(tests.size());
}

/// <v(c) - v(s), e_c - softmax(z)> for a context example.
inline double attention_signal(const ModelState& state, const Example& ex) {
  if (!ex.context) throw DatasetError("attention signal needs a context");
  const Vector diff = value_logits(state, *ex.context) - value_logits(state, ex.subject);
  Vector residual = -detail::softmax(forward_last_token(state, ex));
  residual(ex.context->value) += 1.0;
  return diff.dot(residual);
}

namespace detail {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Mean {
  double sum = 0.0;
  int count = 0;
  void add(double x) {
    sum += x;
    ++count;
  }
  double get() const { return count ? sum / count : kNaN; }
};

inline TraceRow diagnostics(const ModelState& state, std::span<const Example> data,
                            std::span<const Example> tests, const Matrix& neg_grad_kq) {
  TraceRow row;
  row.step = state.timestep;
  Mean loss, loss_c, loss_cs, loss_s, sig_c, sig_cs, m_c, m_cs;
  for (const auto& ex : data) {
    const auto f = forward(state, ex);
    loss.add(f.loss);
    switch (ex.category) {
      case Category::C:
        loss_c.add(f.loss);
        sig_c.add(f.sigma[0]);
        m_c.add(attention_signal(state, ex));
        row.subject_predictiveness.push_back(subject_predictiveness(state, ex.subject, ex.label));
        break;
      case Category::CS:
        loss_cs.add(f.loss);
        sig_cs.add(f.sigma[0]);
        m_cs.add(attention_signal(state, ex));
        break;
      case Category::SSeen:
      case Category::SUnseen:
        loss_s.add(f.loss);
        break;
      default:
        break;
    }
  }
  row.loss_total = loss.get();
  row.loss_C = loss_c.get();
  row.loss_CS = loss_cs.get();
  row.loss_S = loss_s.get();
  row.sigma_c_C = sig_c.get();
  row.sigma_c_CS = sig_cs.get();
  const auto proj = project_kq_gradient(state.space(), neg_grad_kq);
  row.grad_proj_thetaC = proj.theta_C;
  row.grad_proj_thetaS = proj.theta_S;
  row.M_C = tests.empty() ? kNaN : eval_conflict_metric(state, tests);
  row.m_C_numeric = m_c.get();
  row.m_CS_numeric = m_cs.get();
  return row;
}

}  // namespace detail

/// Geometric grid lo, lo*factor, ... up to and including hi (within rounding).
inline std::vector<double> geometric_grid(double lo, double hi, double factor) {
  if (!(lo > 0.0 && hi >= lo && factor > 1.0)) throw ParamError("invalid geometric grid");
  std::vector<double> grid;
  for (double x = lo; x <= hi * (1.0 + 1e-12); x *= factor) grid.push_back(x);
  return grid;
}

inline std::vector<double> default_eta_grid() { return geometric_grid(1e-2, 1e4, 2.0); }

constexpr double kSignFloor = 1e-12;

/// Smallest grid rate whose single W_KQ step (W_V frozen) flips both
/// projections: theta_C < 0 and theta_S > 0 at t = 1.
inline std::optional<double> find_eta_star(const ModelState& state, std::span<const Example> data,
                                           std::span<const double> grid) {
  if (grid.empty()) throw ParamError("learning-rate grid is empty");
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] > grid[i - 1])) throw ParamError("learning-rate grid must be ascending");
  }
  const Matrix g0 = grad_wkq(state, data);
  for (double eta : grid) {
    ModelState next = state;
    next.wkq += eta * g0;
    const auto p = gradient_projections(next, data);
    if (p.theta_C < -kSignFloor && p.theta_S > kSignFloor) return eta;
  }
  return std::nullopt;
}

inline std::optional<double> find_eta_star(const ModelState& state, std::span<const Example> data) {
  const auto grid = default_eta_grid();
  return find_eta_star(state, data, grid);
}

struct TrainResult {
  ModelState state;
  DynamicsTrace trace;
};

/// Full-batch gradient descent on the mean loss. Row t of the trace holds the
/// diagnostics of the state before update t, so there are steps + 1 rows.
inline TrainResult train(ModelState state, const TrainSpec& spec) {
  spec.validate();
  double eta = 0.0;
  if (spec.eta) {
    eta = *spec.eta;
  } else {
    const auto found = find_eta_star(state, spec.dataset);
    if (!found) throw ParamError("eta = auto: no grid learning rate produces the second-phase sign flip");
    eta = *found;
  }

  TrainResult out{std::move(state), {eta, spec.trainable, {}}};
  ModelState& s = out.state;
  for (int t = 0; t <= spec.steps; ++t) {
    const Matrix gkq = grad_wkq(s, spec.dataset);
    out.trace.rows.push_back(detail::diagnostics(s, spec.dataset, spec.testset, gkq));
    const TraceRow& row = out.trace.rows.back();
    if (!std::isfinite(row.loss_total) || !gkq.allFinite()) {
      throw DivergenceError("non-finite loss or gradient at step " + std::to_string(t) +
                            " (eta = " + std::to_string(eta) + ")");
    }
    if (t == spec.steps) break;
    if (spec.trainable.v) {
      const Matrix gv = grad_wv(s, spec.dataset);
      s.wv += eta * gv;
    }
    if (spec.trainable.kq) s.wkq += eta * gkq;
    ++s.timestep;
    if (!all_finite(s)) throw DivergenceError("non-finite weights after step " + std::to_string(t));
  }
  return out;
}

inline constexpr const char* kTraceColumns =
    "step,loss_total,loss_C,loss_CS,loss_S,sigma_c_C,sigma_c_CS,grad_proj_thetaC,grad_proj_thetaS,M_C,"
    "m_C_numeric,m_CS_numeric";

/// 17 significant digits, enough to round-trip any double; NaN prints as "nan".
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline void write_trace_csv(std::ostream& os, const DynamicsTrace& trace) {
  os << kTraceColumns << '\n';
  for (const auto& r : trace.rows) {
    os << r.step;
    for (double x : {r.loss_total, r.loss_C, r.loss_CS, r.loss_S, r.sigma_c_C, r.sigma_c_CS, r.grad_proj_thetaC,
                     r.grad_proj_thetaS, r.M_C, r.m_C_numeric, r.m_CS_numeric}) {
      os << ',' << format_double(x);
    }
    os << '\n';
  }
}

// ---- trajectory shape ----

struct PeakDecline {
  int peak = 0;             // first index of the maximum
  double peak_value = 0.0;
  int decreasing_run = 0;   // consecutive strict decreases right after the peak
  double decline = 0.0;     // peak value minus final value
};

inline PeakDecline analyze_peak(std::span<const double> series, double floor = kSignFloor) {
  if (series.empty()) throw Error("empty series");
  PeakDecline out;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i] > series[out.peak]) out.peak = static_cast<int>(i);
  }
  out.peak_value = series[out.peak];
  for (std::size_t i = out.peak + 1; i < series.size() && series[i] < series[i - 1] - floor; ++i) {
    ++out.decreasing_run;
  }
  out.decline = out.peak_value - series.back();
  return out;
}

inline bool non_decreasing(std::span<const double> series, double floor = kSignFloor) {
  for (std::size_t i = 1; i < series.size(); ++i) {
    if (!(series[i] >= series[i - 1] - floor)) return false;
  }
  return true;
}

// ---- more attention to the subject ----

struct Prop2Result {
  GradientProjections old_proj;  // summed loss over the base set
  GradientProjections new_proj;  // base set plus the subject-only points
  double s_contribution_measured = 0.0;  // new theta_S minus old theta_S
  double s_contribution_formula = 0.0;   // sum of sigma_s sigma_r (v(a,s) - v(a,r)) (1 - p_a) / sqrt 2
};

inline double s_point_contribution(const ModelState& state, const Example& ex) {
  if (ex.context) throw DatasetError("subject-only contribution needs a [s, r] example");
  const auto w = attention_weights(state, ex);
  const Vector z = forward_last_token(state, ex);
  const double p_a = detail::softmax(z)(ex.label.value);
  const Vector vs = value_logits(state, ex.subject);
  const Vector vr = value_logits(state, ex.relation);
  return std::sqrt(0.5) * w.subject * w.relation * (vs(ex.label.value) - vr(ex.label.value)) * (1.0 - p_a);
}

/// Gradient projections of the summed loss with and without memorized
/// subject-only points. Summing (not averaging) keeps the base examples'
/// weight fixed, so the theta_C projection is unchanged.
inline Prop2Result run_prop2_experiment(const ModelState& state, std::span<const Example> base,
                                        std::span<const Example> s_points) {
  if (s_points.empty()) throw DatasetError("need at least one subject-only point");
  std::vector<Example> extended(base.begin(), base.end());
  extended.insert(extended.end(), s_points.begin(), s_points.end());
  Prop2Result out;
  out.old_proj = gradient_projections(state, base, Reduction::Sum);
  out.new_proj = gradient_projections(state, extended, Reduction::Sum);
  out.s_contribution_measured = out.new_proj.theta_S - out.old_proj.theta_S;
  for (const auto& ex : s_points) out.s_contribution_formula += s_point_contribution(state, ex);
  return out;
}

// ---- value step makes subjects predictive ----

struct Prop3Delta {
  Example example;
  double before = 0.0;  // softmax(v(s))_c at W_V^(0)
  double after = 0.0;   // same after one W_V step
  double delta() const { return after - before; }
};

/// One W_V gradient step at the state's attention (W_KQ untouched); reports
/// subject predictiveness of every C example before and after.
inline std::vector<Prop3Delta> run_prop3_experiment(const ModelState& state, std::span<const Example> data,
                                                    double eta) {
  ModelState next = state;
  next.wv += eta * grad_wv(state, data);
  std::vector<Prop3Delta> out;
  for (const auto& ex : data) {
    if (ex.category != Category::C) continue;
    out.push_back({ex, subject_predictiveness(state, ex.subject, ex.label),
                   subject_predictiveness(next, ex.subject, ex.label)});
  }
  if (out.empty()) throw DatasetError("dataset has no C examples");
  return out;
}

/// d/d(eta) of softmax(v(s))_c along the W_V step direction, at eta = 0:
/// p_c (e_c - p)^T Phi^T G phi(s).
inline std::vector<double> prop3_first_order(const ModelState& state, std::span<const Example> data) {
  const Matrix& phi = state.space().embeddings();
  const Matrix g = grad_wv(state, data);
  std::vector<double> out;
  for (const auto& ex : data) {
    if (ex.category != Category::C) continue;
    const Vector p = detail::softmax(value_logits(state, ex.subject));
    Vector dir = -p;
    dir(ex.label.value) += 1.0;
    const Vector dz = phi.transpose() * (g * phi.col(ex.subject.value));
    out.push_back(p(ex.label.value) * dir.dot(dz));
  }
  return out;
}

}  // namespace ctxinv
