#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "safeflow/error.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/integrator.hpp"
#include "safeflow/problem.hpp"

namespace safeflow {

namespace detail {

inline double need(const std::optional<double>& value, const char* symbol) {
  if (!value) {
    throw SolverError(ErrorCode::kMissingConstant,
                      std::string("problem does not declare ") + symbol);
  }
  return *value;
}

// Lipschitz modulus times gradient bound; a zero modulus makes the bound
// irrelevant, so it may be absent.
inline double modulus_times_bound(const std::optional<double>& modulus,
                                  const char* modulus_symbol,
                                  const std::optional<double>& bound,
                                  const char* bound_symbol) {
  const double mod = need(modulus, modulus_symbol);
  if (mod == 0.0) return 0.0;
  return mod * need(bound, bound_symbol);
}

}  // namespace detail

/// Weight on the accumulated surrogate-gradient integral:
/// c = mu_g^2 / (mu_g^2 + L_yx^2).
inline double constant_c(const BilevelProblem& problem) {
  const double mu = detail::need(problem.constants.mu_g, "mu_g");
  const double lyx = detail::need(problem.constants.l_yx_g, "L_yx_g");
  return mu * mu / (mu * mu + lyx * lyx);
}

/// Dual bound used as the barrier weight of the safe-gradient-flow energy:
/// beta = (C_yx^g C_x^f + C_yy^g C_y^f + alpha |grad_y g(x0, y0)|) / mu_g^2.
inline double constant_beta(const BilevelProblem& problem, double alpha,
                            const SolverState& state0) {
  const auto& k = problem.constants;
  const double mu = detail::need(k.mu_g, "mu_g");
  const double coupling =
      detail::modulus_times_bound(k.c_yx_g, "C_yx_g", k.c_x_f, "C_x_f") +
      detail::modulus_times_bound(k.c_yy_g, "C_yy_g", k.c_y_f, "C_y_f");
  const double g0 = problem.eval_lower(state0.x, state0.y, false).grad_y.norm();
  return (coupling + alpha * g0) / (mu * mu);
}

/// E(t) sampled on trajectory snapshots, with its additive components.
/// values[k] = objective_gap[k] + barrier[k] + integral[k].
struct EnergySeries {
  std::vector<double> times;
  std::vector<double> values;
  std::vector<double> objective_gap;
  std::vector<double> barrier;
  std::vector<double> integral;
  std::vector<double> tracking;  // |F - grad l|^2, prediction-correction only
  double beta = 0.0;
  double c = 0.0;
  double f_ref = 0.0;

  std::size_t size() const { return values.size(); }
};

namespace detail {

// Shared body of the energies that integrate c |F|^2 by the trapezoid rule.
inline EnergySeries surrogate_energy(const Trajectory& traj,
                                     const BilevelProblem& problem, double c,
                                     double beta, double f_ref) {
  EnergySeries e;
  e.beta = beta;
  e.c = c;
  e.f_ref = f_ref;
  double accumulated = 0.0;
  double prev_sq = 0.0;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const auto& s = traj.snapshots[k].state;
    const double f = problem.upper(s.x, s.y).value;
    const double gnorm = problem.lower(s.x, s.y, false).grad_y.norm();
    const double f_sq = surrogate_hypergradient(problem, s.x, s.y).squaredNorm();
    if (k > 0) {
      const double dt = s.t - traj.snapshots[k - 1].state.t;
      accumulated += c * 0.5 * dt * (prev_sq + f_sq);
    }
    prev_sq = f_sq;
    e.times.push_back(s.t);
    e.objective_gap.push_back(f - f_ref);
    e.barrier.push_back(beta * gnorm);
    e.integral.push_back(accumulated);
    e.values.push_back(e.objective_gap.back() + e.barrier.back() + accumulated);
  }
  return e;
}

}  // namespace detail

/// Energy certifying the safe gradient flow:
///   f - f_ref + beta |grad_y g| + c int |F|^2.
inline EnergySeries energy_sgf(const Trajectory& traj,
                               const BilevelProblem& problem, double alpha,
                               double f_ref) {
  require(traj.size() > 0, "empty trajectory");
  const double c = constant_c(problem);
  const double beta = constant_beta(problem, alpha, traj.front().state);
  return detail::surrogate_energy(traj, problem, c, beta, f_ref);
}

/// Energy certifying the relaxed flow: f - f_ref + c int |F|^2.
inline EnergySeries energy_rxgf(const Trajectory& traj,
                                const BilevelProblem& problem,
                                double f_eps_ref) {
  require(traj.size() > 0, "empty trajectory");
  return detail::surrogate_energy(traj, problem, constant_c(problem), 0.0,
                                  f_eps_ref);
}

/// Energy of the prediction-correction flow evaluated on the implicit
/// objective: l(x) - l_ref + 1/2 int |grad l|^2. l_ref defaults to the
/// shipped optimal value, else 0 (the series is then shifted).
inline EnergySeries energy_pc(const Trajectory& traj,
                              const BilevelProblem& problem,
                              std::optional<double> ell_ref = std::nullopt) {
  require(traj.size() > 0, "empty trajectory");
  const double ref = ell_ref ? *ell_ref : problem.truth.optimal_value.value_or(0.0);
  EnergySeries e;
  e.c = 0.5;
  e.f_ref = ref;
  double accumulated = 0.0;
  double prev_sq = 0.0;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const auto& s = traj.snapshots[k].state;
    const Vector y_star = problem.truth.lower_solution
                              ? problem.truth.lower_solution(s.x)
                              : solve_lower(problem, s.x, 1e-11, 100, s.y);
    const double ell = problem.upper(s.x, y_star).value;
    const Vector grad_ell = problem.truth.implicit_gradient
                                ? problem.truth.implicit_gradient(s.x)
                                : surrogate_hypergradient(problem, s.x, y_star);
    const Vector f_surr = surrogate_hypergradient(problem, s.x, s.y);
    const double sq = grad_ell.squaredNorm();
    if (k > 0) {
      const double dt = s.t - traj.snapshots[k - 1].state.t;
      accumulated += 0.5 * 0.5 * dt * (prev_sq + sq);
    }
    prev_sq = sq;
    e.times.push_back(s.t);
    e.objective_gap.push_back(ell - ref);
    e.barrier.push_back(0.0);
    e.integral.push_back(accumulated);
    e.tracking.push_back((f_surr - grad_ell).squaredNorm());
    e.values.push_back(ell - ref + accumulated);
  }
  return e;
}

/// Number of steps where the energy rises by more than `slack`.
inline int count_increases(const EnergySeries& e, double slack) {
  int violations = 0;
  for (std::size_t k = 1; k < e.size(); ++k)
    if (e.values[k] - e.values[k - 1] > slack) ++violations;
  return violations;
}

/// Largest single-step rise of the energy (negative when strictly falling).
inline double max_increase(const EnergySeries& e) {
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < e.size(); ++k)
    worst = std::max(worst, e.values[k] - e.values[k - 1]);
  return worst;
}

/// Prediction-correction energies may rise, but by no more than the
/// accumulated tracking error: E_k - E_{k-1} <= 1/2 int |F - grad l|^2.
/// Counts steps where that fails by more than `slack`.
inline int count_pc_bound_violations(const EnergySeries& e, double slack) {
  require(e.tracking.size() == e.size(), "series has no tracking term");
  int violations = 0;
  for (std::size_t k = 1; k < e.size(); ++k) {
    const double dt = e.times[k] - e.times[k - 1];
    const double allowance = 0.25 * dt * (e.tracking[k] + e.tracking[k - 1]);
    if (e.values[k] - e.values[k - 1] - allowance > slack) ++violations;
  }
  return violations;
}

/// Both sides of the time-averaged prediction-correction bound
///   1/2 int_0^t |grad l|^2 <= l(x0) - l* + M1^2 |grad_y g(0)|^2 / (4 beta mu_g^2).
/// `checked` is false when M1 is not declared.
struct BoundCheck {
  double lhs = 0.0;
  std::optional<double> rhs;
  bool checked = false;
  bool holds() const { return !checked || lhs <= *rhs; }
};

inline BoundCheck pc_time_average_bound(const EnergySeries& pc_energy,
                                        const BilevelProblem& problem,
                                        double beta, double grad_y_g0_norm) {
  BoundCheck check;
  check.lhs = pc_energy.integral.back();
  if (!problem.constants.m_1) return check;
  const double m1 = *problem.constants.m_1;
  const double mu = detail::need(problem.constants.mu_g, "mu_g");
  check.rhs = pc_energy.objective_gap.front() +
              m1 * m1 * grad_y_g0_norm * grad_y_g0_norm / (4.0 * beta * mu * mu);
  check.checked = true;
  return check;
}

/// max_k | |grad_y g(t_k)| - exp(-alpha t_k) |grad_y g(0)| | / |grad_y g(0)|.
/// Absolute rather than relative when the run starts on the manifold.
inline double contraction_check(const Trajectory& traj, double alpha) {
  require(traj.size() > 0, "empty trajectory");
  const double g0 = traj.front().diag.norm_grad_y_g;
  const double t0 = traj.front().state.t;
  const double scale = g0 > 0.0 ? g0 : 1.0;
  double worst = 0.0;
  for (const auto& s : traj.snapshots) {
    const double expected = std::exp(-alpha * (s.state.t - t0)) * g0;
    worst = std::max(worst, std::abs(s.diag.norm_grad_y_g - expected) / scale);
  }
  return worst;
}

/// Residual of the KKT system of  min f  s.t. grad_y g = 0  with the
/// least-squares multiplier, plus |grad_y g|.
inline double kkt_residual(const BilevelProblem& problem, const Vector& x,
                           const Vector& y) {
  const UpperEval up = problem.eval_upper(x, y);
  const LowerEval low = problem.eval_lower(x, y, true);
  const Vector lambda = solve_gram_dual(
      low.hess_yx, low.hess_yy,
      Vector(low.hess_yx * up.grad_x + low.hess_yy * up.grad_y));
  const Vector rx = up.grad_x + low.hess_yx.transpose() * lambda;
  const Vector ry = up.grad_y + low.hess_yy * lambda;
  return std::sqrt(rx.squaredNorm() + ry.squaredNorm()) + low.grad_y.norm();
}

/// Residual of the KKT system of  min f  s.t. h <= eps^2  with the
/// nonnegative least-squares multiplier: stationarity, primal violation and
/// complementarity.
inline double relaxed_kkt_residual(const BilevelProblem& problem,
                                   const Vector& x, const Vector& y,
                                   double eps) {
  const UpperEval up = problem.eval_upper(x, y);
  const BarrierEval b = barrier(problem.eval_lower(x, y, true));
  const double denom = b.grad_x_h.squaredNorm() + b.grad_y_h.squaredNorm();
  double mult = 0.0;
  if (denom > 0.0) {
    mult = std::max(0.0, -(b.grad_x_h.dot(up.grad_x) + b.grad_y_h.dot(up.grad_y)) /
                             denom);
  }
  const Vector rx = up.grad_x + mult * b.grad_x_h;
  const Vector ry = up.grad_y + mult * b.grad_y_h;
  const double gap = b.h - eps * eps;
  return std::sqrt(rx.squaredNorm() + ry.squaredNorm()) + std::max(0.0, gap) +
         std::abs(mult * gap);
}

/// Fraction of snapshots inside {h <= eps^2 + 1e-8}.
inline double feasibility_fraction(const Trajectory& traj, double eps) {
  if (traj.size() == 0) return 1.0;
  std::size_t inside = 0;
  for (const auto& s : traj.snapshots)
    if (s.diag.h <= eps * eps + 1e-8) ++inside;
  return static_cast<double>(inside) / static_cast<double>(traj.size());
}

/// First snapshot time at which |grad_y g| <= threshold.
inline std::optional<double> first_time_below(const Trajectory& traj,
                                              double threshold) {
  for (const auto& s : traj.snapshots)
    if (s.diag.norm_grad_y_g <= threshold) return s.state.t;
  return std::nullopt;
}

/// Largest ratio |y - y*(x)| / (|grad_y g(0)| exp(-beta t) / mu_g) over the
/// snapshots of a prediction-correction run; <= 1 certifies the envelope.
inline double pc_envelope_ratio(const Trajectory& traj,
                                const BilevelProblem& problem, double beta) {
  require(traj.size() > 0, "empty trajectory");
  const double mu = detail::need(problem.constants.mu_g, "mu_g");
  const auto& s0 = traj.front().state;
  const double g0 = problem.lower(s0.x, s0.y, false).grad_y.norm();
  double worst = 0.0;
  for (const auto& snap : traj.snapshots) {
    const auto& s = snap.state;
    const Vector y_star = problem.truth.lower_solution
                              ? problem.truth.lower_solution(s.x)
                              : solve_lower(problem, s.x, 1e-12, 100, s.y);
    const double dist = (s.y - y_star).norm();
    const double bound = g0 * std::exp(-beta * (s.t - s0.t)) / mu;
    if (bound == 0.0) {
      if (dist > 0.0) worst = std::numeric_limits<double>::infinity();
      continue;
    }
    worst = std::max(worst, dist / bound);
  }
  return worst;
}

/// Probe filling the per-snapshot diagnostics; with_kkt enables the KKT
/// stopping rule at the cost of one extra Gram solve per step.
inline Probe make_probe(const BilevelProblem& problem, bool with_kkt = false) {
  const BilevelProblem* p = &problem;
  return [p, with_kkt](const SolverState& s, const FilterOutput& out) {
    SnapshotDiagnostics d;
    const LowerEval low = p->lower(s.x, s.y, false);
    d.norm_grad_y_g = low.grad_y.norm();
    d.h = low.grad_y.squaredNorm();
    d.f = p->upper(s.x, s.y).value;
    d.lambda_norm = out.dual_norm();
    if (with_kkt) d.kkt = kkt_residual(*p, s.x, s.y);
    return d;
  };
}

}  // namespace safeflow
