#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "safeflow/error.hpp"
#include "safeflow/numerics.hpp"

namespace safeflow {

/// Upper-level oracle output at (x, y).
struct UpperEval {
  double value = 0.0;
  Vector grad_x;
  Vector grad_y;
};

/// Lower-level oracle output at (x, y). The Hessian blocks are only filled
/// when requested; hess_yx is m x n (d/dx of grad_y g).
struct LowerEval {
  double value = 0.0;
  Vector grad_y;
  Matrix hess_yx;
  Matrix hess_yy;
};

using UpperOracle = std::function<UpperEval(const Vector& x, const Vector& y)>;
using LowerOracle = std::function<LowerEval(const Vector& x, const Vector& y,
                                            bool with_hessians)>;

/// Regularity constants of the problem class. Absent means unknown.
struct RegularityConstants {
  std::optional<double> mu_g;     // strong convexity of g(x, .)
  std::optional<double> l_yx_g;   // Lipschitz modulus of grad_y g in x
  std::optional<double> c_x_f;    // bound on |grad_x f|
  std::optional<double> c_y_f;    // bound on |grad_y f|
  std::optional<double> c_yx_g;   // Lipschitz modulus of hess_yx g
  std::optional<double> c_yy_g;   // Lipschitz modulus of hess_yy g
  std::optional<double> m_1;      // hypergradient error constant
  bool estimated = false;         // mu_g / l_yx_g sampled, not exact
};

struct GroundTruth {
  std::function<Vector(const Vector&)> lower_solution;
  std::function<Vector(const Vector&)> implicit_gradient;
  std::optional<double> optimal_value;
};

/// Oracle bundle for  min_x f(x, y*(x))  s.t.  y*(x) = argmin_y g(x, y).
/// Oracles are pure functions of their inputs and may be shared between
/// concurrently running solvers.
struct BilevelProblem {
  std::string name;
  Eigen::Index dim_upper = 0;  // n
  Eigen::Index dim_lower = 0;  // m
  UpperOracle upper;
  LowerOracle lower;
  RegularityConstants constants;
  GroundTruth truth;

  UpperEval eval_upper(const Vector& x, const Vector& y) const {
    check_point(x, y);
    return upper(x, y);
  }

  LowerEval eval_lower(const Vector& x, const Vector& y,
                       bool with_hessians = true) const {
    check_point(x, y);
    return lower(x, y, with_hessians);
  }

  void check_point(const Vector& x, const Vector& y) const {
    if (x.size() != dim_upper || y.size() != dim_lower) {
      throw SolverError(ErrorCode::kInvalidArgument,
                        "point has wrong dimensions for problem " + name);
    }
  }
};

/// Gradient-evaluation bookkeeping: one unit per oracle bundle, one extra
/// unit per Hessian block.
namespace cost {
inline constexpr std::int64_t kUpper = 1;
inline constexpr std::int64_t kLowerGradient = 1;
inline constexpr std::int64_t kLowerWithHessians = 3;
}  // namespace cost

struct SolverState {
  Vector x;
  Vector y;
  double t = 0.0;
  std::int64_t grad_evals = 0;
};

/// Maximum relative error of each oracle output against central finite
/// differences.
struct FdReport {
  double grad_x_f = 0.0;
  double grad_y_f = 0.0;
  double grad_y_g = 0.0;
  double hess_yx_g = 0.0;
  double hess_yy_g = 0.0;

  double max() const {
    return std::max({grad_x_f, grad_y_f, grad_y_g, hess_yx_g, hess_yy_g});
  }
};

namespace detail {

// Relative error with an absolute floor so that exact zeros do not blow up.
inline double relative_error(double approx, double exact) {
  return std::abs(approx - exact) / std::max(1.0, std::abs(exact));
}

inline double max_relative_error(const Matrix& approx, const Matrix& exact) {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < exact.cols(); ++j)
    for (Eigen::Index i = 0; i < exact.rows(); ++i)
      worst = std::max(worst, relative_error(approx(i, j), exact(i, j)));
  return worst;
}

}  // namespace detail

inline FdReport fd_check(const BilevelProblem& problem, const SolverState& point,
                         double step) {
  require(step > 0.0, "finite-difference step must be positive");
  const auto n = problem.dim_upper;
  const auto m = problem.dim_lower;
  const Vector& x = point.x;
  const Vector& y = point.y;
  const UpperEval up = problem.eval_upper(x, y);
  const LowerEval low = problem.eval_lower(x, y, true);

  Vector fd_fx(n), fd_fy(m), fd_gy(m);
  Matrix fd_hyx(m, n), fd_hyy(m, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    Vector xp = x, xm = x;
    xp(i) += step;
    xm(i) -= step;
    fd_fx(i) = (problem.upper(xp, y).value - problem.upper(xm, y).value) /
               (2.0 * step);
    fd_hyx.col(i) = (problem.lower(xp, y, false).grad_y -
                     problem.lower(xm, y, false).grad_y) /
                    (2.0 * step);
  }
  for (Eigen::Index j = 0; j < m; ++j) {
    Vector yp = y, ym = y;
    yp(j) += step;
    ym(j) -= step;
    fd_fy(j) = (problem.upper(x, yp).value - problem.upper(x, ym).value) /
               (2.0 * step);
    fd_gy(j) = (problem.lower(x, yp, false).value -
                problem.lower(x, ym, false).value) /
               (2.0 * step);
    fd_hyy.col(j) = (problem.lower(x, yp, false).grad_y -
                     problem.lower(x, ym, false).grad_y) /
                    (2.0 * step);
  }

  FdReport report;
  report.grad_x_f = detail::max_relative_error(fd_fx, up.grad_x);
  report.grad_y_f = detail::max_relative_error(fd_fy, up.grad_y);
  report.grad_y_g = detail::max_relative_error(fd_gy, low.grad_y);
  report.hess_yx_g = detail::max_relative_error(fd_hyx, low.hess_yx);
  report.hess_yy_g = detail::max_relative_error(fd_hyy, low.hess_yy);
  return report;
}

/// Damped Newton on grad_y g(x, .) = 0 with Armijo backtracking on g.
inline Vector solve_lower(const BilevelProblem& problem, const Vector& x,
                          double tol, int max_iters = 100,
                          std::optional<Vector> y_start = std::nullopt) {
  require(tol > 0.0, "lower-level tolerance must be positive");
  Vector y = y_start ? *y_start : Vector(Vector::Zero(problem.dim_lower));
  for (int iter = 0; iter <= max_iters; ++iter) {
    const LowerEval low = problem.eval_lower(x, y, true);
    if (low.grad_y.norm() <= tol) return y;
    if (iter == max_iters) break;

    Vector step;
    try {
      step = -solve_spd(low.hess_yy, low.grad_y);
    } catch (const SolverError&) {
      throw SolverError(ErrorCode::kSingularHessian,
                        "Newton system singular in solve_lower");
    }
    const double slope = low.grad_y.dot(step);
    double t = 1.0;
    for (int ls = 0; ls < 60; ++ls) {
      const Vector trial = y + t * step;
      const LowerEval next = problem.eval_lower(x, trial, false);
      if (std::isfinite(next.value) &&
          next.value <= low.value + 1e-4 * t * slope) {
        break;
      }
      // Near the solution the decrease can fall below rounding of g; accept
      // the step if it shrinks the gradient instead.
      if (next.grad_y.norm() < low.grad_y.norm()) break;
      t *= 0.5;
    }
    y += t * step;
  }
  throw SolverError(ErrorCode::kNonConvergence,
                    "solve_lower did not reach tolerance within max_iters");
}

/// Implicit objective l(x) = f(x, y*(x)), using ground truth when shipped.
inline double implicit_objective(const BilevelProblem& problem, const Vector& x,
                                 double lower_tol = 1e-11) {
  const Vector y_star = problem.truth.lower_solution
                            ? problem.truth.lower_solution(x)
                            : solve_lower(problem, x, lower_tol);
  return problem.upper(x, y_star).value;
}

}  // namespace safeflow
