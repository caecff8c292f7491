#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

#include "safeflow/error.hpp"
#include "safeflow/numerics.hpp"
#include "safeflow/problem.hpp"

namespace safeflow {

/// Filtered velocity at one point. `dual` has m entries for the safe gradient
/// flow, one entry for the compact and relaxed flows and none otherwise.
struct FilterOutput {
  Vector xdot;
  Vector ydot;
  Vector dual;
  bool active = false;
  std::int64_t grad_evals = 0;

  double dual_norm() const { return dual.size() ? dual.norm() : 0.0; }
  double speed() const { return xdot.norm() + ydot.norm(); }
};

/// h = |grad_y g|^2 and its gradients.
struct BarrierEval {
  double h = 0.0;
  Vector grad_x_h;  // 2 hess_yx^T grad_y g
  Vector grad_y_h;  // 2 hess_yy grad_y g
};

inline BarrierEval barrier(const LowerEval& low) {
  BarrierEval b;
  b.h = low.grad_y.squaredNorm();
  b.grad_x_h = 2.0 * low.hess_yx.transpose() * low.grad_y;
  b.grad_y_h = 2.0 * low.hess_yy * low.grad_y;
  return b;
}

/// Guards for the compact and relaxed flows. Below manifold_tol the point is
/// treated as lying on {grad_y g = 0}; a squared barrier-gradient norm below
/// denom_tol off the manifold is reported as degenerate.
struct FilterTolerances {
  double manifold_tol = 1e-12;
  double denom_tol = 1e-14;
};

namespace detail {

struct PointEval {
  UpperEval up;
  LowerEval low;
};

inline PointEval evaluate(const BilevelProblem& problem, const Vector& x,
                          const Vector& y) {
  return {problem.eval_upper(x, y), problem.eval_lower(x, y, true)};
}

inline constexpr std::int64_t kPointCost =
    cost::kUpper + cost::kLowerWithHessians;

}  // namespace detail

/// F(x, y) = grad_x f - hess_yx^T v  with  hess_yy v = grad_y f, the
/// hypergradient estimate at an inexact lower-level point.
inline Vector surrogate_hypergradient(const BilevelProblem& problem,
                                      const Vector& x, const Vector& y,
                                      std::int64_t* grad_evals = nullptr) {
  const auto pt = detail::evaluate(problem, x, y);
  if (grad_evals) *grad_evals += detail::kPointCost;
  const Vector v = solve_spd(pt.low.hess_yy, pt.up.grad_y);
  return pt.up.grad_x - pt.low.hess_yx.transpose() * v;
}

/// Plain gradient flow on f, ignoring the lower level.
inline FilterOutput raw_gradient_velocity(const BilevelProblem& problem,
                                          const Vector& x, const Vector& y) {
  const UpperEval up = problem.eval_upper(x, y);
  FilterOutput out;
  out.xdot = -up.grad_x;
  out.ydot = -up.grad_y;
  out.grad_evals = cost::kUpper;
  return out;
}

/// Safe gradient flow: the projection of (-grad_x f, -grad_y f) onto
///   hess_yx xdot + hess_yy ydot + alpha grad_y g = 0,
/// which makes grad_y g decay as exp(-alpha t).
inline FilterOutput sgf_velocity(const BilevelProblem& problem, const Vector& x,
                                 const Vector& y, double alpha) {
  require(alpha > 0.0, "alpha must be positive");
  const auto pt = detail::evaluate(problem, x, y);
  const Matrix& hyx = pt.low.hess_yx;
  const Matrix& hyy = pt.low.hess_yy;
  const Vector rhs = hyx * pt.up.grad_x + hyy * pt.up.grad_y -
                     alpha * pt.low.grad_y;
  FilterOutput out;
  out.dual = solve_gram_dual(hyx, hyy, rhs);
  out.xdot = -pt.up.grad_x - hyx.transpose() * out.dual;
  out.ydot = -pt.up.grad_y - hyy * out.dual;
  out.active = true;
  out.grad_evals = detail::kPointCost;
  return out;
}

/// Inversion-free flow with the single equality constraint
///   grad_x h^T xdot + grad_y h^T ydot + alpha h = 0,
/// switched to plain gradient flow on the manifold h = 0.
inline FilterOutput compact_velocity(const BilevelProblem& problem,
                                     const Vector& x, const Vector& y,
                                     double alpha,
                                     const FilterTolerances& tol = {}) {
  require(alpha > 0.0, "alpha must be positive");
  const auto pt = detail::evaluate(problem, x, y);
  const BarrierEval b = barrier(pt.low);

  FilterOutput out;
  out.grad_evals = detail::kPointCost;
  out.xdot = -pt.up.grad_x;
  out.ydot = -pt.up.grad_y;
  out.dual = Vector::Zero(1);
  if (b.h <= tol.manifold_tol) return out;

  const double denom = b.grad_x_h.squaredNorm() + b.grad_y_h.squaredNorm();
  if (denom < tol.denom_tol) {
    throw SolverError(ErrorCode::kDegenerateConstraint,
                      "barrier gradient vanishes off the manifold");
  }
  const double lambda = (-b.grad_x_h.dot(pt.up.grad_x) -
                         b.grad_y_h.dot(pt.up.grad_y) + alpha * b.h) /
                        denom;
  out.dual(0) = lambda;
  out.active = lambda != 0.0;
  out.xdot -= lambda * b.grad_x_h;
  out.ydot -= lambda * b.grad_y_h;
  return out;
}

/// Relaxed safe gradient flow: the projection of (-grad_x f, -grad_y f) onto
/// the halfspace
///   grad_x h^T xdot + grad_y h^T ydot + alpha (h - eps^2) <= 0,
/// which keeps {h <= eps^2} forward invariant without any linear solve.
inline FilterOutput rxgf_velocity(const BilevelProblem& problem,
                                  const Vector& x, const Vector& y,
                                  double alpha, double eps,
                                  const FilterTolerances& tol = {}) {
  require(alpha > 0.0, "alpha must be positive");
  require(eps > 0.0, "eps must be positive");
  const auto pt = detail::evaluate(problem, x, y);
  const BarrierEval b = barrier(pt.low);

  FilterOutput out;
  out.grad_evals = detail::kPointCost;
  out.xdot = -pt.up.grad_x;
  out.ydot = -pt.up.grad_y;
  out.dual = Vector::Zero(1);

  const double violation = -b.grad_x_h.dot(pt.up.grad_x) -
                           b.grad_y_h.dot(pt.up.grad_y) +
                           alpha * (b.h - eps * eps);
  if (violation <= 0.0) return out;

  const double denom = b.grad_x_h.squaredNorm() + b.grad_y_h.squaredNorm();
  if (denom < tol.denom_tol) {
    throw SolverError(ErrorCode::kDegenerateConstraint,
                      "barrier gradient vanishes with the halfspace violated");
  }
  const double lambda = violation / denom;
  out.dual(0) = lambda;
  out.active = true;
  out.xdot -= lambda * b.grad_x_h;
  out.ydot -= lambda * b.grad_y_h;
  return out;
}

/// Prediction-correction flow:
///   xdot = -F(x, y)
///   ydot = -hess_yy^{-1} (beta grad_y g + hess_yx xdot)
/// One factorization of hess_yy serves both solves.
inline FilterOutput pc_velocity(const BilevelProblem& problem, const Vector& x,
                                const Vector& y, double beta) {
  require(beta > 0.0, "beta must be positive");
  const auto pt = detail::evaluate(problem, x, y);
  const SpdFactorization hyy(pt.low.hess_yy);
  const Vector v = hyy.solve(pt.up.grad_y);

  FilterOutput out;
  out.grad_evals = detail::kPointCost;
  out.xdot = pt.low.hess_yx.transpose() * v - pt.up.grad_x;
  out.ydot = -hyy.solve(Vector(beta * pt.low.grad_y + pt.low.hess_yx * out.xdot));
  return out;
}

enum class FlowKind { kSgf, kCompact, kRxgf, kPredictionCorrection, kRawGradient };

inline std::string_view to_string(FlowKind kind) {
  switch (kind) {
    case FlowKind::kSgf: return "sgf";
    case FlowKind::kCompact: return "compact";
    case FlowKind::kRxgf: return "rxgf";
    case FlowKind::kPredictionCorrection: return "pc";
    case FlowKind::kRawGradient: return "raw-gf";
  }
  return "unknown";
}

inline std::optional<FlowKind> parse_flow_kind(std::string_view name) {
  for (auto kind : {FlowKind::kSgf, FlowKind::kCompact, FlowKind::kRxgf,
                    FlowKind::kPredictionCorrection, FlowKind::kRawGradient}) {
    if (to_string(kind) == name) return kind;
  }
  return std::nullopt;
}

struct FlowParams {
  double alpha = 1.0;
  double beta = 1.0;
  double eps = 0.1;
  FilterTolerances tol;
};

using VelocityField =
    std::function<FilterOutput(const Vector& x, const Vector& y)>;

/// Binds a flow family to a problem. The problem must outlive the field.
inline VelocityField make_field(const BilevelProblem& problem, FlowKind kind,
                                const FlowParams& params) {
  const BilevelProblem* p = &problem;
  switch (kind) {
    case FlowKind::kSgf:
      return [p, params](const Vector& x, const Vector& y) {
        return sgf_velocity(*p, x, y, params.alpha);
      };
    case FlowKind::kCompact:
      return [p, params](const Vector& x, const Vector& y) {
        return compact_velocity(*p, x, y, params.alpha, params.tol);
      };
    case FlowKind::kRxgf:
      return [p, params](const Vector& x, const Vector& y) {
        return rxgf_velocity(*p, x, y, params.alpha, params.eps, params.tol);
      };
    case FlowKind::kPredictionCorrection:
      return [p, params](const Vector& x, const Vector& y) {
        return pc_velocity(*p, x, y, params.beta);
      };
    case FlowKind::kRawGradient:
      return [p](const Vector& x, const Vector& y) {
        return raw_gradient_velocity(*p, x, y);
      };
  }
  throw SolverError(ErrorCode::kInvalidArgument, "unknown flow kind");
}

}  // namespace safeflow
