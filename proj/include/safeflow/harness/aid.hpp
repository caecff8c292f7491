#pragma once

#include <cstdint>
#include <limits>
#include <optional>

#include "safeflow/error.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/integrator.hpp"
#include "safeflow/numerics.hpp"
#include "safeflow/problem.hpp"

namespace safeflow::harness {

/// Double-loop approximate implicit differentiation: `inner_steps` gradient
/// steps on g(x, .) warm-started from the previous y, then one step of size
/// outer_step along -F(x, y). Costs follow the flows' convention, so a run
/// stopped at `budget` gradient evaluations is comparable with an RK-4 run.
struct AidSettings {
  int inner_steps = 10;
  double outer_step = 0.1;
  std::optional<double> inner_step;
  std::int64_t budget = std::numeric_limits<std::int64_t>::max();
};

struct AidResult {
  Trajectory trajectory;
  double inner_step = 0.0;  // the step actually used
};

inline double default_inner_step(const BilevelProblem& problem,
                                 const SolverState& state0) {
  // Estimated once at the start and not charged to the budget.
  const LowerEval low = problem.eval_lower(state0.x, state0.y, true);
  return 1.0 / power_iteration(low.hess_yy);
}

/// The snapshot "time" of an AID run is the outer iteration count. The run
/// stops before any oracle call that would overshoot the budget, so it ends
/// within one hypergradient evaluation of it.
inline AidResult aid_baseline(const BilevelProblem& problem,
                              const SolverState& state0,
                              const AidSettings& settings, int max_outer,
                              const Probe& probe = {}) {
  if (settings.inner_steps < 1)
    throw SolverError(ErrorCode::kInvalidConfig, "AID needs at least one inner step");
  if (!(settings.outer_step > 0.0))
    throw SolverError(ErrorCode::kInvalidConfig, "AID outer step must be positive");
  require(max_outer >= 0, "max_outer must be nonnegative");

  AidResult result;
  result.inner_step = settings.inner_step ? *settings.inner_step
                                          : default_inner_step(problem, state0);
  if (!(result.inner_step > 0.0) || !std::isfinite(result.inner_step))
    throw SolverError(ErrorCode::kInvalidConfig, "AID inner step must be positive");

  Trajectory& traj = result.trajectory;
  traj.solver = "aid";
  traj.problem = problem.name;
  SolverState state = state0;
  FilterOutput last;
  last.xdot = Vector::Zero(problem.dim_upper);
  last.ydot = Vector::Zero(problem.dim_lower);

  auto record = [&]() {
    SnapshotDiagnostics diag;
    if (probe) diag = probe(state, last);
    traj.snapshots.push_back({state, last, diag});
  };
  auto affordable = [&](std::int64_t cost) {
    return state.grad_evals + cost <= settings.budget;
  };

  try {
    record();
    for (int outer = 0; outer < max_outer; ++outer) {
      bool exhausted = false;
      const Vector y_before = state.y;
      for (int k = 0; k < settings.inner_steps; ++k) {
        if (!affordable(cost::kLowerGradient)) {
          exhausted = true;
          break;
        }
        state.y -= result.inner_step * problem.eval_lower(state.x, state.y, false).grad_y;
        state.grad_evals += cost::kLowerGradient;
      }
      if (exhausted || !affordable(safeflow::detail::kPointCost)) {
        // Keep the inner progress already paid for.
        if (state.y != y_before) {
          last.ydot = state.y - y_before;
          last.xdot.setZero();
          state.t = outer + 1;
          record();
        }
        break;
      }
      const Vector hypergrad =
          surrogate_hypergradient(problem, state.x, state.y, &state.grad_evals);
      last.xdot = -settings.outer_step * hypergrad;
      last.ydot = state.y - y_before;
      state.x += last.xdot;
      state.t = outer + 1;
      record();
    }
  } catch (const SolverError& e) {
    traj.stop = StopReason::kError;
    traj.error = e.what();
    throw IntegrationError(e, std::move(traj));
  }
  return result;
}

}  // namespace safeflow::harness
