#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "safeflow/error.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/problem.hpp"

namespace safeflow {

struct IntegratorConfig {
  double dt = 0.01;
  double horizon = 1.0;
  double stop_velocity_tol = 0.0;  // 0 disables the rule
  double stop_kkt_tol = 0.0;       // 0 disables the rule
  int record_every = 1;

  void validate() const {
    if (!(dt > 0.0) || !(horizon > 0.0) || dt > horizon) {
      throw SolverError(ErrorCode::kInvalidConfig,
                        "integrator needs 0 < dt <= horizon");
    }
    if (record_every < 1) {
      throw SolverError(ErrorCode::kInvalidConfig, "record_every must be >= 1");
    }
    if (stop_velocity_tol < 0.0 || stop_kkt_tol < 0.0) {
      throw SolverError(ErrorCode::kInvalidConfig,
                        "stopping tolerances must be nonnegative");
    }
  }

  // Number of fixed steps to reach the horizon; tolerant to dt not dividing
  // the horizon exactly in binary.
  std::int64_t step_count() const {
    const double ratio = horizon / dt;
    return static_cast<std::int64_t>(std::ceil(ratio - 1e-9 * std::max(1.0, ratio)));
  }
};

/// Per-snapshot scalars. kkt is only filled by probes that compute it.
struct SnapshotDiagnostics {
  double norm_grad_y_g = 0.0;
  double h = 0.0;
  double f = 0.0;
  double lambda_norm = 0.0;
  std::optional<double> kkt;
};

struct Snapshot {
  SolverState state;
  FilterOutput output;
  SnapshotDiagnostics diag;
};

enum class StopReason { kHorizon, kVelocity, kKkt, kError };

inline std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::kHorizon: return "horizon";
    case StopReason::kVelocity: return "velocity";
    case StopReason::kKkt: return "kkt";
    case StopReason::kError: return "error";
  }
  return "unknown";
}

struct Trajectory {
  std::vector<Snapshot> snapshots;
  std::string solver;
  std::string problem;
  std::uint64_t config_hash = 0;
  StopReason stop = StopReason::kHorizon;
  std::string error;

  const Snapshot& front() const { return snapshots.front(); }
  const Snapshot& back() const { return snapshots.back(); }
  std::size_t size() const { return snapshots.size(); }
};

/// Raised when a step fails; carries everything recorded before the failure.
class IntegrationError : public SolverError {
 public:
  IntegrationError(const SolverError& cause, Trajectory partial)
      : SolverError(cause.code(), cause.message()), partial_(std::move(partial)) {}

  const Trajectory& partial() const noexcept { return partial_; }

 private:
  Trajectory partial_;
};

using Probe =
    std::function<SnapshotDiagnostics(const SolverState&, const FilterOutput&)>;

namespace detail {

inline FilterOutput eval_stage(const VelocityField& field, const Vector& x,
                               const Vector& y, int stage) {
  try {
    return field(x, y);
  } catch (const SolverError& e) {
    throw SolverError(e.code(),
                      "RK-4 stage " + std::to_string(stage) + ": " + e.message());
  }
}

}  // namespace detail

/// Classical RK-4 step reusing an already evaluated first stage.
inline SolverState rk4_step(const VelocityField& field, const SolverState& state,
                            double dt, const FilterOutput& k1) {
  require(dt > 0.0, "dt must be positive");
  const double half = 0.5 * dt;
  const FilterOutput k2 = detail::eval_stage(
      field, state.x + half * k1.xdot, state.y + half * k1.ydot, 2);
  const FilterOutput k3 = detail::eval_stage(
      field, state.x + half * k2.xdot, state.y + half * k2.ydot, 3);
  const FilterOutput k4 = detail::eval_stage(
      field, state.x + dt * k3.xdot, state.y + dt * k3.ydot, 4);

  SolverState next;
  next.x = state.x + (dt / 6.0) * (k1.xdot + 2.0 * k2.xdot + 2.0 * k3.xdot + k4.xdot);
  next.y = state.y + (dt / 6.0) * (k1.ydot + 2.0 * k2.ydot + 2.0 * k3.ydot + k4.ydot);
  next.t = state.t + dt;
  next.grad_evals = state.grad_evals + k1.grad_evals + k2.grad_evals +
                    k3.grad_evals + k4.grad_evals;
  return next;
}

inline SolverState rk4_step(const VelocityField& field, const SolverState& state,
                            double dt) {
  require(dt > 0.0, "dt must be positive");
  return rk4_step(field, state, dt,
                  detail::eval_stage(field, state.x, state.y, 1));
}

inline std::optional<StopReason> stop_reason(const SolverState& /*state*/,
                                             const FilterOutput& output,
                                             const SnapshotDiagnostics& diag,
                                             const IntegratorConfig& config) {
  if (config.stop_velocity_tol > 0.0 &&
      output.speed() <= config.stop_velocity_tol) {
    return StopReason::kVelocity;
  }
  if (config.stop_kkt_tol > 0.0 && diag.kkt && *diag.kkt <= config.stop_kkt_tol) {
    return StopReason::kKkt;
  }
  return std::nullopt;
}

/// Fixed-step RK-4 from state0 until the horizon or a stopping rule. The
/// first and final states are always recorded; the final state's field
/// evaluation is diagnostic and not charged to grad_evals.
inline Trajectory integrate(const VelocityField& field, const SolverState& state0,
                            const IntegratorConfig& config,
                            const Probe& probe = {}) {
  config.validate();
  const std::int64_t steps = config.step_count();
  const double t0 = state0.t;

  Trajectory traj;
  SolverState state = state0;
  for (std::int64_t k = 0;; ++k) {
    FilterOutput out;
    std::optional<StopReason> stop;
    SnapshotDiagnostics diag;
    try {
      out = detail::eval_stage(field, state.x, state.y, 1);
      if (probe) diag = probe(state, out);
      stop = stop_reason(state, out, diag, config);
      if (k == steps || stop || k % config.record_every == 0) {
        traj.snapshots.push_back({state, out, diag});
      }
      if (k == steps) {
        traj.stop = StopReason::kHorizon;
        break;
      }
      if (stop) {
        traj.stop = *stop;
        break;
      }
      state = rk4_step(field, state, config.dt, out);
      if (!state.x.allFinite() || !state.y.allFinite()) {
        throw SolverError(ErrorCode::kNonConvergence,
                          "state diverged at step " + std::to_string(k + 1) +
                              "; reduce dt");
      }
    } catch (const SolverError& e) {
      traj.stop = StopReason::kError;
      traj.error = e.what();
      throw IntegrationError(e, std::move(traj));
    }
    state.t = t0 + static_cast<double>(k + 1) * config.dt;
  }
  return traj;
}

}  // namespace safeflow
