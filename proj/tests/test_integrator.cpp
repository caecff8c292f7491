#include <cmath>

#include <gtest/gtest.h>

#include "safeflow/diagnostics.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/integrator.hpp"
#include "safeflow/problems.hpp"

namespace sf = safeflow;
using sf::Vector;

namespace {

Vector v1(double a) { return Vector::Constant(1, a); }

sf::SolverState toy_start() { return {v1(0.0), v1(1.0)}; }

sf::FilterOutput make_output(Vector xdot, Vector ydot, std::int64_t cost = 1) {
  sf::FilterOutput out;
  out.xdot = std::move(xdot);
  out.ydot = std::move(ydot);
  out.grad_evals = cost;
  return out;
}

// Exact SGF solution on the toy problem from (0, 1) with alpha = 1.
Eigen::Vector2d toy_exact(double t) {
  return {1.5 - 1.5 * std::exp(-t), 1.5 - 0.5 * std::exp(-t)};
}

sf::IntegratorConfig config(double dt, double horizon, int record_every = 1) {
  sf::IntegratorConfig c;
  c.dt = dt;
  c.horizon = horizon;
  c.record_every = record_every;
  return c;
}

}  // namespace

TEST(Rk4Step, ConstantFieldIsExact) {
  const sf::VelocityField field = [](const Vector&, const Vector&) {
    return make_output(v1(2.0), (Vector(2) << -1.0, 0.5).finished());
  };
  sf::SolverState s{v1(1.0), Vector::Zero(2), 3.0, 7};
  const auto next = sf::rk4_step(field, s, 0.25);
  EXPECT_DOUBLE_EQ(next.x(0), 1.5);
  EXPECT_DOUBLE_EQ(next.y(0), -0.25);
  EXPECT_DOUBLE_EQ(next.y(1), 0.125);
  EXPECT_DOUBLE_EQ(next.t, 3.25);
  EXPECT_EQ(next.grad_evals, 7 + 4);
}

TEST(Rk4Step, LinearDecayGrowthFactor) {
  const sf::VelocityField field = [](const Vector& x, const Vector& y) {
    return make_output(-x, -y);
  };
  const double h = 0.1;
  const auto next = sf::rk4_step(field, {v1(1.0), v1(1.0)}, h);
  const double poly = 1 - h + h * h / 2 - h * h * h / 6 + h * h * h * h / 24;
  EXPECT_NEAR(next.x(0), poly, 1e-15);
  EXPECT_NEAR(next.x(0), 0.9048375, 1e-7);
  EXPECT_LE(std::abs(next.x(0) - std::exp(-h)), 1e-7);
}

TEST(Rk4Step, ToySgfContractsByExpOfMinusDt) {
  const auto p = sf::make_toy1();
  const auto field = sf::make_field(p, sf::FlowKind::kSgf, {.alpha = 1.0});
  const auto next = sf::rk4_step(field, toy_start(), 0.01);
  const double g0 = p.lower(v1(0), v1(1), false).grad_y.norm();
  const double g1 = p.lower(next.x, next.y, false).grad_y.norm();
  EXPECT_NEAR(g1 / g0, std::exp(-0.01), 1e-9);
}

TEST(Rk4Step, StageErrorsAreAnnotated) {
  int calls = 0;
  const sf::VelocityField field = [&](const Vector& x, const Vector& y) {
    if (++calls == 3) throw sf::SolverError(sf::ErrorCode::kNotPositiveDefinite, "boom");
    return make_output(-x, -y);
  };
  try {
    sf::rk4_step(field, {v1(1.0), v1(1.0)}, 0.1);
    FAIL();
  } catch (const sf::SolverError& e) {
    EXPECT_EQ(e.code(), sf::ErrorCode::kNotPositiveDefinite);
    EXPECT_NE(e.message().find("stage 3"), std::string::npos);
  }
}

TEST(Rk4Step, RejectsNonPositiveDt) {
  const sf::VelocityField field = [](const Vector& x, const Vector& y) {
    return make_output(x, y);
  };
  EXPECT_THROW(sf::rk4_step(field, {v1(1.0), v1(1.0)}, 0.0), sf::SolverError);
}

TEST(Integrate, ToySgfConvergesToKktPoint) {
  const auto p = sf::make_toy1();
  const auto traj = sf::integrate(sf::make_field(p, sf::FlowKind::kSgf, {.alpha = 1.0}),
                                  toy_start(), config(0.01, 20));
  EXPECT_NEAR(traj.back().state.x(0), 1.5, 1e-4);
  EXPECT_NEAR(traj.back().state.y(0), 1.5, 1e-4);
  EXPECT_NEAR(traj.back().state.t, 20.0, 1e-12);
  EXPECT_EQ(traj.stop, sf::StopReason::kHorizon);
}

TEST(Integrate, ToyRxgfStaysInsideOnceInside) {
  const auto p = sf::make_toy1();
  const double eps = 0.5;
  const auto traj =
      sf::integrate(sf::make_field(p, sf::FlowKind::kRxgf, {.alpha = 1.0, .eps = eps}),
                    toy_start(), config(0.01, 20), sf::make_probe(p));
  bool inside = false;
  int entered_at = -1;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double h = traj.snapshots[k].diag.h;
    if (!inside && h <= eps * eps + 1e-8) {
      inside = true;
      entered_at = static_cast<int>(k);
    }
    if (inside) EXPECT_LE(h, eps * eps + 1e-8) << "snapshot " << k;
  }
  EXPECT_GT(entered_at, 0);
}

TEST(Integrate, OrderOfAccuracy) {
  const auto p = sf::make_toy1();
  const auto field = sf::make_field(p, sf::FlowKind::kSgf, {.alpha = 1.0});
  auto error = [&](double dt) {
    const auto traj = sf::integrate(field, toy_start(), config(dt, 1.0, 1000000));
    const auto& s = traj.back().state;
    return (Eigen::Vector2d(s.x(0), s.y(0)) - toy_exact(1.0)).norm();
  };
  const double e1 = error(0.04), e2 = error(0.02), e3 = error(0.01);
  EXPECT_GE(e1 / e2, 12.0);
  EXPECT_LE(e1 / e2, 20.0);
  EXPECT_GE(e2 / e3, 12.0);
  EXPECT_LE(e2 / e3, 20.0);
}

TEST(Integrate, GradEvalAccounting) {
  const auto p = sf::make_toy1();
  for (auto kind : {sf::FlowKind::kSgf, sf::FlowKind::kRxgf, sf::FlowKind::kRawGradient}) {
    const auto traj = sf::integrate(sf::make_field(p, kind, {}), toy_start(),
                                    config(0.1, 2.0));
    const std::int64_t per_stage = kind == sf::FlowKind::kRawGradient ? 1 : 4;
    EXPECT_EQ(traj.back().state.grad_evals, 4 * 20 * per_stage);
  }
}

TEST(Integrate, DeterministicAndMonotoneTime) {
  const auto p = sf::make_quadratic_ll(3, 5, 5, 10.0);
  const auto field = sf::make_field(p, sf::FlowKind::kRxgf, {.alpha = 1.0, .eps = 0.1});
  const sf::SolverState s0{Vector::Constant(5, 0.3), Vector::Constant(5, -0.2)};
  const auto a = sf::integrate(field, s0, config(0.01, 1.0, 3), sf::make_probe(p));
  const auto b = sf::integrate(field, s0, config(0.01, 1.0, 3), sf::make_probe(p));
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.snapshots[k].state.x, b.snapshots[k].state.x);
    EXPECT_EQ(a.snapshots[k].state.y, b.snapshots[k].state.y);
    EXPECT_EQ(a.snapshots[k].state.grad_evals, b.snapshots[k].state.grad_evals);
    if (k > 0) {
      EXPECT_GT(a.snapshots[k].state.t, a.snapshots[k - 1].state.t);
      EXPECT_GE(a.snapshots[k].state.grad_evals, a.snapshots[k - 1].state.grad_evals);
    }
    // Diagnostics recomputable from the stored state.
    const auto& s = a.snapshots[k].state;
    const auto low = p.lower(s.x, s.y, false);
    EXPECT_NEAR(a.snapshots[k].diag.norm_grad_y_g, low.grad_y.norm(), 1e-12);
    EXPECT_NEAR(a.snapshots[k].diag.f, p.upper(s.x, s.y).value, 1e-12);
  }
}

TEST(Integrate, RecordStrideKeepsFirstAndLast) {
  const auto p = sf::make_toy1();
  const auto traj = sf::integrate(sf::make_field(p, sf::FlowKind::kSgf, {}), toy_start(),
                                  config(0.1, 1.05, 4));
  // 11 steps: snapshots at steps 0, 4, 8 and the final step 11.
  ASSERT_EQ(traj.size(), 4u);
  EXPECT_NEAR(traj.snapshots[1].state.t, 0.4, 1e-12);
  EXPECT_NEAR(traj.back().state.t, 1.1, 1e-12);
}

TEST(Integrate, ConfigValidation) {
  const auto field = sf::make_field(sf::make_toy1(), sf::FlowKind::kSgf, {});
  EXPECT_THROW(sf::integrate(field, toy_start(), config(0.01, 0.0)), sf::SolverError);
  EXPECT_THROW(sf::integrate(field, toy_start(), config(0.5, 0.1)), sf::SolverError);
  EXPECT_THROW(sf::integrate(field, toy_start(), config(0.01, 1.0, 0)), sf::SolverError);
  auto c = config(0.01, 1.0);
  c.stop_kkt_tol = -1.0;
  EXPECT_THROW(sf::integrate(field, toy_start(), c), sf::SolverError);
}

TEST(Integrate, ErrorCarriesPartialTrajectory) {
  int calls = 0;
  const sf::VelocityField field = [&](const Vector& x, const Vector& y) {
    if (++calls > 10) throw sf::SolverError(sf::ErrorCode::kSingularHessian, "lost it");
    return make_output(-x, -y);
  };
  try {
    sf::integrate(field, {v1(1.0), v1(1.0)}, config(0.1, 10.0));
    FAIL();
  } catch (const sf::IntegrationError& e) {
    EXPECT_EQ(e.code(), sf::ErrorCode::kSingularHessian);
    EXPECT_EQ(e.partial().stop, sf::StopReason::kError);
    EXPECT_EQ(e.partial().size(), 3u);  // steps 0, 1, 2 recorded
    EXPECT_FALSE(e.partial().error.empty());
  }
}

TEST(StopReason, Rules) {
  const auto p = sf::make_toy1();
  sf::IntegratorConfig c = config(0.01, 1.0);
  const auto eq = sf::sgf_velocity(p, v1(1.5), v1(1.5), 1.0);
  EXPECT_FALSE(sf::stop_reason({}, eq, {}, c).has_value());

  c.stop_velocity_tol = 1e-8;
  EXPECT_EQ(*sf::stop_reason({}, eq, {}, c), sf::StopReason::kVelocity);

  const auto far = sf::sgf_velocity(p, v1(-5), v1(9), 1.0);
  EXPECT_FALSE(sf::stop_reason({}, far, {}, c).has_value());

  sf::IntegratorConfig k = config(0.01, 1.0);
  k.stop_kkt_tol = 1e-6;
  sf::SnapshotDiagnostics d;
  d.kkt = 1e-7;
  EXPECT_EQ(*sf::stop_reason({}, far, d, k), sf::StopReason::kKkt);
}

TEST(StopReason, KktRuleEndsRunEarly) {
  const auto p = sf::make_toy1();
  auto c = config(0.01, 50.0);
  c.stop_kkt_tol = 1e-6;
  const auto traj = sf::integrate(sf::make_field(p, sf::FlowKind::kSgf, {}), toy_start(),
                                  c, sf::make_probe(p, true));
  EXPECT_EQ(traj.stop, sf::StopReason::kKkt);
  EXPECT_LT(traj.back().state.t, 50.0);
  EXPECT_LE(sf::kkt_residual(p, traj.back().state.x, traj.back().state.y), 10 * 1e-6);
}

TEST(Integrate, DivergenceIsReported) {
  const auto p = sf::make_toy1();
  try {
    sf::integrate(sf::make_field(p, sf::FlowKind::kRawGradient, {}), toy_start(),
                  config(10.0, 5000.0));
    FAIL();
  } catch (const sf::IntegrationError& e) {
    EXPECT_EQ(e.code(), sf::ErrorCode::kNonConvergence);
    EXPECT_GT(e.partial().size(), 1u);
  }
}
