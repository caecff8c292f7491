#include <cmath>

#include <gtest/gtest.h>

#include "safeflow/diagnostics.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/integrator.hpp"
#include "safeflow/problems.hpp"
#include "test_support.hpp"

namespace sf = safeflow;
using sf::Vector;

namespace {

Vector v1(double a) { return Vector::Constant(1, a); }

sf::IntegratorConfig config(double dt, double horizon, int record_every = 1) {
  sf::IntegratorConfig c;
  c.dt = dt;
  c.horizon = horizon;
  c.record_every = record_every;
  return c;
}

sf::Trajectory run(const sf::BilevelProblem& p, sf::FlowKind kind, sf::FlowParams params,
                   sf::SolverState s0, double dt, double horizon, int stride = 1) {
  return sf::integrate(sf::make_field(p, kind, params), s0, config(dt, horizon, stride),
                       sf::make_probe(p));
}

sf::Trajectory single(const sf::BilevelProblem& p, sf::SolverState s0) {
  sf::Trajectory traj;
  sf::Snapshot snap;
  snap.diag = sf::make_probe(p)(s0, snap.output);
  snap.state = std::move(s0);
  traj.snapshots.push_back(std::move(snap));
  return traj;
}

sf::ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const sf::SolverError& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected a SolverError";
  return sf::ErrorCode::kInvalidArgument;
}

}  // namespace

TEST(Constants, C) {
  auto p = sf::make_toy1();
  EXPECT_DOUBLE_EQ(sf::constant_c(p), 0.5);
  p.constants.l_yx_g = 0.0;
  EXPECT_DOUBLE_EQ(sf::constant_c(p), 1.0);
  p.constants.mu_g = 2.0;
  p.constants.l_yx_g = 1.0;
  EXPECT_DOUBLE_EQ(sf::constant_c(p), 0.8);
  p.constants.mu_g.reset();
  EXPECT_EQ(code_of([&] { sf::constant_c(p); }), sf::ErrorCode::kMissingConstant);
}

TEST(Constants, Beta) {
  auto p = sf::make_toy1();
  EXPECT_DOUBLE_EQ(sf::constant_beta(p, 0.7, {v1(2), v1(2)}), 0.0);
  EXPECT_DOUBLE_EQ(sf::constant_beta(p, 0.7, {v1(0), v1(1)}), 0.7);
  p.constants.mu_g = 2.0;
  EXPECT_DOUBLE_EQ(sf::constant_beta(p, 0.7, {v1(0), v1(3)}), 0.7 * 3 / 4);
  p.constants.mu_g.reset();
  EXPECT_EQ(code_of([&] { sf::constant_beta(p, 1.0, {v1(0), v1(1)}); }),
            sf::ErrorCode::kMissingConstant);
}

TEST(Constants, BetaUsesCouplingTerms) {
  auto p = sf::make_quadratic_ll(1, 3, 3, 5.0);
  p.constants.c_yx_g = 2.0;
  p.constants.c_yy_g = 0.5;
  const sf::SolverState s{Vector::Zero(3), Vector::Zero(3)};
  const double mu = *p.constants.mu_g;
  EXPECT_NEAR(sf::constant_beta(p, 0.0, s),
              (2.0 * *p.constants.c_x_f + 0.5 * *p.constants.c_y_f) / (mu * mu), 1e-12);
  p.constants.c_x_f.reset();
  EXPECT_EQ(code_of([&] { sf::constant_beta(p, 0.0, s); }),
            sf::ErrorCode::kMissingConstant);
}

TEST(EnergySgf, SingleSnapshot) {
  const auto p = sf::make_toy1();
  const auto e = sf::energy_sgf(single(p, {v1(0), v1(1)}), p, 1.0, 0.25);
  ASSERT_EQ(e.size(), 1u);
  // f(0,1) - 0.25 + beta |grad_y g| with beta = 1.
  EXPECT_DOUBLE_EQ(e.values[0], 1.0 - 0.25 + 1.0);
  EXPECT_EQ(e.integral[0], 0.0);
}

TEST(EnergySgf, ToyNonincreasing) {
  const auto p = sf::make_toy1();
  const auto traj = run(p, sf::FlowKind::kSgf, {.alpha = 1.0}, {v1(0), v1(1)}, 1e-3, 5.0);
  const auto e = sf::energy_sgf(traj, p, 1.0, 0.25);
  EXPECT_EQ(sf::count_increases(e, 1e-6), 0);
  for (std::size_t k = 0; k < e.size(); ++k) {
    EXPECT_DOUBLE_EQ(e.values[k], e.objective_gap[k] + e.barrier[k] + e.integral[k]);
    if (k) EXPECT_GE(e.integral[k], e.integral[k - 1]);
    EXPECT_EQ(e.times[k], traj.snapshots[k].state.t);
  }
}

TEST(EnergySgf, QuadraticNonincreasing) {
  const auto p = sf::make_quadratic_ll(0, 5, 5, 10.0);
  std::mt19937_64 rng(0);
  const sf::SolverState s0{sf::testing::gaussian(rng, 5), sf::testing::gaussian(rng, 5)};
  const auto traj = run(p, sf::FlowKind::kSgf, {.alpha = 1.0}, s0, 1e-3, 2.0);
  EXPECT_EQ(sf::count_increases(sf::energy_sgf(traj, p, 1.0, 0.0), 1e-6), 0);
}

TEST(EnergyRxgf, SingleSnapshotAndConstant) {
  const auto p = sf::make_toy1();
  const auto e = sf::energy_rxgf(single(p, {v1(0), v1(0.3)}), p, 0.0625);
  EXPECT_DOUBLE_EQ(e.values[0], 0.5 + 0.5 * 1.7 * 1.7 - 0.0625);
  EXPECT_EQ(e.c, sf::constant_c(p));
  EXPECT_EQ(e.barrier[0], 0.0);
}

TEST(EnergyRxgf, ToyNonincreasingFromInside) {
  const auto p = sf::make_toy1();
  const auto traj = run(p, sf::FlowKind::kRxgf, {.alpha = 1.0, .eps = 0.5},
                        {v1(0), v1(0.3)}, 1e-3, 5.0);
  EXPECT_EQ(sf::count_increases(sf::energy_rxgf(traj, p, 0.0625), 1e-6), 0);
}

TEST(EnergyPc, SingleSnapshot) {
  const auto p = sf::make_toy1();
  const auto e = sf::energy_pc(single(p, {v1(0), v1(1)}), p);
  // l(0) - l* = f(0, 0) - 0.25.
  EXPECT_DOUBLE_EQ(e.values[0], 2.5 - 0.25);
}

TEST(EnergyPc, ToyRiseBoundedByTrackingError) {
  const auto p = sf::make_toy1();
  const auto traj = run(p, sf::FlowKind::kPredictionCorrection, {.beta = 1.0},
                        {v1(0), v1(1)}, 1e-3, 5.0);
  const auto e = sf::energy_pc(traj, p);
  EXPECT_EQ(sf::count_pc_bound_violations(e, 1e-6), 0);
  // Tracking error on the toy problem is |y - y*(x)|^2 since M1 = 1.
  for (std::size_t k = 0; k < e.size(); k += 500) {
    const auto& s = traj.snapshots[k].state;
    EXPECT_NEAR(e.tracking[k], std::pow(s.y(0) - s.x(0), 2), 1e-12);
  }
  const auto bound = sf::pc_time_average_bound(e, p, 1.0, 1.0);
  EXPECT_TRUE(bound.checked);
  EXPECT_LE(bound.lhs, *bound.rhs);
}

TEST(EnergyPc, BoundNotCheckedWithoutM1) {
  auto p = sf::make_toy1();
  p.constants.m_1.reset();
  const auto e = sf::energy_pc(single(p, {v1(0), v1(1)}), p);
  const auto bound = sf::pc_time_average_bound(e, p, 1.0, 1.0);
  EXPECT_FALSE(bound.checked);
  EXPECT_TRUE(bound.holds());
}

TEST(Contraction, OnManifoldStaysZero) {
  const auto p = sf::make_toy1();
  const auto traj = run(p, sf::FlowKind::kSgf, {.alpha = 1.0}, {v1(0.2), v1(0.2)}, 0.01, 2.0);
  EXPECT_LE(sf::contraction_check(traj, 1.0), 1e-8);
}

TEST(Contraction, AcrossAlpha) {
  const auto p = sf::make_toy1();
  for (double alpha : {0.01, 0.1, 1.0}) {
    const auto traj = run(p, sf::FlowKind::kSgf, {.alpha = alpha}, {v1(0), v1(1)},
                          1e-2 / alpha, 5.0 / alpha);
    EXPECT_LE(sf::contraction_check(traj, alpha), 1e-6) << "alpha=" << alpha;
  }
}

TEST(Contraction, ReachTimeScalesWithOneOverAlpha) {
  const auto p = sf::make_toy1();
  std::vector<double> times;
  for (double alpha : {0.01, 1.0}) {
    const auto traj = run(p, sf::FlowKind::kSgf, {.alpha = alpha}, {v1(0), v1(1)},
                          1e-3 / alpha, 6.0 / alpha);
    times.push_back(*sf::first_time_below(traj, 0.01));
  }
  EXPECT_NEAR(times[0] / times[1], 100.0, 1.0);
}

TEST(Kkt, ToyValues) {
  const auto p = sf::make_toy1();
  EXPECT_LE(sf::kkt_residual(p, v1(1.5), v1(1.5)), 1e-9);
  EXPECT_GE(sf::kkt_residual(p, v1(0), v1(0)), 1.0);
  EXPECT_GE(sf::kkt_residual(p, v1(0), v1(0.7)), 0.7);
}

TEST(Kkt, RelaxedToyOptimum) {
  // min f s.t. |y - x| <= eps is attained at (1.5 - eps/2, 1.5 + eps/2).
  const auto p = sf::make_toy1();
  EXPECT_LE(sf::relaxed_kkt_residual(p, v1(1.25), v1(1.75), 0.5), 1e-12);
  EXPECT_GE(sf::relaxed_kkt_residual(p, v1(1.5), v1(1.5), 0.5), 0.1);
}

TEST(Feasibility, RxgfFeasibleStartStaysInside) {
  const auto p = sf::make_toy1();
  const auto traj = run(p, sf::FlowKind::kRxgf, {.alpha = 1.0, .eps = 0.1},
                        {v1(0), v1(0)}, 0.01, 10.0);
  EXPECT_EQ(sf::feasibility_fraction(traj, 0.1), 1.0);
}

TEST(Feasibility, RawGradientFlowLeavesTheSet) {
  // f pulls y towards x + 1, away from y*(x) = x.
  auto p = sf::make_toy1();
  p.upper = [](const Vector& x, const Vector& y) {
    const double r = y(0) - x(0) - 1.0;
    return sf::UpperEval{0.5 * r * r, v1(-r), v1(r)};
  };
  const auto raw = run(p, sf::FlowKind::kRawGradient, {}, {v1(0), v1(0)}, 0.01, 5.0);
  EXPECT_LT(sf::feasibility_fraction(raw, 0.01), 1.0);
  const auto safe = run(p, sf::FlowKind::kRxgf, {.alpha = 1.0, .eps = 0.01},
                        {v1(0), v1(0)}, 0.01, 5.0);
  EXPECT_EQ(sf::feasibility_fraction(safe, 0.01), 1.0);
}

TEST(Feasibility, SingleSnapshot) {
  const auto p = sf::make_toy1();
  EXPECT_EQ(sf::feasibility_fraction(single(p, {v1(0), v1(0)}), 0.1), 1.0);
}

TEST(PcEnvelope, ToyAndQuadratic) {
  std::vector<sf::BilevelProblem> problems{sf::make_toy1(),
                                           sf::make_quadratic_ll(0, 5, 5, 10.0)};
  std::mt19937_64 rng(8);
  for (const auto& p : problems) {
    const sf::SolverState s0{sf::testing::gaussian(rng, p.dim_upper),
                             sf::testing::gaussian(rng, p.dim_lower)};
    for (double beta : {0.5, 1.0, 2.0}) {
      const auto traj = run(p, sf::FlowKind::kPredictionCorrection, {.beta = beta}, s0,
                            0.01, 5.0);
      EXPECT_LE(sf::pc_envelope_ratio(traj, p, beta), 1.0 + 1e-3);
    }
  }
}
