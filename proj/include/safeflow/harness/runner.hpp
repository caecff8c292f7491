#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "safeflow/diagnostics.hpp"
#include "safeflow/error.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/harness/aid.hpp"
#include "safeflow/harness/config.hpp"
#include "safeflow/harness/csv.hpp"
#include "safeflow/harness/hypercleaning_eval.hpp"
#include "safeflow/integrator.hpp"
#include "safeflow/problems.hpp"

namespace safeflow::harness {

using Json = nlohmann::ordered_json;

/// Per-step rise tolerated before an energy increase counts as a violation.
inline constexpr double kEnergySlack = 1e-6;
/// A trajectory has "reached" eps once |grad_y g| <= (1 + kReachRtol) eps.
/// The relaxed flow only approaches the boundary of {h <= eps^2}
/// asymptotically from outside, so an exact threshold is never hit.
inline constexpr double kReachRtol = 0.01;

/// A problem together with whatever the evaluators need besides the oracles.
/// Held by pointer: velocity fields keep a reference to `problem`.
struct ProblemInstance {
  BilevelProblem problem;
  std::shared_ptr<const HypercleaningData> hypercleaning;
};

inline std::shared_ptr<const ProblemInstance> build_problem(const ExperimentConfig& c) {
  const auto& p = c.problem;
  const std::uint64_t seed = p.seed ? *p.seed : c.seed;
  auto inst = std::make_shared<ProblemInstance>();
  try {
    if (p.name == "toy1") {
      inst->problem = make_toy1();
    } else if (p.name == "quadratic_ll") {
      inst->problem = make_quadratic_ll(seed, p.n, p.m, p.cond_max);
    } else if (p.name == "hypercleaning") {
      auto hc = make_hypercleaning(seed, p.n_train, p.n_val, p.dim, p.classes,
                                   p.corrupt_frac, p.reg);
      inst->problem = std::move(hc.problem);
      inst->hypercleaning = std::move(hc.data);
    } else {
      throw config_error("unknown problem '" + p.name + "'");
    }
  } catch (const SolverError& e) {
    if (e.code() == ErrorCode::kInvalidArgument) throw config_error(e.message());
    throw;
  }
  if (p.m_1) inst->problem.constants.m_1 = *p.m_1;
  return inst;
}

namespace detail {

inline Vector init_vector(const std::vector<double>& list,
                          const std::optional<double>& fill, Eigen::Index size,
                          std::mt19937_64* rng, double scale, const char* name) {
  if (!list.empty()) {
    if (static_cast<Eigen::Index>(list.size()) != size) {
      throw config_error(std::string("init.") + name + " has " +
                         std::to_string(list.size()) + " entries, problem needs " +
                         std::to_string(size));
    }
    return Eigen::Map<const Vector>(list.data(), size);
  }
  if (fill) return Vector::Constant(size, *fill);
  if (!rng) throw config_error(std::string("explicit init needs init.") + name);
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(size);
  for (Eigen::Index i = 0; i < size; ++i) v(i) = normal(*rng);
  return v;
}

}  // namespace detail

inline SolverState initial_state(const ExperimentConfig& c, const BilevelProblem& problem) {
  std::mt19937_64 rng(c.seed + 0x5851f42d4c957f2dULL);
  std::mt19937_64* source = c.init.mode == InitMode::kExplicit ? nullptr : &rng;
  SolverState s;
  s.x = detail::init_vector(c.init.x, c.init.x_fill, problem.dim_upper, source,
                            c.init.scale, "x");
  if (c.init.mode == InitMode::kFeasible) {
    Vector start = Vector::Zero(problem.dim_lower);
    if (!c.init.y.empty() || c.init.y_fill)
      start = detail::init_vector(c.init.y, c.init.y_fill, problem.dim_lower, nullptr,
                                  1.0, "y");
    const double tol = c.eps ? 0.5 * *c.eps : 1e-10;
    s.y = solve_lower(problem, s.x, tol, 100, start);
  } else {
    s.y = detail::init_vector(c.init.y, c.init.y_fill, problem.dim_lower, source,
                              c.init.scale, "y");
  }
  return s;
}

inline Json config_to_json(const ExperimentConfig& c) {
  const auto& p = c.problem;
  Json problem{{"name", p.name}};
  if (p.seed) problem["seed"] = *p.seed;
  if (p.name == "quadratic_ll") {
    problem["n"] = p.n;
    problem["m"] = p.m;
    problem["cond_max"] = p.cond_max;
  } else if (p.name == "hypercleaning") {
    problem["n_train"] = p.n_train;
    problem["n_val"] = p.n_val;
    problem["dim"] = p.dim;
    problem["classes"] = p.classes;
    problem["corrupt_frac"] = p.corrupt_frac;
    problem["reg"] = p.reg;
  }
  if (p.m_1) problem["m_1"] = *p.m_1;

  Json solver{{"name", c.solver}};
  if (c.alpha) solver["alpha"] = *c.alpha;
  if (c.beta) solver["beta"] = *c.beta;
  if (c.eps) solver["eps"] = *c.eps;

  const auto& i = c.integrator;
  Json j{{"problem", problem},
         {"solver", solver},
         {"integrator",
          {{"dt", i.dt},
           {"horizon", i.horizon},
           {"stop_velocity_tol", i.stop_velocity_tol},
           {"stop_kkt_tol", i.stop_kkt_tol},
           {"record_every", i.record_every}}},
         {"seed", c.seed}};
  const char* modes[] = {"explicit", "random", "feasible"};
  Json init{{"mode", modes[static_cast<int>(c.init.mode)]}, {"scale", c.init.scale}};
  if (!c.init.x.empty()) init["x"] = c.init.x;
  if (!c.init.y.empty()) init["y"] = c.init.y;
  if (c.init.x_fill) init["x_fill"] = *c.init.x_fill;
  if (c.init.y_fill) init["y_fill"] = *c.init.y_fill;
  j["init"] = init;
  if (c.solver == "aid") {
    Json aid{{"inner_steps", c.aid.inner_steps}, {"outer_step", c.aid.outer_step}};
    if (c.aid.inner_step) aid["inner_step"] = *c.aid.inner_step;
    if (c.aid.budget) aid["budget"] = *c.aid.budget;
    j["aid"] = aid;
  }
  if (c.f_ref) j["f_ref"] = *c.f_ref;
  return j;
}

/// FNV-1a of the canonical JSON form; output paths are not part of it.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : config_to_json(c).dump()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Gradient evaluations of the configured horizon under RK-4, the budget an
/// AID run is matched against.
inline std::int64_t flow_budget(const IntegratorConfig& integ) {
  return integ.step_count() * 4 * safeflow::detail::kPointCost;
}

struct EnergySummary {
  std::string kind;  // sgf | rxgf | pc | objective
  std::optional<int> violations;
  std::optional<double> max_increase;
  std::optional<std::string> skipped;
  double beta = 0.0;
  double c = 0.0;
  double f_ref = 0.0;
};

struct RunSummary {
  std::string problem;
  std::string solver;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::string stop_reason;
  std::optional<std::string> error;
  std::optional<int> error_code;  // process exit code class, 1 or 2
  std::size_t snapshots = 0;
  double final_t = 0.0;
  std::vector<double> final_x;
  std::vector<double> final_y;
  std::optional<double> final_kkt;
  std::optional<double> final_kkt_relaxed;
  double final_norm_grad_y_g = 0.0;
  double final_f = 0.0;
  std::int64_t grad_evals = 0;
  double wall_time = 0.0;
  std::optional<double> time_to_eps;
  std::optional<double> feasibility_fraction;
  EnergySummary energy;
  std::optional<double> aid_inner_step;
  std::optional<std::int64_t> aid_budget;
  std::optional<HypercleaningReport> hypercleaning;
  Json config;

  bool ok() const { return !error.has_value(); }
};

inline Json to_json(const RunSummary& s, bool with_wall_time = true) {
  auto opt = [](const auto& v) -> Json {
    if (v) return Json(*v);
    return Json(nullptr);
  };
  Json j{{"problem", s.problem},
         {"solver", s.solver},
         {"seed", s.seed},
         {"config_hash", s.config_hash},
         {"stop_reason", s.stop_reason},
         {"error", opt(s.error)},
         {"snapshots", s.snapshots},
         {"final_t", s.final_t},
         {"final_kkt", opt(s.final_kkt)},
         {"final_kkt_relaxed", opt(s.final_kkt_relaxed)},
         {"final_norm_grad_y_g", s.final_norm_grad_y_g},
         {"final_f", s.final_f},
         {"grad_evals", s.grad_evals},
         {"time_to_eps", opt(s.time_to_eps)},
         {"feasibility_fraction", opt(s.feasibility_fraction)}};
  if (with_wall_time) j["wall_time"] = s.wall_time;
  j["energy"] = Json{{"kind", s.energy.kind},
                     {"violations", opt(s.energy.violations)},
                     {"max_increase", opt(s.energy.max_increase)},
                     {"slack", kEnergySlack},
                     {"skipped", opt(s.energy.skipped)},
                     {"beta", s.energy.beta},
                     {"c", s.energy.c},
                     {"f_ref", s.energy.f_ref}};
  if (s.aid_inner_step)
    j["aid"] = Json{{"inner_step", *s.aid_inner_step}, {"budget", opt(s.aid_budget)}};
  if (s.hypercleaning) {
    const auto& h = *s.hypercleaning;
    j["hypercleaning"] = Json{{"val_loss_initial", h.initial_val_loss()},
                              {"val_loss_final", h.final_val_loss()},
                              {"mean_clean_weight", h.mean_clean_weight},
                              {"mean_corrupted_weight", opt(h.mean_corrupted_weight)},
                              {"weight_separation", opt(h.weight_separation)}};
  }
  j["final_x"] = s.final_x;
  j["final_y"] = s.final_y;
  j["config"] = s.config;
  return j;
}

/// Everything one run produces, before anything touches the filesystem.
struct RunOutcome {
  Trajectory trajectory;
  std::optional<EnergySeries> energy;
  RunSummary summary;
};

namespace detail {

inline std::optional<EnergySeries> compute_energy(const ExperimentConfig& c,
                                                  const ProblemInstance& inst,
                                                  const Trajectory& traj,
                                                  EnergySummary& out) {
  const BilevelProblem& problem = inst.problem;
  const double f_ref = c.f_ref ? *c.f_ref : problem.truth.optimal_value.value_or(0.0);
  out.f_ref = f_ref;
  std::optional<EnergySeries> e;
  try {
    if (c.solver == "sgf") {
      out.kind = "sgf";
      e = energy_sgf(traj, problem, *c.alpha, f_ref);
    } else if (c.solver == "rxgf" || c.solver == "compact") {
      out.kind = "rxgf";
      e = energy_rxgf(traj, problem, f_ref);
    } else if (c.solver == "pc") {
      out.kind = "pc";
      e = energy_pc(traj, problem, f_ref);
    }
  } catch (const SolverError& err) {
    out.skipped = err.what();
    e.reset();
  }
  if (e) {
    out.beta = e->beta;
    out.c = e->c;
    out.violations = out.kind == "pc" ? count_pc_bound_violations(*e, kEnergySlack)
                                      : count_increases(*e, kEnergySlack);
    if (e->size() > 1) out.max_increase = max_increase(*e);
    return e;
  }

  // No certificate for this solver: report the shifted objective only.
  if (out.kind.empty()) out.kind = "objective";
  EnergySeries obj;
  obj.f_ref = f_ref;
  for (const auto& snap : traj.snapshots) {
    obj.times.push_back(snap.state.t);
    obj.objective_gap.push_back(snap.diag.f - f_ref);
    obj.barrier.push_back(0.0);
    obj.integral.push_back(0.0);
    obj.values.push_back(snap.diag.f - f_ref);
  }
  return obj;
}

inline void fill_summary(const ExperimentConfig& c, const ProblemInstance& inst,
                         const Trajectory& traj, RunSummary& s) {
  s.snapshots = traj.size();
  if (traj.size() == 0) return;
  const auto& last = traj.back().state;
  s.final_t = last.t;
  s.final_x.assign(last.x.data(), last.x.data() + last.x.size());
  s.final_y.assign(last.y.data(), last.y.data() + last.y.size());
  s.final_norm_grad_y_g = traj.back().diag.norm_grad_y_g;
  s.final_f = traj.back().diag.f;
  s.grad_evals = last.grad_evals;
  try {
    s.final_kkt = kkt_residual(inst.problem, last.x, last.y);
    if (c.eps) s.final_kkt_relaxed = relaxed_kkt_residual(inst.problem, last.x, last.y, *c.eps);
  } catch (const SolverError&) {
    // Left null; the trajectory itself is still reported.
  }
  if (c.eps) {
    s.time_to_eps = first_time_below(traj, (1.0 + kReachRtol) * *c.eps);
    s.feasibility_fraction = feasibility_fraction(traj, *c.eps);
  }
  if (inst.hypercleaning) s.hypercleaning = hypercleaning_eval(traj, *inst.hypercleaning);
}

}  // namespace detail

/// Runs one configured experiment in memory. Solver failures are captured in
/// the summary together with the partial trajectory; configuration problems
/// throw.
inline RunOutcome simulate(const ExperimentConfig& c,
                           std::shared_ptr<const ProblemInstance> inst = nullptr) {
  c.validate();
  if (!inst) inst = build_problem(c);
  const BilevelProblem& problem = inst->problem;

  RunOutcome out;
  RunSummary& s = out.summary;
  s.problem = problem.name;
  s.solver = c.solver;
  s.seed = c.seed;
  s.config_hash = config_hash(c);
  s.config = config_to_json(c);

  const auto start = std::chrono::steady_clock::now();
  try {
    const SolverState state0 = initial_state(c, problem);
    const Probe probe = make_probe(problem, c.integrator.stop_kkt_tol > 0.0);
    if (c.solver == "aid") {
      AidSettings settings;
      settings.inner_steps = c.aid.inner_steps;
      settings.outer_step = c.aid.outer_step;
      settings.inner_step = c.aid.inner_step;
      settings.budget = c.aid.budget ? *c.aid.budget : flow_budget(c.integrator);
      const std::int64_t per_outer = settings.inner_steps + safeflow::detail::kPointCost;
      const auto max_outer = static_cast<int>(settings.budget / per_outer + 1);
      auto result = aid_baseline(problem, state0, settings, max_outer, probe);
      out.trajectory = std::move(result.trajectory);
      s.aid_inner_step = result.inner_step;
      s.aid_budget = settings.budget;
    } else {
      const FlowKind kind = *parse_flow_kind(c.solver);
      out.trajectory = integrate(make_field(problem, kind, c.flow_params()), state0,
                                 c.integrator, probe);
    }
  } catch (const IntegrationError& e) {
    out.trajectory = e.partial();
    s.error = e.what();
    s.error_code = 1;
  } catch (const SolverError& e) {
    s.error = e.what();
    s.error_code = e.code() == ErrorCode::kInvalidConfig ? 2 : 1;
  }
  out.trajectory.solver = c.solver;
  out.trajectory.problem = problem.name;
  out.trajectory.config_hash = s.config_hash;
  s.stop_reason = s.error ? "error" : std::string(to_string(out.trajectory.stop));

  if (out.trajectory.size() > 0) {
    detail::fill_summary(c, *inst, out.trajectory, s);
    out.energy = detail::compute_energy(c, *inst, out.trajectory, s.energy);
  }
  s.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline void write_artifacts(const std::filesystem::path& dir, const RunOutcome& out) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw config_error("cannot create output directory " + dir.string());
  write_file(dir / "trajectory.csv",
             [&](std::ostream& os) { write_trajectory_csv(os, out.trajectory); });
  write_file(dir / "energy.csv", [&](std::ostream& os) {
    if (out.energy) write_energy_csv(os, *out.energy);
  });
  write_file(dir / "summary.json",
             [&](std::ostream& os) { os << to_json(out.summary).dump(2) << '\n'; });
}

/// run(): one experiment per repeat, seeds seed, seed+1, ...; with more than
/// one repeat each goes to output_dir/repeat_<k>.
inline std::vector<RunSummary> run(const ExperimentConfig& c) {
  std::vector<RunSummary> summaries;
  for (int k = 0; k < c.repeats; ++k) {
    ExperimentConfig rc = c;
    rc.seed = c.seed + static_cast<std::uint64_t>(k);
    rc.repeats = 1;
    const auto dir =
        c.repeats == 1 ? c.output_dir : c.output_dir / ("repeat_" + std::to_string(k));
    RunOutcome out = simulate(rc);
    write_artifacts(dir, out);
    summaries.push_back(std::move(out.summary));
  }
  return summaries;
}

// ---------------------------------------------------------------------------
// Ablation grids

struct GridCell {
  std::vector<std::pair<std::string, std::string>> assignment;
  std::filesystem::path dir;
  std::optional<RunSummary> summary;
  std::optional<std::string> failure;  // config errors and the like
};

/// Cartesian product of the sweep in key order, last key fastest.
inline std::vector<std::vector<std::pair<std::string, std::string>>> expand_sweep(
    const std::map<std::string, std::vector<std::string>>& sweep) {
  std::vector<std::vector<std::pair<std::string, std::string>>> cells{{}};
  for (const auto& [key, values] : sweep) {
    std::vector<std::vector<std::pair<std::string, std::string>>> next;
    for (const auto& partial : cells) {
      for (const auto& v : values) {
        auto cell = partial;
        cell.emplace_back(key, v);
        next.push_back(std::move(cell));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

inline std::vector<std::string> grid_columns(const ExperimentConfig& base) {
  std::vector<std::string> cols{"cell"};
  for (const auto& kv : base.sweep) cols.push_back(kv.first);
  for (const char* c : {"status", "stop_reason", "final_kkt", "final_norm_grad_y_g",
                        "final_f", "grad_evals", "time_to_eps", "feasibility_fraction",
                        "energy_violations", "error"})
    cols.emplace_back(c);
  return cols;
}

inline void write_grid_csv(std::ostream& os, const ExperimentConfig& base,
                           const std::vector<GridCell>& cells) {
  auto opt = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  auto quote = [](std::string s) {
    for (auto& ch : s)
      if (ch == ',' || ch == '\n') ch = ';';
    return s;
  };
  detail::write_row(os, grid_columns(base));
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& cell = cells[i];
    std::vector<std::string> row{std::to_string(i)};
    for (const auto& kv : cell.assignment) row.push_back(kv.second);
    if (!cell.summary) {
      row.insert(row.end(), {"failed", "", "", "", "", "", "", "", ""});
      row.push_back(quote(cell.failure.value_or("")));
    } else {
      const auto& s = *cell.summary;
      row.push_back(s.ok() ? "ok" : "failed");
      row.push_back(s.stop_reason);
      row.push_back(opt(s.final_kkt));
      row.push_back(format_double(s.final_norm_grad_y_g));
      row.push_back(format_double(s.final_f));
      row.push_back(std::to_string(s.grad_evals));
      row.push_back(opt(s.time_to_eps));
      row.push_back(opt(s.feasibility_fraction));
      row.push_back(s.energy.violations ? std::to_string(*s.energy.violations) : "");
      row.push_back(quote(s.error.value_or("")));
    }
    detail::write_row(os, row);
  }
}

/// Runs every cell of base.sweep (a singleton grid when empty) on `jobs`
/// threads. Each cell writes its artifacts to output_dir/cell_<i>; a failing
/// cell is recorded and the rest continue. Writes output_dir/grid.csv when
/// `write` is set.
inline std::vector<GridCell> ablation_grid(const ExperimentConfig& base, int jobs = 1,
                                           bool write = true) {
  const auto assignments = expand_sweep(base.sweep);
  std::vector<GridCell> cells(assignments.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    cells[i].assignment = assignments[i];
    cells[i].dir = base.output_dir / ("cell_" + std::to_string(i));
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      GridCell& cell = cells[i];
      try {
        ExperimentConfig c = base;
        c.sweep.clear();
        c.repeats = 1;
        for (const auto& [key, value] : cell.assignment) apply_override(c, key, value);
        c.output_dir = cell.dir;
        c.validate();
        RunOutcome out = simulate(c);
        if (write) write_artifacts(cell.dir, out);
        cell.summary = std::move(out.summary);
      } catch (const std::exception& e) {
        cell.failure = e.what();
      }
    }
  };
  const int threads = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  if (write) {
    std::error_code ec;
    std::filesystem::create_directories(base.output_dir, ec);
    write_file(base.output_dir / "grid.csv",
               [&](std::ostream& os) { write_grid_csv(os, base, cells); });
  }
  return cells;
}

// ---------------------------------------------------------------------------
// check: derivative gate and oracle invariants on the configured problem

struct CheckItem {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

inline std::vector<CheckItem> check_problem(const ExperimentConfig& c, int points = 10) {
  const auto inst = build_problem(c);
  const BilevelProblem& problem = inst->problem;
  std::mt19937_64 rng(c.seed + 0x2545f4914f6cdd1dULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Eigen::Index size) {
    Vector v(size);
    for (Eigen::Index i = 0; i < size; ++i) v(i) = normal(rng);
    return v;
  };

  double fd_worst = 0.0, sym_worst = 0.0, eig_worst = 0.0, truth_worst = 0.0;
  for (int k = 0; k < points; ++k) {
    SolverState pt;
    pt.x = draw(problem.dim_upper);
    pt.y = draw(problem.dim_lower);
    fd_worst = std::max(fd_worst, fd_check(problem, pt, 1e-5).max());

    const LowerEval low = problem.eval_lower(pt.x, pt.y, true);
    const double scale = std::max(1.0, low.hess_yy.norm());
    sym_worst = std::max(sym_worst, (low.hess_yy - low.hess_yy.transpose()).norm() / scale);
    if (problem.constants.mu_g) {
      const Eigen::SelfAdjointEigenSolver<Matrix> eig(low.hess_yy, Eigen::EigenvaluesOnly);
      eig_worst = std::max(eig_worst, *problem.constants.mu_g - eig.eigenvalues()(0));
    }
    if (problem.truth.lower_solution) {
      const Vector y_star = problem.truth.lower_solution(pt.x);
      truth_worst = std::max(
          truth_worst, problem.eval_lower(pt.x, y_star, false).grad_y.norm());
    }
  }

  std::vector<CheckItem> items;
  items.push_back({"fd_check max relative error", fd_worst, 1e-5, fd_worst <= 1e-5});
  items.push_back({"hess_yy asymmetry", sym_worst, 1e-10, sym_worst <= 1e-10});
  if (problem.constants.mu_g)
    items.push_back({"mu_g minus min eigenvalue", eig_worst, 1e-8, eig_worst <= 1e-8});
  if (problem.truth.lower_solution)
    items.push_back({"|grad_y g(x, y*(x))|", truth_worst, 1e-8, truth_worst <= 1e-8});
  return items;
}

}  // namespace safeflow::harness
