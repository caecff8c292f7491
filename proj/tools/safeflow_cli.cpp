// safeflow: run, sweep and check bilevel flow experiments from YAML configs.
//
//   safeflow run   <config> [--seed N] [--out DIR]
//   safeflow grid  <config> [--seed N] [--out DIR] [--jobs N]
//   safeflow check <config> [--seed N]
//
// Exit status: 0 success, 1 solver error (or failed check), 2 config error.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "safeflow/harness/config.hpp"
#include "safeflow/harness/runner.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kSolverFailure = 1;
constexpr int kConfigFailure = 2;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  int jobs = 1;
};

safeflow::harness::ExperimentConfig load(const Options& opt) {
  auto c = safeflow::harness::load_config(opt.config);
  if (opt.seed) c.seed = *opt.seed;
  if (opt.out) c.output_dir = *opt.out;
  return c;
}

void print_summary(const safeflow::harness::RunSummary& s) {
  std::printf("%-14s %-7s seed=%llu stop=%-8s kkt=%.3e |gy|=%.3e evals=%lld  %.2fs",
              s.problem.c_str(), s.solver.c_str(),
              static_cast<unsigned long long>(s.seed), s.stop_reason.c_str(),
              s.final_kkt.value_or(std::nan("")), s.final_norm_grad_y_g,
              static_cast<long long>(s.grad_evals), s.wall_time);
  if (s.error) std::printf("  error: %s", s.error->c_str());
  std::printf("\n");
}

int cmd_run(const Options& opt) {
  const auto c = load(opt);
  int status = kOk;
  for (const auto& s : safeflow::harness::run(c)) {
    print_summary(s);
    if (s.error) status = std::max(status, s.error_code.value_or(kSolverFailure));
  }
  std::printf("artifacts in %s\n", c.output_dir.string().c_str());
  return status;
}

int cmd_grid(const Options& opt) {
  const auto c = load(opt);
  const auto cells = safeflow::harness::ablation_grid(c, opt.jobs);
  int status = kOk;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    std::printf("[cell %zu]", i);
    for (const auto& [key, value] : cells[i].assignment)
      std::printf(" %s=%s", key.c_str(), value.c_str());
    std::printf("\n  ");
    if (cells[i].summary) {
      print_summary(*cells[i].summary);
      if (cells[i].summary->error) status = std::max(status, kSolverFailure);
    } else {
      std::printf("failed: %s\n", cells[i].failure->c_str());
      status = kConfigFailure;
    }
  }
  std::printf("grid table in %s\n", (c.output_dir / "grid.csv").string().c_str());
  return status;
}

int cmd_check(const Options& opt) {
  const auto c = load(opt);
  bool all = true;
  for (const auto& item : safeflow::harness::check_problem(c)) {
    std::printf("%-4s %-28s %.3e (tol %.0e)\n", item.passed ? "ok" : "FAIL",
                item.name.c_str(), item.value, item.tolerance);
    all = all && item.passed;
  }
  return all ? kOk : kSolverFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Safe gradient flows for bilevel optimization"};
  app.require_subcommand(1);

  Options opt;
  auto add_common = [&](CLI::App* sub, bool with_out, bool with_jobs) {
    sub->add_option("config", opt.config, "YAML experiment config")->required();
    sub->add_option("--seed", opt.seed, "override the config seed");
    if (with_out) sub->add_option("--out", opt.out, "override output_dir");
    if (with_jobs)
      sub->add_option("--jobs", opt.jobs, "parallel grid cells")
          ->check(CLI::PositiveNumber);
  };
  auto* run = app.add_subcommand("run", "run one experiment (all repeats)");
  add_common(run, true, false);
  auto* grid = app.add_subcommand("grid", "run the cartesian sweep of the config");
  add_common(grid, true, true);
  auto* check = app.add_subcommand("check", "derivative gate and oracle invariants");
  add_common(check, false, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigFailure;
  }

  try {
    if (*run) return cmd_run(opt);
    if (*grid) return cmd_grid(opt);
    return cmd_check(opt);
  } catch (const safeflow::SolverError& e) {
    std::cerr << "safeflow: " << e.what() << '\n';
    return e.code() == safeflow::ErrorCode::kInvalidConfig ? kConfigFailure
                                                           : kSolverFailure;
  } catch (const std::exception& e) {
    std::cerr << "safeflow: " << e.what() << '\n';
    return kSolverFailure;
  }
}
