#pragma once

// Experiment configuration, read from a YAML document. The grammar is
// documented in README.md; every key maps onto one field below.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "safeflow/error.hpp"
#include "safeflow/filters.hpp"
#include "safeflow/integrator.hpp"

namespace safeflow::harness {

inline SolverError config_error(const std::string& what) {
  return SolverError(ErrorCode::kInvalidConfig, what);
}

struct ProblemSpec {
  std::string name;  // toy1 | quadratic_ll | hypercleaning
  std::optional<std::uint64_t> seed;  // defaults to the experiment seed
  int n = 20;
  int m = 20;
  double cond_max = 10.0;
  int n_train = 200;
  int n_val = 100;
  int dim = 10;
  int classes = 3;
  double corrupt_frac = 0.25;
  double reg = 0.001;
  std::optional<double> m_1;  // user-supplied hypergradient error constant
};

enum class InitMode { kExplicit, kRandom, kFeasible };

/// Vector source for x0 / y0: an explicit list, a constant fill, or seeded
/// N(0, scale^2) draws when both are absent.
struct InitSpec {
  InitMode mode = InitMode::kRandom;
  std::vector<double> x;
  std::vector<double> y;
  std::optional<double> x_fill;
  std::optional<double> y_fill;
  double scale = 1.0;
};

struct AidSpec {
  int inner_steps = 10;
  double outer_step = 0.1;
  std::optional<double> inner_step;  // default 1 / lambda_max(hess_yy) at x0
  std::optional<std::int64_t> budget;  // default: the flow's RK-4 budget
};

struct ExperimentConfig {
  ProblemSpec problem;
  std::string solver;  // sgf | compact | rxgf | pc | raw-gf | aid
  std::optional<double> alpha;
  std::optional<double> beta;
  std::optional<double> eps;
  IntegratorConfig integrator;
  InitSpec init;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  int repeats = 1;
  AidSpec aid;
  std::optional<double> f_ref;
  // Ablation sweep: parameter name -> values, expanded as a cartesian grid.
  std::map<std::string, std::vector<std::string>> sweep;

  void validate() const;
  FlowParams flow_params() const;
};

inline const std::vector<std::string>& solver_names() {
  static const std::vector<std::string> names{"sgf", "compact", "rxgf",
                                              "pc",  "raw-gf",  "aid"};
  return names;
}

inline const std::vector<std::string>& sweepable_keys() {
  static const std::vector<std::string> keys{
      "alpha", "beta", "eps", "dt", "horizon", "seed", "solver", "aid.inner_steps",
      "aid.outer_step"};
  return keys;
}

inline void ExperimentConfig::validate() const {
  const auto& names = solver_names();
  if (std::find(names.begin(), names.end(), solver) == names.end())
    throw config_error("unknown solver '" + solver + "'");
  if (problem.name != "toy1" && problem.name != "quadratic_ll" &&
      problem.name != "hypercleaning")
    throw config_error("unknown problem '" + problem.name + "'");

  auto positive = [](const std::optional<double>& v, const char* key) {
    if (v && !(*v > 0.0))
      throw config_error(std::string(key) + " must be positive");
  };
  positive(alpha, "alpha");
  positive(beta, "beta");
  positive(eps, "eps");
  if ((solver == "sgf" || solver == "compact" || solver == "rxgf") && !alpha)
    throw config_error("solver " + solver + " needs alpha");
  if (solver == "rxgf" && !eps) throw config_error("solver rxgf needs eps");
  if (solver == "pc" && !beta) throw config_error("solver pc needs beta");
  if (solver == "aid") {
    if (aid.inner_steps < 1) throw config_error("aid.inner_steps must be >= 1");
    if (!(aid.outer_step > 0.0)) throw config_error("aid.outer_step must be positive");
    positive(aid.inner_step, "aid.inner_step");
    if (aid.budget && *aid.budget < 1) throw config_error("aid.budget must be >= 1");
  }
  if (repeats < 1) throw config_error("repeats must be >= 1");
  if (problem.cond_max < 1.0) throw config_error("problem.cond_max must be >= 1");

  try {
    integrator.validate();
  } catch (const SolverError& e) {
    throw config_error(e.message());
  }

  const auto& keys = sweepable_keys();
  for (const auto& [key, values] : sweep) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw config_error("parameter '" + key + "' cannot be swept");
    if (values.empty()) throw config_error("sweep over '" + key + "' is empty");
  }
}

inline FlowParams ExperimentConfig::flow_params() const {
  FlowParams p;
  if (alpha) p.alpha = *alpha;
  if (beta) p.beta = *beta;
  if (eps) p.eps = *eps;
  return p;
}

namespace detail {

template <typename T>
T read(const YAML::Node& node, const std::string& key) {
  try {
    return node.as<T>();
  } catch (const YAML::Exception&) {
    throw config_error("bad value for '" + key + "'");
  }
}

template <typename T>
void read_into(const YAML::Node& parent, const char* key, T& out,
               const std::string& prefix = "") {
  if (const YAML::Node node = parent[key]) out = read<T>(node, prefix + key);
}

template <typename T>
void read_into(const YAML::Node& parent, const char* key, std::optional<T>& out,
               const std::string& prefix = "") {
  if (const YAML::Node node = parent[key]) out = read<T>(node, prefix + key);
}

inline void reject_unknown(const YAML::Node& map, const std::string& section,
                           std::initializer_list<const char*> allowed) {
  if (!map.IsMap()) throw config_error("section '" + section + "' must be a map");
  for (const auto& kv : map) {
    const auto key = kv.first.as<std::string>();
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) {
      throw config_error("unknown key '" + key + "'" +
                         (section.empty() ? "" : " in '" + section + "'"));
    }
  }
}

// Scalars are stored as text so sweeps can hold solver names and numbers.
inline std::vector<std::string> scalar_list(const YAML::Node& node,
                                            const std::string& key) {
  std::vector<std::string> out;
  if (node.IsScalar()) {
    out.push_back(node.Scalar());
  } else if (node.IsSequence()) {
    for (const auto& item : node) {
      if (!item.IsScalar()) throw config_error("sweep '" + key + "' must list scalars");
      out.push_back(item.Scalar());
    }
  } else {
    throw config_error("sweep '" + key + "' must be a scalar or a list");
  }
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_config(const YAML::Node& root) {
  using detail::read_into;
  if (!root || !root.IsMap()) throw config_error("config must be a YAML map");
  detail::reject_unknown(root, "",
                         {"problem", "solver", "integrator", "init", "seed",
                          "output_dir", "repeats", "aid", "sweep", "f_ref"});
  ExperimentConfig c;

  const YAML::Node problem = root["problem"];
  if (!problem) throw config_error("missing section 'problem'");
  if (problem.IsScalar()) {
    c.problem.name = problem.Scalar();
  } else {
    detail::reject_unknown(problem, "problem",
                           {"name", "seed", "n", "m", "cond_max", "n_train", "n_val",
                            "dim", "classes", "corrupt_frac", "reg", "m_1"});
    if (!problem["name"]) throw config_error("missing 'problem.name'");
    auto& p = c.problem;
    read_into(problem, "name", p.name, "problem.");
    read_into(problem, "seed", p.seed, "problem.");
    read_into(problem, "n", p.n, "problem.");
    p.m = p.n;
    read_into(problem, "m", p.m, "problem.");
    read_into(problem, "cond_max", p.cond_max, "problem.");
    read_into(problem, "n_train", p.n_train, "problem.");
    read_into(problem, "n_val", p.n_val, "problem.");
    read_into(problem, "dim", p.dim, "problem.");
    read_into(problem, "classes", p.classes, "problem.");
    read_into(problem, "corrupt_frac", p.corrupt_frac, "problem.");
    read_into(problem, "reg", p.reg, "problem.");
    read_into(problem, "m_1", p.m_1, "problem.");
  }

  const YAML::Node solver = root["solver"];
  if (!solver) throw config_error("missing section 'solver'");
  if (solver.IsScalar()) {
    c.solver = solver.Scalar();
  } else {
    detail::reject_unknown(solver, "solver", {"name", "alpha", "beta", "eps"});
    if (!solver["name"]) throw config_error("missing 'solver.name'");
    read_into(solver, "name", c.solver, "solver.");
    read_into(solver, "alpha", c.alpha, "solver.");
    read_into(solver, "beta", c.beta, "solver.");
    read_into(solver, "eps", c.eps, "solver.");
  }

  if (const YAML::Node integ = root["integrator"]) {
    detail::reject_unknown(integ, "integrator",
                           {"dt", "horizon", "stop_velocity_tol", "stop_kkt_tol",
                            "record_every"});
    read_into(integ, "dt", c.integrator.dt, "integrator.");
    read_into(integ, "horizon", c.integrator.horizon, "integrator.");
    read_into(integ, "stop_velocity_tol", c.integrator.stop_velocity_tol,
              "integrator.");
    read_into(integ, "stop_kkt_tol", c.integrator.stop_kkt_tol, "integrator.");
    read_into(integ, "record_every", c.integrator.record_every, "integrator.");
  } else {
    throw config_error("missing section 'integrator'");
  }

  if (const YAML::Node init = root["init"]) {
    detail::reject_unknown(init, "init", {"mode", "x", "y", "x_fill", "y_fill", "scale"});
    std::string mode = "random";
    read_into(init, "mode", mode, "init.");
    if (mode == "explicit") c.init.mode = InitMode::kExplicit;
    else if (mode == "random") c.init.mode = InitMode::kRandom;
    else if (mode == "feasible") c.init.mode = InitMode::kFeasible;
    else throw config_error("init.mode must be explicit, random or feasible");
    read_into(init, "x", c.init.x, "init.");
    read_into(init, "y", c.init.y, "init.");
    read_into(init, "x_fill", c.init.x_fill, "init.");
    read_into(init, "y_fill", c.init.y_fill, "init.");
    read_into(init, "scale", c.init.scale, "init.");
  }

  read_into(root, "seed", c.seed);
  if (const YAML::Node out = root["output_dir"])
    c.output_dir = detail::read<std::string>(out, "output_dir");
  read_into(root, "repeats", c.repeats);
  read_into(root, "f_ref", c.f_ref);

  if (const YAML::Node aid = root["aid"]) {
    detail::reject_unknown(aid, "aid", {"inner_steps", "outer_step", "inner_step", "budget"});
    read_into(aid, "inner_steps", c.aid.inner_steps, "aid.");
    read_into(aid, "outer_step", c.aid.outer_step, "aid.");
    read_into(aid, "inner_step", c.aid.inner_step, "aid.");
    read_into(aid, "budget", c.aid.budget, "aid.");
  }

  if (const YAML::Node sweep = root["sweep"]) {
    if (!sweep.IsMap()) throw config_error("section 'sweep' must be a map");
    for (const auto& kv : sweep) {
      const auto key = kv.first.as<std::string>();
      c.sweep[key] = detail::scalar_list(kv.second, key);
    }
  }

  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path.string());
  } catch (const YAML::BadFile&) {
    throw config_error("cannot read config file " + path.string());
  } catch (const YAML::Exception& e) {
    throw config_error("YAML parse error in " + path.string() + ": " + e.what());
  }
  return parse_config(root);
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  try {
    return parse_config(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw config_error(std::string("YAML parse error: ") + e.what());
  }
}

/// Applies one sweep assignment, e.g. ("alpha", "0.1"), and revalidates.
inline void apply_override(ExperimentConfig& c, const std::string& key,
                           const std::string& value) {
  auto number = [&]() {
    try {
      std::size_t used = 0;
      const double v = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
      return v;
    } catch (const std::exception&) {
      throw config_error("sweep value '" + value + "' for '" + key +
                         "' is not a number");
    }
  };
  if (key == "alpha") c.alpha = number();
  else if (key == "beta") c.beta = number();
  else if (key == "eps") c.eps = number();
  else if (key == "dt") c.integrator.dt = number();
  else if (key == "horizon") c.integrator.horizon = number();
  else if (key == "seed") c.seed = static_cast<std::uint64_t>(number());
  else if (key == "solver") c.solver = value;
  else if (key == "aid.inner_steps") c.aid.inner_steps = static_cast<int>(number());
  else if (key == "aid.outer_step") c.aid.outer_step = number();
  else throw config_error("parameter '" + key + "' cannot be swept");
}

}  // namespace safeflow::harness
