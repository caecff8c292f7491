#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "safeflow/diagnostics.hpp"
#include "safeflow/error.hpp"
#include "safeflow/harness/config.hpp"
#include "safeflow/integrator.hpp"

namespace safeflow::harness {

/// 17 significant digits, enough to round-trip any double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> trajectory_header(Eigen::Index n, Eigen::Index m) {
  std::vector<std::string> cols{"t"};
  for (Eigen::Index i = 0; i < n; ++i) cols.push_back("x" + std::to_string(i));
  for (Eigen::Index j = 0; j < m; ++j) cols.push_back("y" + std::to_string(j));
  for (const char* c : {"norm_grad_y_g", "h", "f", "lambda_norm", "grad_evals"})
    cols.emplace_back(c);
  return cols;
}

namespace detail {

inline void write_row(std::ostream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
  os << '\n';
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

inline void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
  if (traj.size() == 0) return;
  const auto n = traj.front().state.x.size();
  const auto m = traj.front().state.y.size();
  detail::write_row(os, trajectory_header(n, m));
  std::vector<std::string> row;
  for (const auto& snap : traj.snapshots) {
    row.clear();
    row.push_back(format_double(snap.state.t));
    for (Eigen::Index i = 0; i < n; ++i) row.push_back(format_double(snap.state.x(i)));
    for (Eigen::Index j = 0; j < m; ++j) row.push_back(format_double(snap.state.y(j)));
    row.push_back(format_double(snap.diag.norm_grad_y_g));
    row.push_back(format_double(snap.diag.h));
    row.push_back(format_double(snap.diag.f));
    row.push_back(format_double(snap.diag.lambda_norm));
    row.push_back(std::to_string(snap.state.grad_evals));
    detail::write_row(os, row);
  }
}

/// Inverse of write_trajectory_csv. Only states and the recorded diagnostics
/// come back; velocities are not serialized.
inline Trajectory read_trajectory_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw config_error("empty trajectory CSV");
  const auto header = detail::split_csv(line);
  Eigen::Index n = 0, m = 0;
  for (const auto& h : header) {
    if (h.size() > 1 && h[0] == 'x') ++n;
    if (h.size() > 1 && h[0] == 'y') ++m;
  }
  if (header != trajectory_header(n, m))
    throw config_error("trajectory CSV header does not match the schema");

  Trajectory traj;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = detail::split_csv(line);
    if (cells.size() != header.size())
      throw config_error("trajectory CSV line " + std::to_string(line_no) +
                         " has the wrong number of cells");
    Snapshot snap;
    try {
      std::size_t k = 0;
      snap.state.t = std::stod(cells[k++]);
      snap.state.x.resize(n);
      snap.state.y.resize(m);
      for (Eigen::Index i = 0; i < n; ++i) snap.state.x(i) = std::stod(cells[k++]);
      for (Eigen::Index j = 0; j < m; ++j) snap.state.y(j) = std::stod(cells[k++]);
      snap.diag.norm_grad_y_g = std::stod(cells[k++]);
      snap.diag.h = std::stod(cells[k++]);
      snap.diag.f = std::stod(cells[k++]);
      snap.diag.lambda_norm = std::stod(cells[k++]);
      snap.state.grad_evals = std::stoll(cells[k++]);
    } catch (const std::exception&) {
      throw config_error("trajectory CSV line " + std::to_string(line_no) +
                         " has a non-numeric cell");
    }
    traj.snapshots.push_back(std::move(snap));
  }
  return traj;
}

inline void write_energy_csv(std::ostream& os, const EnergySeries& e) {
  const bool tracking = !e.tracking.empty();
  std::vector<std::string> header{"t", "energy", "objective_gap", "barrier", "integral"};
  if (tracking) header.emplace_back("tracking");
  detail::write_row(os, header);
  for (std::size_t k = 0; k < e.size(); ++k) {
    std::vector<std::string> row{format_double(e.times[k]), format_double(e.values[k]),
                                 format_double(e.objective_gap[k]),
                                 format_double(e.barrier[k]),
                                 format_double(e.integral[k])};
    if (tracking) row.push_back(format_double(e.tracking[k]));
    detail::write_row(os, row);
  }
}

template <typename Writer>
void write_file(const std::filesystem::path& path, Writer&& writer) {
  std::ofstream os(path);
  if (!os) throw config_error("cannot write " + path.string());
  writer(os);
  if (!os) throw config_error("write failed for " + path.string());
}

}  // namespace safeflow::harness
