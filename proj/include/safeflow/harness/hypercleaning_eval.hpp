#pragma once

#include <optional>
#include <vector>

#include "safeflow/integrator.hpp"
#include "safeflow/problems.hpp"

namespace safeflow::harness {

struct HypercleaningReport {
  std::vector<double> times;
  std::vector<double> val_loss;
  double mean_clean_weight = 0.0;
  std::optional<double> mean_corrupted_weight;  // absent without corruption
  std::optional<double> weight_separation;      // clean minus corrupted

  double initial_val_loss() const { return val_loss.front(); }
  double final_val_loss() const { return val_loss.back(); }
};

/// Validation loss along the run and the sample-weight statistics of the
/// final state. Weights are sigma(x_i).
inline HypercleaningReport hypercleaning_eval(const Trajectory& traj,
                                              const HypercleaningData& data) {
  require(traj.size() > 0, "empty trajectory");
  HypercleaningReport r;
  for (const auto& snap : traj.snapshots) {
    r.times.push_back(snap.state.t);
    r.val_loss.push_back(safeflow::detail::validation_loss(data, snap.state.y, nullptr));
  }

  const Vector& x = traj.back().state.x;
  double clean = 0.0, corrupted = 0.0;
  std::size_t n_clean = 0, n_corrupted = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double w = safeflow::detail::sigmoid(x(i));
    if (data.corrupted[static_cast<std::size_t>(i)]) {
      corrupted += w;
      ++n_corrupted;
    } else {
      clean += w;
      ++n_clean;
    }
  }
  if (n_clean) r.mean_clean_weight = clean / static_cast<double>(n_clean);
  if (n_corrupted) {
    r.mean_corrupted_weight = corrupted / static_cast<double>(n_corrupted);
    r.weight_separation = r.mean_clean_weight - *r.mean_corrupted_weight;
  }
  return r;
}

}  // namespace safeflow::harness
