#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/QR>

#include "safeflow/error.hpp"

namespace safeflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Cholesky factor of a symmetric positive definite matrix, reusable for
/// several right-hand sides. Construction fails on the first nonpositive
/// pivot; there is no pivoted or regularized fallback.
class SpdFactorization {
 public:
  explicit SpdFactorization(const Matrix& a) : llt_(a) {
    if (a.rows() != a.cols()) {
      throw SolverError(ErrorCode::kInvalidArgument,
                        "SPD factorization needs a square matrix");
    }
    if (llt_.info() != Eigen::Success || !llt_.matrixLLT().allFinite()) {
      throw SolverError(ErrorCode::kNotPositiveDefinite,
                        "Cholesky factorization hit a nonpositive pivot");
    }
  }

  Eigen::Index size() const { return llt_.rows(); }

  Vector solve(const Vector& b) const {
    if (b.size() != size()) {
      throw SolverError(ErrorCode::kInvalidArgument,
                        "right-hand side has the wrong length");
    }
    return llt_.solve(b);
  }

  Matrix solve(const Matrix& b) const { return llt_.solve(b); }

  Matrix lower() const { return llt_.matrixL(); }

 private:
  Eigen::LLT<Matrix> llt_;
};

/// Solves A v = b for symmetric positive definite A.
inline Vector solve_spd(const Matrix& a, const Vector& b) {
  return SpdFactorization(a).solve(b);
}

/// Dual multiplier of the velocity-projection QP with the m linear equality
/// constraints  Hyx xdot + Hyy ydot + alpha grad_y g = 0.
///
/// Solves (Hyx Hyx^T + Hyy^2) lambda = -rhs, where the caller assembles
///   rhs = Hyx grad_x f + Hyy grad_y f - alpha grad_y g.
/// Hyx is m x n, Hyy is m x m and symmetric.
inline Vector solve_gram_dual(const Matrix& hyx, const Matrix& hyy,
                              const Vector& rhs) {
  const auto m = hyy.rows();
  if (hyy.cols() != m || hyx.rows() != m || rhs.size() != m) {
    throw SolverError(ErrorCode::kInvalidArgument,
                      "Gram system blocks have inconsistent shapes");
  }
  Matrix gram = hyy * hyy;
  gram.noalias() += hyx * hyx.transpose();
  // Symmetrize away rounding so the factorization sees an exact symmetric
  // input.
  gram = 0.5 * (gram + gram.transpose()).eval();
  return SpdFactorization(gram).solve(Vector(-rhs));
}

/// Draws an m x m matrix U diag(s) V^T with Haar-like orthogonal U, V (QR of
/// a Gaussian matrix, sign-normalized) and singular values log-uniform in
/// [1, cond_max], so cond(result) <= cond_max.
inline Matrix random_conditioned(std::mt19937_64& rng, Eigen::Index m,
                                 double cond_max) {
  if (!(cond_max >= 1.0)) {
    throw SolverError(ErrorCode::kInvalidArgument, "cond_max must be >= 1");
  }
  require(m > 0, "matrix dimension must be positive");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto orthogonal = [&] {
    Matrix g(m, m);
    for (Eigen::Index j = 0; j < m; ++j)
      for (Eigen::Index i = 0; i < m; ++i) g(i, j) = normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ();
    const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < m; ++j)
      if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
  };

  const Matrix u = orthogonal();
  const Matrix v = orthogonal();
  const double log_cap = std::log(cond_max);
  Vector s(m);
  for (Eigen::Index i = 0; i < m; ++i) s(i) = std::exp(log_cap * unit(rng));
  return u * s.asDiagonal() * v.transpose();
}

inline Matrix random_conditioned(std::uint64_t seed, Eigen::Index m,
                                 double cond_max) {
  std::mt19937_64 rng(seed);
  return random_conditioned(rng, m, cond_max);
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration from the all-ones vector.
inline double power_iteration(const Matrix& a, int max_iters = 200,
                              double rtol = 1e-10) {
  Vector v = Vector::Ones(a.rows()).normalized();
  double estimate = 0.0;
  for (int k = 0; k < max_iters; ++k) {
    Vector w = a * v;
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    const double next = v.dot(w);
    v = w / norm;
    if (std::abs(next - estimate) <= rtol * std::abs(next)) return next;
    estimate = next;
  }
  return estimate;
}

}  // namespace safeflow
