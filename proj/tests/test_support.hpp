#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <cmath>
#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "safeflow/problem.hpp"

namespace safeflow::testing {

inline Vector gaussian(std::mt19937_64& rng, Eigen::Index size, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(size);
  for (Eigen::Index i = 0; i < size; ++i) v(i) = normal(rng);
  return v;
}

inline Matrix gaussian_matrix(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) a(i, j) = normal(rng);
  return a;
}

inline Matrix random_spd(std::mt19937_64& rng, Eigen::Index m, double floor = 0.5) {
  const Matrix b = gaussian_matrix(rng, m, m);
  return b * b.transpose() / static_cast<double>(m) +
         floor * Matrix::Identity(m, m);
}

/// Random smooth bilevel problem with n != m allowed and Hessians that vary
/// with the point:
///   f = 1/2 |x - a|^2 + sin(c^T x + d^T y) + 1/4 |y - b|^2
///   g = 1/2 y^T A y + y^T B x + sum_j y_j sin((C x)_j) + sum_j log cosh(y_j)
inline BilevelProblem random_problem(std::uint64_t seed, Eigen::Index n, Eigen::Index m) {
  std::mt19937_64 rng(seed);
  const Vector a = gaussian(rng, n), b = gaussian(rng, m);
  const Vector c = gaussian(rng, n), d = gaussian(rng, m);
  const Matrix A = random_spd(rng, m);
  const Matrix B = gaussian_matrix(rng, m, n);
  const Matrix C = gaussian_matrix(rng, m, n) * 0.5;

  BilevelProblem p;
  p.name = "random";
  p.dim_upper = n;
  p.dim_lower = m;
  p.upper = [=](const Vector& x, const Vector& y) {
    const double s = c.dot(x) + d.dot(y);
    UpperEval e;
    e.value = 0.5 * (x - a).squaredNorm() + std::sin(s) + 0.25 * (y - b).squaredNorm();
    e.grad_x = (x - a) + std::cos(s) * c;
    e.grad_y = std::cos(s) * d + 0.5 * (y - b);
    return e;
  };
  p.lower = [=](const Vector& x, const Vector& y, bool with_hessians) {
    const Vector cx = C * x;
    LowerEval e;
    e.value = 0.5 * y.dot(A * y) + y.dot(B * x) + y.dot(cx.array().sin().matrix()) +
              y.array().cosh().log().sum();
    e.grad_y = A * y + B * x + cx.array().sin().matrix() + y.array().tanh().matrix();
    if (with_hessians) {
      e.hess_yy = A;
      e.hess_yy.diagonal().array() += 1.0 - y.array().tanh().square();
      e.hess_yx = B + cx.array().cos().matrix().asDiagonal() * C;
    }
    return e;
  };
  // A >= 0.5 I by construction and log cosh is convex.
  p.constants.mu_g = 0.5;
  return p;
}

/// Generic dense KKT solve of the equality-constrained projection
///   min 1/2 |v + grad f|^2  s.t.  J v = r,
/// returning v and the multiplier of  L = 1/2|v + grad f|^2 + mu^T (J v - r).
struct EqualityQpSolution {
  Vector v;
  Vector mu;
};

inline EqualityQpSolution solve_equality_qp(const Vector& grad_f, const Matrix& J,
                                            const Vector& r) {
  const auto d = grad_f.size();
  const auto k = J.rows();
  Matrix kkt = Matrix::Zero(d + k, d + k);
  kkt.topLeftCorner(d, d).setIdentity();
  kkt.topRightCorner(d, k) = J.transpose();
  kkt.bottomLeftCorner(k, d) = J;
  Vector rhs(d + k);
  rhs << -grad_f, r;
  const Vector sol = kkt.fullPivLu().solve(rhs);
  return {sol.head(d), sol.tail(k)};
}

/// Euclidean projection of u onto {v : a^T v <= b}.
inline Vector project_halfspace(const Vector& u, const Vector& a, double b) {
  const double excess = a.dot(u) - b;
  if (excess <= 0.0) return u;
  return u - (excess / a.squaredNorm()) * a;
}

}  // namespace safeflow::testing
