#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include "safeflow/numerics.hpp"
#include "safeflow/problem.hpp"

namespace safeflow {

/// f = 1/2 (x-1)^2 + 1/2 (y-2)^2,  g = 1/2 (y-x)^2  with n = m = 1.
/// y*(x) = x, grad l(x) = 2x - 3, minimizer x* = 1.5.
inline BilevelProblem make_toy1() {
  BilevelProblem p;
  p.name = "toy1";
  p.dim_upper = 1;
  p.dim_lower = 1;
  p.upper = [](const Vector& x, const Vector& y) {
    UpperEval e;
    e.value = 0.5 * (x(0) - 1.0) * (x(0) - 1.0) +
              0.5 * (y(0) - 2.0) * (y(0) - 2.0);
    e.grad_x = Vector::Constant(1, x(0) - 1.0);
    e.grad_y = Vector::Constant(1, y(0) - 2.0);
    return e;
  };
  p.lower = [](const Vector& x, const Vector& y, bool with_hessians) {
    LowerEval e;
    const double r = y(0) - x(0);
    e.value = 0.5 * r * r;
    e.grad_y = Vector::Constant(1, r);
    if (with_hessians) {
      e.hess_yx = Matrix::Constant(1, 1, -1.0);
      e.hess_yy = Matrix::Constant(1, 1, 1.0);
    }
    return e;
  };
  // Hessians of g are constant, so their Lipschitz moduli vanish. grad f is
  // unbounded, so C_x^f and C_y^f are left absent. |grad l - F| = |y - y*|.
  p.constants.mu_g = 1.0;
  p.constants.l_yx_g = 1.0;
  p.constants.c_yx_g = 0.0;
  p.constants.c_yy_g = 0.0;
  p.constants.m_1 = 1.0;
  p.truth.lower_solution = [](const Vector& x) { return x; };
  p.truth.implicit_gradient = [](const Vector& x) {
    return Vector::Constant(1, 2.0 * x(0) - 3.0);
  };
  p.truth.optimal_value = 0.25;  // f(1.5, 1.5)
  return p;
}

/// Synthetic problem with sin-log upper objective and least-squares lower
/// level:
///   f(x, y) = sin(c^T x + d^T y) + log(|x + y|^2 + 1)
///   g(x, y) = 1/2 |H y - x|^2,  cond(H) <= cond_max,  |H| <= 1.
struct QuadraticLlData {
  Matrix h;
  Vector c;
  Vector d;
};

inline BilevelProblem make_quadratic_ll(std::uint64_t seed, Eigen::Index n,
                                        Eigen::Index m, double cond_max,
                                        QuadraticLlData* data_out = nullptr) {
  if (!(cond_max >= 1.0)) {
    throw SolverError(ErrorCode::kInvalidArgument, "cond_max must be >= 1");
  }
  require(n > 0 && n == m, "quadratic_ll needs a square H (n == m)");

  std::mt19937_64 rng(seed);
  auto data = std::make_shared<QuadraticLlData>();
  // Singular values in [1/cond_max, 1]. With |H| up to cond_max the filtered
  // flows become stiff on the thin sublevel sets {|grad_y g| <= eps} and
  // explicit RK-4 at dt = 1e-2 leaves the set.
  data->h = random_conditioned(rng, m, cond_max) / cond_max;
  // cond_max = 1 pins every singular value to 1; take H = I in that case
  // (the draw above still advances the generator so c, d do not change).
  if (cond_max == 1.0) data->h.setIdentity();
  std::normal_distribution<double> normal(0.0, 1.0);
  data->c.resize(n);
  data->d.resize(m);
  for (Eigen::Index i = 0; i < n; ++i) data->c(i) = normal(rng);
  for (Eigen::Index i = 0; i < m; ++i) data->d(i) = normal(rng);
  if (data_out) *data_out = *data;

  const Matrix hth = data->h.transpose() * data->h;
  const Matrix hyx = -data->h.transpose();
  auto lu = std::make_shared<Eigen::PartialPivLU<Matrix>>(data->h);
  auto lu_t = std::make_shared<Eigen::PartialPivLU<Matrix>>(
      Matrix(data->h.transpose()));

  BilevelProblem p;
  p.name = "quadratic_ll";
  p.dim_upper = n;
  p.dim_lower = m;
  p.upper = [data](const Vector& x, const Vector& y) {
    UpperEval e;
    const Vector s = x + y;
    const double q = s.squaredNorm() + 1.0;
    const double phase = data->c.dot(x) + data->d.dot(y);
    e.value = std::sin(phase) + std::log(q);
    const Vector common = (2.0 / q) * s;
    e.grad_x = std::cos(phase) * data->c + common;
    e.grad_y = std::cos(phase) * data->d + common;
    return e;
  };
  p.lower = [data, hth, hyx](const Vector& x, const Vector& y,
                             bool with_hessians) {
    LowerEval e;
    const Vector r = data->h * y - x;
    e.value = 0.5 * r.squaredNorm();
    e.grad_y = data->h.transpose() * r;
    if (with_hessians) {
      e.hess_yx = hyx;
      e.hess_yy = hth;
    }
    return e;
  };

  Eigen::JacobiSVD<Matrix> svd(data->h);
  const double s_max = svd.singularValues().maxCoeff();
  const double s_min = svd.singularValues().minCoeff();
  p.constants.mu_g = s_min * s_min;
  p.constants.l_yx_g = s_max;
  // |d/dz log(|z|^2 + 1)| = 2|z| / (|z|^2 + 1) <= 1.
  p.constants.c_x_f = data->c.norm() + 1.0;
  p.constants.c_y_f = data->d.norm() + 1.0;
  p.constants.c_yx_g = 0.0;
  p.constants.c_yy_g = 0.0;

  p.truth.lower_solution = [lu](const Vector& x) -> Vector {
    return lu->solve(x);
  };
  // grad l = grad_x f + H^{-T} grad_y f at y = H^{-1} x.
  p.truth.implicit_gradient = [data, lu, lu_t](const Vector& x) -> Vector {
    const Vector y = lu->solve(x);
    const Vector s = x + y;
    const double q = s.squaredNorm() + 1.0;
    const double phase = data->c.dot(x) + data->d.dot(y);
    const Vector fx = std::cos(phase) * data->c + (2.0 / q) * s;
    const Vector fy = std::cos(phase) * data->d + (2.0 / q) * s;
    return fx + lu_t->solve(fy);
  };
  return p;
}

/// Estimates mu_g and L_yx^g by sampling Hessian blocks at random points.
inline void estimate_constants(BilevelProblem& problem, std::uint64_t seed,
                               int samples = 10) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  double mu = std::numeric_limits<double>::infinity();
  double lyx = 0.0;
  for (int k = 0; k < samples; ++k) {
    Vector x(problem.dim_upper), y(problem.dim_lower);
    for (auto& v : x) v = normal(rng);
    for (auto& v : y) v = normal(rng);
    const LowerEval low = problem.eval_lower(x, y, true);
    Eigen::SelfAdjointEigenSolver<Matrix> eig(low.hess_yy, Eigen::EigenvaluesOnly);
    mu = std::min(mu, eig.eigenvalues().minCoeff());
    Eigen::JacobiSVD<Matrix> svd(low.hess_yx);
    lyx = std::max(lyx, svd.singularValues()(0));
  }
  problem.constants.mu_g = mu;
  problem.constants.l_yx_g = lyx;
  problem.constants.estimated = true;
}

/// Synthetic data hyper-cleaning. x holds one logit per training sample
/// (weight sigma(x_i)); y is a dim x classes linear classifier stored
/// column-major. The lower level is the sigma-weighted training
/// cross-entropy plus reg |y|^2; the upper level is the validation
/// cross-entropy.
struct HypercleaningData {
  Eigen::Index dim = 0;
  Eigen::Index classes = 0;
  double reg = 0.0;
  Matrix train_features;   // dim x n_train
  std::vector<int> train_labels;
  std::vector<int> clean_train_labels;
  Matrix val_features;     // dim x n_val
  std::vector<int> val_labels;
  std::vector<bool> corrupted;  // per training sample
  std::vector<Eigen::Index> corrupted_indices;
};

struct HypercleaningInstance {
  BilevelProblem problem;
  std::shared_ptr<const HypercleaningData> data;
};

namespace detail {

inline double sigmoid(double z) {
  return z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                  : std::exp(z) / (1.0 + std::exp(z));
}

// Column-wise softmax of the classes x samples logits W^T A. Returns the
// probabilities and adds the per-sample cross-entropies to `losses`.
inline Matrix class_probabilities(const Eigen::Ref<const Matrix>& w,
                                  const Matrix& features,
                                  const std::vector<int>& labels,
                                  Vector& losses) {
  const Matrix logits = w.transpose() * features;
  Matrix probs(logits.rows(), logits.cols());
  losses.resize(logits.cols());
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    const double top = logits.col(i).maxCoeff();
    const double lse = top + std::log((logits.col(i).array() - top).exp().sum());
    probs.col(i) = (logits.col(i).array() - lse).exp();
    losses(i) = lse - logits(labels[i], i);
  }
  return probs;
}

// probs minus the one-hot labels.
inline Matrix label_residual(Matrix probs, const std::vector<int>& labels) {
  for (Eigen::Index i = 0; i < probs.cols(); ++i) probs(labels[i], i) -= 1.0;
  return probs;
}

inline double validation_loss(const HypercleaningData& d, const Vector& y,
                              Vector* grad_y) {
  const Eigen::Map<const Matrix> w(y.data(), d.dim, d.classes);
  const auto n_val = static_cast<double>(d.val_features.cols());
  Vector losses;
  const Matrix probs = class_probabilities(w, d.val_features, d.val_labels, losses);
  if (grad_y) {
    const Matrix grad =
        d.val_features * label_residual(probs, d.val_labels).transpose() / n_val;
    *grad_y = Eigen::Map<const Vector>(grad.data(), grad.size());
  }
  return losses.sum() / n_val;
}

}  // namespace detail

inline HypercleaningInstance make_hypercleaning(std::uint64_t seed,
                                                Eigen::Index n_train,
                                                Eigen::Index n_val,
                                                Eigen::Index dim,
                                                Eigen::Index classes,
                                                double corrupt_frac,
                                                double reg) {
  require(corrupt_frac >= 0.0 && corrupt_frac < 1.0,
          "corrupt_frac must lie in [0, 1)");
  require(reg > 0.0, "reg must be positive");
  require(n_train > 0 && n_val > 0 && dim > 0 && classes >= 2,
          "hypercleaning sizes must be positive with at least two classes");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_int_distribution<int> pick_class(0, static_cast<int>(classes) - 1);

  // Class means well separated relative to unit-variance noise.
  constexpr double kSeparation = 1.5;
  Matrix means(dim, classes);
  for (Eigen::Index k = 0; k < classes; ++k)
    for (Eigen::Index j = 0; j < dim; ++j) means(j, k) = kSeparation * normal(rng);

  auto data = std::make_shared<HypercleaningData>();
  data->dim = dim;
  data->classes = classes;
  data->reg = reg;
  auto draw = [&](Eigen::Index count, Matrix& features, std::vector<int>& labels) {
    features.resize(dim, count);
    labels.resize(count);
    for (Eigen::Index i = 0; i < count; ++i) {
      const int k = pick_class(rng);
      labels[i] = k;
      for (Eigen::Index j = 0; j < dim; ++j)
        features(j, i) = means(j, k) + normal(rng);
    }
  };
  draw(n_train, data->train_features, data->clean_train_labels);
  draw(n_val, data->val_features, data->val_labels);

  data->train_labels = data->clean_train_labels;
  data->corrupted.assign(n_train, false);
  const auto n_corrupt = static_cast<Eigen::Index>(
      std::llround(corrupt_frac * static_cast<double>(n_train)));
  std::vector<Eigen::Index> order(n_train);
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> shift(1, static_cast<int>(classes) - 1);
  for (Eigen::Index k = 0; k < n_corrupt; ++k) {
    const auto i = order[k];
    data->train_labels[i] =
        (data->clean_train_labels[i] + shift(rng)) % static_cast<int>(classes);
    data->corrupted[i] = true;
  }
  data->corrupted_indices.assign(order.begin(), order.begin() + n_corrupt);
  std::sort(data->corrupted_indices.begin(), data->corrupted_indices.end());

  BilevelProblem p;
  p.name = "hypercleaning";
  p.dim_upper = n_train;
  p.dim_lower = dim * classes;

  p.upper = [data](const Vector& x, const Vector& y) {
    UpperEval e;
    Vector grad_y;
    e.value = detail::validation_loss(*data, y, &grad_y);
    e.grad_x = Vector::Zero(x.size());
    e.grad_y = std::move(grad_y);
    return e;
  };

  p.lower = [data](const Vector& x, const Vector& y, bool with_hessians) {
    const auto dimension = data->dim;
    const auto k_classes = data->classes;
    const Matrix& a = data->train_features;
    const auto n = a.cols();
    const auto m = dimension * k_classes;
    const Eigen::Map<const Matrix> w(y.data(), dimension, k_classes);

    const Vector s = x.unaryExpr([](double z) { return detail::sigmoid(z); });
    Vector losses;
    const Matrix probs =
        detail::class_probabilities(w, a, data->train_labels, losses);
    const Matrix residual = detail::label_residual(probs, data->train_labels);

    LowerEval e;
    e.value = s.dot(losses) / n + data->reg * y.squaredNorm();
    const Matrix grad = a * (residual * s.asDiagonal()).transpose() / n;
    e.grad_y = Eigen::Map<const Vector>(grad.data(), m) + 2.0 * data->reg * y;
    if (!with_hessians) return e;

    // Column i of hess_yx is sigma'(x_i)/n vec(a_i r_i^T).
    const Vector ds = (s.array() * (1.0 - s.array())).matrix() / n;
    e.hess_yx.resize(m, n);
    for (Eigen::Index k = 0; k < k_classes; ++k) {
      e.hess_yx.middleRows(k * dimension, dimension) =
          a * (ds.array() * residual.row(k).transpose().array()).matrix().asDiagonal();
    }
    // Block (q, r) of hess_yy is A diag(s_i (delta_qr p_qi - p_qi p_ri) / n) A^T.
    e.hess_yy.resize(m, m);
    for (Eigen::Index q = 0; q < k_classes; ++q) {
      for (Eigen::Index r = q; r < k_classes; ++r) {
        Vector weight = -(probs.row(q).array() * probs.row(r).array()).transpose();
        if (q == r) weight += probs.row(q).transpose();
        weight = (weight.array() * s.array()).matrix() / n;
        const Matrix block = a * weight.asDiagonal() * a.transpose();
        e.hess_yy.block(q * dimension, r * dimension, dimension, dimension) = block;
        if (r != q)
          e.hess_yy.block(r * dimension, q * dimension, dimension, dimension) =
              block.transpose();
      }
    }
    e.hess_yy.diagonal().array() += 2.0 * data->reg;
    return e;
  };

  estimate_constants(p, seed + 0x9e3779b97f4a7c15ULL, 5);
  p.constants.mu_g = std::max(2.0 * reg, *p.constants.mu_g);

  HypercleaningInstance inst;
  inst.problem = std::move(p);
  inst.data = data;
  return inst;
}

}  // namespace safeflow
