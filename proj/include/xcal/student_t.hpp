#pragma once

#include <Eigen/Core>
#include <cmath>

#include "xcal/errors.hpp"

namespace xcal {

// Robust observation model: each scalar measurement carries an independent
// Student-t error with nu degrees of freedom and scale sigma. The joint
// density over the whole residual vector would be a monotone function of the
// quadratic form alone (its minimizer is plain least squares for every nu),
// so per-component factors are what makes the estimator robust: the IRLS
// weight (nu+1)/(nu + r~^2) decays for large normalized residuals.

/// Additive constant of one scalar t factor with unit scale.
inline double student_t_scalar_constant(double nu) {
  return -std::lgamma(0.5 * (nu + 1.0)) + std::lgamma(0.5 * nu) + 0.5 * std::log(nu * M_PI);
}

/// Full negative log-likelihood, constants included.
/// variances is the diagonal of C_l (sigma^2 per scalar observation).
inline double student_t_nll(const Eigen::VectorXd& residuals, const Eigen::VectorXd& variances,
                            double nu) {
  if (residuals.size() != variances.size()) {
    throw ValidationError("residual/variance size mismatch");
  }
  const double c = student_t_scalar_constant(nu);
  double total = 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) {
    if (variances[i] <= 0.0) throw NonPositiveVariance("C_l diagonal must be positive");
    const double nsq = residuals[i] * residuals[i] / variances[i];
    total += c + 0.5 * std::log(variances[i]) + 0.5 * (nu + 1.0) * std::log1p(nsq / nu);
  }
  return total;
}

/// The parameter-dependent part only: zero at zero residuals, always >= 0.
/// This is the F reported on iteration traces.
inline double student_t_cost(const Eigen::VectorXd& residuals, const Eigen::VectorXd& variances,
                             double nu) {
  if (residuals.size() != variances.size()) {
    throw ValidationError("residual/variance size mismatch");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < residuals.size(); ++i) {
    if (variances[i] <= 0.0) throw NonPositiveVariance("C_l diagonal must be positive");
    const double nsq = residuals[i] * residuals[i] / variances[i];
    total += 0.5 * (nu + 1.0) * std::log1p(nsq / nu);
  }
  return total;
}

inline double student_t_cost_term(double normalized_residual_sq, double nu) {
  return 0.5 * (nu + 1.0) * std::log1p(normalized_residual_sq / nu);
}

/// IRLS weight of one scalar residual; tends to 1 as nu -> infinity.
inline double student_t_weight(double normalized_residual_sq, double nu) {
  return (nu + 1.0) / (nu + normalized_residual_sq);
}

}  // namespace xcal
