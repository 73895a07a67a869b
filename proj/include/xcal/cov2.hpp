#pragma once

#include <Eigen/Core>
#include <cmath>

namespace xcal {

/// Variance floor for clamped residual-covariance entries (px^2).
inline constexpr double kVarEpsilon = 1e-12;

/// Forces a symmetric 2x2 covariance block to be positive definite:
/// non-positive diagonals are clamped to kVarEpsilon and an off-diagonal
/// that would break positive definiteness is shrunk. Sets *flagged when
/// anything had to change.
inline Eigen::Matrix2d clamp_cov2(Eigen::Matrix2d c, bool* flagged = nullptr) {
  bool changed = false;
  const double b = 0.5 * (c(0, 1) + c(1, 0));
  c(0, 1) = c(1, 0) = b;
  if (!(c(0, 0) > kVarEpsilon)) {
    c(0, 0) = kVarEpsilon;
    changed = true;
  }
  if (!(c(1, 1) > kVarEpsilon)) {
    c(1, 1) = kVarEpsilon;
    changed = true;
  }
  const double limit = std::sqrt(c(0, 0) * c(1, 1));
  if (!(std::abs(c(0, 1)) < limit)) {
    const double shrunk = 0.99 * limit * (c(0, 1) < 0 ? -1.0 : 1.0);
    c(0, 1) = c(1, 0) = std::isfinite(shrunk) ? shrunk : 0.0;
    changed = true;
  }
  if (flagged) *flagged = changed;
  return c;
}

inline Eigen::Matrix2d invert_cov2(const Eigen::Matrix2d& c) {
  const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
  Eigen::Matrix2d inv;
  inv << c(1, 1), -c(0, 1), -c(1, 0), c(0, 0);
  return inv / det;
}

}  // namespace xcal
