#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cmath>
#include <string>
#include <vector>

#include "xcal/errors.hpp"

namespace xcal {

using Eigen::Matrix2d;
using Eigen::Matrix3d;
using Eigen::Vector2d;
using Eigen::Vector3d;

/// Depth guard for the perspective division, object-space units (mm).
inline constexpr double kDepthEpsilon = 1e-9;

// Rotation quaternion, components (w, x, y, z).
//
// rotate() evaluates the sandwich product q v q* through its homogeneous
// quadratic expansion, which equals |q|^2 R(q̂) v for a non-unit q. The
// perspective projection below divides two components of that vector, so it
// is exactly invariant under scaling of q (and under q -> -q); this is what
// makes the 4-parameter ambient Jacobian well defined.
struct Quaternion {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  Quaternion() = default;
  Quaternion(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

  static Quaternion identity() { return {1, 0, 0, 0}; }

  static Quaternion from_axis_angle(const Vector3d& axis, double angle_rad) {
    const double n = axis.norm();
    if (n == 0.0) return identity();
    const double half = 0.5 * angle_rad;
    const Vector3d u = axis / n * std::sin(half);
    return {std::cos(half), u.x(), u.y(), u.z()};
  }

  /// Shepperd's method, numerically stable for all rotations.
  static Quaternion from_rotation_matrix(const Matrix3d& r) {
    Quaternion q;
    const double tr = r.trace();
    if (tr > 0.0) {
      double s = std::sqrt(tr + 1.0) * 2.0;
      q.w = 0.25 * s;
      q.x = (r(2, 1) - r(1, 2)) / s;
      q.y = (r(0, 2) - r(2, 0)) / s;
      q.z = (r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
      double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
      q.w = (r(2, 1) - r(1, 2)) / s;
      q.x = 0.25 * s;
      q.y = (r(0, 1) + r(1, 0)) / s;
      q.z = (r(0, 2) + r(2, 0)) / s;
    } else if (r(1, 1) > r(2, 2)) {
      double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
      q.w = (r(0, 2) - r(2, 0)) / s;
      q.x = (r(0, 1) + r(1, 0)) / s;
      q.y = 0.25 * s;
      q.z = (r(1, 2) + r(2, 1)) / s;
    } else {
      double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
      q.w = (r(1, 0) - r(0, 1)) / s;
      q.x = (r(0, 2) + r(2, 0)) / s;
      q.y = (r(1, 2) + r(2, 1)) / s;
      q.z = 0.25 * s;
    }
    return q.normalized();
  }

  double squared_norm() const { return w * w + x * x + y * y + z * z; }
  double norm() const { return std::sqrt(squared_norm()); }

  Quaternion normalized() const {
    const double n = norm();
    if (n == 0.0) throw ValidationError("cannot normalize zero quaternion");
    return {w / n, x / n, y / n, z / n};
  }

  /// Same rotation with w >= 0 (q and -q are one rotation).
  Quaternion canonical() const {
    if (w < 0.0) return {-w, -x, -y, -z};
    return *this;
  }

  Quaternion conjugate() const { return {w, -x, -y, -z}; }

  Quaternion operator*(const Quaternion& o) const {
    return {w * o.w - x * o.x - y * o.y - z * o.z,
            w * o.x + x * o.w + y * o.z - z * o.y,
            w * o.y - x * o.z + y * o.w + z * o.x,
            w * o.z + x * o.y - y * o.x + z * o.w};
  }

  /// q v q* expanded: (w^2 - |v̄|^2) v + 2 (v̄·v) v̄ + 2 w (v̄ × v).
  Vector3d rotate(const Vector3d& v) const {
    const Vector3d im(x, y, z);
    return (w * w - im.squaredNorm()) * v + 2.0 * im.dot(v) * im + 2.0 * w * im.cross(v);
  }

  Matrix3d to_rotation_matrix() const {
    Matrix3d r;
    r.col(0) = rotate(Vector3d::UnitX());
    r.col(1) = rotate(Vector3d::UnitY());
    r.col(2) = rotate(Vector3d::UnitZ());
    return r / squared_norm();
  }

  /// Geodesic angle between the rotations of two unit quaternions (radians).
  double angle_to(const Quaternion& o) const {
    const double dot = std::abs(w * o.w + x * o.x + y * o.y + z * o.z);
    return 2.0 * std::acos(std::min(1.0, dot));
  }
};

/// Per-exposure exterior orientation: sensor position T (mm) and the
/// object-to-sensor rotation q.
struct Pose {
  Vector3d T = Vector3d::Zero();
  Quaternion q = Quaternion::identity();
};

/// Principal point (x_p, y_p) and principal distance c, all in pixels.
struct InteriorOrientation {
  double x_p = 0.0;
  double y_p = 0.0;
  double c = 1.0;
};

enum class PointRole { control, tie };

struct ObjectPoint {
  int id = 0;
  Vector3d P = Vector3d::Zero();
  PointRole role = PointRole::tie;
};

inline Vector3d rotate(const Quaternion& q, const Vector3d& v) { return q.rotate(v); }

// ---------------------------------------------------------------------------
// Collinearity projection.
//
// The image vector [x - x_p - dx, y - y_p - dy, -c] is proportional to
// u = q (P - T) q*; eliminating the scale through the third component gives
//   x = x_p + dx - c u1/u3,   y = y_p + dy - c u2/u3.
// Targets in front of the sensor have u3 > 0 (enforced by the simulator, not
// here: only |u3| > kDepthEpsilon is required to divide).
// ---------------------------------------------------------------------------

inline Vector2d project(const InteriorOrientation& iop, const Vector2d& ap, const Pose& pose,
                        const Vector3d& point) {
  const Vector3d u = pose.q.rotate(point - pose.T);
  // rotate() scales by |q|^2; compare depth on the unit-rotation scale.
  const double depth = u.z() / pose.q.squared_norm();
  if (std::abs(depth) <= kDepthEpsilon) {
    throw DepthDegenerate("target on the perspective-center plane (|u3| <= 1e-9 mm)");
  }
  return {iop.x_p + ap.x() - iop.c * u.x() / u.z(),
          iop.y_p + ap.y() - iop.c * u.y() / u.z()};
}

/// Partial derivatives of the projected (x, y) with respect to every unknown.
/// Quaternion partials are on the raw 4-component representation; the unit
/// constraint is the solver's business.
struct ProjectionJacobian {
  Vector2d uv;                          // projected image point
  Eigen::Matrix<double, 2, 3> d_iop;    // d(x,y)/d(x_p, y_p, c)
  Eigen::Matrix<double, 2, 3> d_T;      // d(x,y)/dT
  Eigen::Matrix<double, 2, 4> d_q;      // d(x,y)/d(w,x,y,z)
  Eigen::Matrix<double, 2, 3> d_P;      // d(x,y)/dP
};

inline ProjectionJacobian project_jacobian(const InteriorOrientation& iop, const Vector2d& ap,
                                           const Pose& pose, const Vector3d& point) {
  const Quaternion& q = pose.q;
  const Vector3d im(q.x, q.y, q.z);
  const Vector3d d = point - pose.T;
  const Vector3d u = q.rotate(d);
  const double depth = u.z() / q.squared_norm();
  if (std::abs(depth) <= kDepthEpsilon) {
    throw DepthDegenerate("target on the perspective-center plane (|u3| <= 1e-9 mm)");
  }

  ProjectionJacobian out;
  out.uv = {iop.x_p + ap.x() - iop.c * u.x() / u.z(),
            iop.y_p + ap.y() - iop.c * u.y() / u.z()};

  out.d_iop << 1, 0, -u.x() / u.z(),
               0, 1, -u.y() / u.z();

  // d(x,y)/du, then chain through du/d{T,q,P}.
  Eigen::Matrix<double, 2, 3> d_u;
  d_u << -iop.c / u.z(), 0, iop.c * u.x() / (u.z() * u.z()),
         0, -iop.c / u.z(), iop.c * u.y() / (u.z() * u.z());

  // u(q, d) = (w^2 - |v|^2) d + 2 (v·d) v + 2 w (v × d),  v = im.
  Matrix3d vx;
  vx << 0, -im.z(), im.y(),
        im.z(), 0, -im.x(),
        -im.y(), im.x(), 0;
  const Matrix3d du_dd = (q.w * q.w - im.squaredNorm()) * Matrix3d::Identity() +
                         2.0 * im * im.transpose() + 2.0 * q.w * vx;

  Eigen::Matrix<double, 3, 4> du_dq;
  du_dq.col(0) = 2.0 * q.w * d + 2.0 * im.cross(d);
  // d/dv [ -|v|^2 d + 2 (v·d) v + 2 w (v × d) ] = -2 d v' + 2 v d' + 2 (v·d) I - 2 w [d]x
  Matrix3d dx_mat;
  dx_mat << 0, -d.z(), d.y(),
            d.z(), 0, -d.x(),
            -d.y(), d.x(), 0;
  const Matrix3d du_dv = -2.0 * d * im.transpose() + 2.0 * im * d.transpose() +
                         2.0 * im.dot(d) * Matrix3d::Identity() - 2.0 * q.w * dx_mat;
  du_dq.block<3, 3>(0, 1) = du_dv;

  out.d_T = -d_u * du_dd;
  out.d_P = d_u * du_dd;
  out.d_q = d_u * du_dq;
  return out;
}

/// True when the points span no more than a line (rank <= 1 after centering).
inline bool points_collinear(const std::vector<Vector3d>& pts, double rel_tol = 1e-9) {
  if (pts.size() < 3) return true;
  Vector3d mean = Vector3d::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Eigen::MatrixXd centered(pts.size(), 3);
  for (std::size_t i = 0; i < pts.size(); ++i) centered.row(i) = (pts[i] - mean).transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const auto& s = svd.singularValues();
  return s(1) <= rel_tol * std::max(s(0), 1.0);
}

}  // namespace xcal
