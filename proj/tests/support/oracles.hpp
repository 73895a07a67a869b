// Independent reference implementations used only by tests. These stay
// deliberately separate from the library code paths they check: rotation by
// an explicitly built matrix, projection through the proportionality with an
// explicit scale, finite differences, dense (non-Schur) covariance, and
// brute-force neighbour / cross-validation loops.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

#include "xcal/bundle.hpp"
#include "xcal/distortion.hpp"
#include "xcal/geometry.hpp"
#include "xcal/observations.hpp"
#include "xcal/rng.hpp"
#include "xcal/synthetic.hpp"

namespace oracle {

using xcal::Matrix2d;
using xcal::Matrix3d;
using xcal::Vector2d;
using xcal::Vector3d;

// ------------------------------ rotations ----------------------------------

/// Rotation matrix from a unit quaternion via the textbook component formula.
inline Matrix3d rotation_matrix(const xcal::Quaternion& q) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

inline Vector3d rotate(const xcal::Quaternion& q, const Vector3d& v) {
  return rotation_matrix(q) * v;
}

/// Projection by solving the proportionality with an explicit scale factor.
inline Vector2d project_with_scale(const xcal::InteriorOrientation& iop, const Vector2d& ap,
                                   const xcal::Pose& pose, const Vector3d& point) {
  const Vector3d u = rotation_matrix(pose.q.normalized()) * (point - pose.T);
  const double lambda = -iop.c / u.z();
  return {iop.x_p + ap.x() + lambda * u.x(), iop.y_p + ap.y() + lambda * u.y()};
}

// ------------------------- finite-difference partials ------------------------

/// Central finite differences of project() over the 13 ambient parameters
/// (x_p, y_p, c, T, q, P), step h.
struct FdJacobian {
  Eigen::Matrix<double, 2, 3> d_iop, d_T, d_P;
  Eigen::Matrix<double, 2, 4> d_q;
};

inline FdJacobian fd_project_jacobian(const xcal::InteriorOrientation& iop, const Vector2d& ap,
                                      const xcal::Pose& pose, const Vector3d& point,
                                      double h = 1e-6) {
  FdJacobian out;
  auto eval = [&](const xcal::InteriorOrientation& i2, const xcal::Pose& p2, const Vector3d& pt2) {
    return xcal::project(i2, ap, p2, pt2);
  };
  for (int k = 0; k < 3; ++k) {
    auto ip = iop, im = iop;
    (k == 0 ? ip.x_p : k == 1 ? ip.y_p : ip.c) += h;
    (k == 0 ? im.x_p : k == 1 ? im.y_p : im.c) -= h;
    out.d_iop.col(k) = (eval(ip, pose, point) - eval(im, pose, point)) / (2 * h);
  }
  for (int k = 0; k < 3; ++k) {
    auto pp = pose, pm = pose;
    pp.T[k] += h;
    pm.T[k] -= h;
    out.d_T.col(k) = (eval(iop, pp, point) - eval(iop, pm, point)) / (2 * h);
  }
  for (int k = 0; k < 4; ++k) {
    auto pp = pose, pm = pose;
    double* cp[] = {&pp.q.w, &pp.q.x, &pp.q.y, &pp.q.z};
    double* cm[] = {&pm.q.w, &pm.q.x, &pm.q.y, &pm.q.z};
    *cp[k] += h;
    *cm[k] -= h;
    out.d_q.col(k) = (eval(iop, pp, point) - eval(iop, pm, point)) / (2 * h);
  }
  for (int k = 0; k < 3; ++k) {
    Vector3d pp = point, pm = point;
    pp[k] += h;
    pm[k] -= h;
    out.d_P.col(k) = (eval(iop, pose, pp) - eval(iop, pose, pm)) / (2 * h);
  }
  return out;
}

/// max over entries of |a-b| / max(|a|, |b|, 1).
template <typename A, typename B>
double max_rel_error(const A& a, const B& b) {
  double worst = 0.0;
  for (int r = 0; r < a.rows(); ++r) {
    for (int c = 0; c < a.cols(); ++c) {
      const double denom = std::max({std::abs(a(r, c)), std::abs(b(r, c)), 1.0});
      worst = std::max(worst, std::abs(a(r, c) - b(r, c)) / denom);
    }
  }
  return worst;
}

// ------------------------ random projection configs -------------------------

struct RandomConfig {
  xcal::InteriorOrientation iop;
  Vector2d ap;
  xcal::Pose pose;
  Vector3d point;
};

/// A well-conditioned random configuration: the camera looks roughly at the
/// point from a few hundred mm, |u3| stays far from the guard.
inline RandomConfig random_config(xcal::Rng& rng) {
  RandomConfig c;
  c.iop = {rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(800, 2500)};
  c.ap = {rng.uniform(-2, 2), rng.uniform(-2, 2)};
  c.point = {rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(-100, 100)};
  const double az = rng.uniform(0, 2 * M_PI);
  const double el = rng.uniform(-1.2, 1.2);
  const double dist = rng.uniform(300, 900);
  const Vector3d dir(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  c.pose.T = c.point + dist * dir;
  const Vector3d z_cam = -dir;
  Vector3d up(0, 0, 1);
  if (std::abs(z_cam.dot(up)) > 0.95) up = Vector3d(1, 0, 0);
  const Vector3d x_cam = up.cross(z_cam).normalized();
  const Vector3d y_cam = z_cam.cross(x_cam);
  Matrix3d w2c;
  w2c.row(0) = x_cam.transpose();
  w2c.row(1) = y_cam.transpose();
  w2c.row(2) = z_cam.transpose();
  c.pose.q = xcal::Quaternion::from_rotation_matrix(w2c);
  // jitter the look direction a little so u1, u2 are nonzero
  c.pose.q = (xcal::Quaternion::from_axis_angle({rng.normal(), rng.normal(), rng.normal()},
                                                rng.uniform(-0.15, 0.15)) *
              c.pose.q)
                 .normalized();
  return c;
}

// --------------------------- brute-force kNN / CV ---------------------------

inline std::vector<int> brute_force_knn(const std::vector<Vector2d>& pts, const Vector2d& query,
                                        int k) {
  std::vector<int> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double da = (pts[a] - query).squaredNorm();
    const double db = (pts[b] - query).squaredNorm();
    return da != db ? da < db : a < b;
  });
  idx.resize(k);
  return idx;
}

inline Vector2d brute_force_predict(const std::vector<xcal::DistortionSample>& samples,
                                    const Vector2d& query, int k) {
  std::vector<Vector2d> pts(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) pts[i] = samples[i].location;
  const auto ids = brute_force_knn(pts, query, k);
  Vector2d acc = Vector2d::Zero();
  for (int i : ids) acc += samples[i].value;
  return acc / static_cast<double>(ids.size());
}

/// Re-implemented cross-validation loop over the documented fold contract
/// (seeded Fisher-Yates shuffle cut into contiguous chunks), brute-force
/// neighbours, G accumulated in sample-index order.
inline xcal::CvResult brute_force_cv(const std::vector<xcal::DistortionSample>& samples,
                                     const xcal::CvConfig& cfg) {
  const std::size_t n = samples.size();
  const auto fold_of = xcal::cv_fold_assignment(n, cfg.folds, cfg.shuffle_seed);
  xcal::CvResult out;
  for (std::size_t gi = 0; gi < cfg.k_grid.size(); ++gi) {
    const int k = cfg.k_grid[gi];
    std::vector<double> err(n, 0.0);
    for (int f = 0; f < cfg.folds; ++f) {
      std::vector<int> train;
      for (std::size_t i = 0; i < n; ++i)
        if (fold_of[i] != f) train.push_back(static_cast<int>(i));
      std::vector<Vector2d> train_locs(train.size());
      for (std::size_t i = 0; i < train.size(); ++i) train_locs[i] = samples[train[i]].location;
      for (std::size_t i = 0; i < n; ++i) {
        if (fold_of[i] != f) continue;
        const auto ids = brute_force_knn(train_locs, samples[i].location, k);
        Vector2d acc = Vector2d::Zero();
        for (int t : ids) acc += samples[train[t]].value;
        const Vector2d g = acc / static_cast<double>(k);
        const Vector2d e = samples[i].value - g;
        err[i] = e.dot(xcal::invert_cov2(xcal::clamp_cov2(samples[i].weight)) * e);
      }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += err[i];
    out.cost_table.emplace_back(k, total);
    if (gi == 0 || total < out.best_cost) {
      out.best_cost = total;
      out.best_k = k;
    }
  }
  return out;
}

// ----------------------- dense covariance / LS oracle ------------------------

/// Parameter layout identical to the solver's contract: sorted systems' IOP
/// blocks (when estimated), then 7 per frame, then 3 per tie point. Builds
/// the full Gaussian normal matrix densely, with the same unit-quaternion
/// pseudo-observation weight.
struct DenseLayout {
  std::map<int, int> iop_offset;
  std::vector<int> pose_offset;
  std::vector<int> point_offset;  // -1 for fixed points
  int total = 0;
};

inline DenseLayout dense_layout(const xcal::ObservationSet& set, bool est_iop, bool est_poses,
                                bool est_points) {
  DenseLayout l;
  int off = 0;
  if (est_iop) {
    for (int s : set.system_ids()) {
      l.iop_offset[s] = off;
      off += 3;
    }
  }
  l.pose_offset.assign(set.frames.size(), -1);
  if (est_poses) {
    for (std::size_t f = 0; f < set.frames.size(); ++f) {
      l.pose_offset[f] = off;
      off += 7;
    }
  }
  l.point_offset.assign(set.phantom.size(), -1);
  if (est_points) {
    for (std::size_t p = 0; p < set.phantom.size(); ++p) {
      if (set.phantom[p].role == xcal::PointRole::tie) {
        l.point_offset[p] = off;
        off += 3;
      }
    }
  }
  l.total = off;
  return l;
}

/// Dense C_l-weighted normal matrix and the per-observation Jacobian rows at
/// the given state.
inline Eigen::MatrixXd dense_normal_matrix(const xcal::ObservationSet& set,
                                           const std::map<int, xcal::InteriorOrientation>& iop,
                                           const std::vector<xcal::Pose>& poses,
                                           const std::vector<Vector3d>& points,
                                           const DenseLayout& l,
                                           std::vector<Eigen::MatrixXd>* a_rows = nullptr) {
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(l.total, l.total);
  if (a_rows) a_rows->assign(set.observations.size(), Eigen::MatrixXd());
  for (std::size_t i = 0; i < set.observations.size(); ++i) {
    const auto& o = set.observations[i];
    const int f = set.frame_index({o.system_id, o.frame_id});
    const int p = set.point_index(o.target_id);
    const auto jac = xcal::project_jacobian(iop.at(o.system_id), Vector2d::Zero(), poses[f],
                                            points[p]);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2, l.total);
    if (l.iop_offset.count(o.system_id)) {
      a.block<2, 3>(0, l.iop_offset.at(o.system_id)) = jac.d_iop;
    }
    if (l.pose_offset[f] >= 0) {
      a.block<2, 3>(0, l.pose_offset[f]) = jac.d_T;
      a.block<2, 4>(0, l.pose_offset[f] + 3) = jac.d_q;
    }
    if (l.point_offset[p] >= 0) a.block<2, 3>(0, l.point_offset[p]) = jac.d_P;
    h += a.transpose() * a / (o.sigma * o.sigma);
    if (a_rows) (*a_rows)[i] = a;
  }
  const double wq =
      1.0 / (xcal::detail::kQuatConstraintSigma * xcal::detail::kQuatConstraintSigma);
  for (std::size_t f = 0; f < poses.size(); ++f) {
    if (l.pose_offset[f] < 0) continue;
    Eigen::Vector4d q(poses[f].q.w, poses[f].q.x, poses[f].q.y, poses[f].q.z);
    h.block<4, 4>(l.pose_offset[f] + 3, l.pose_offset[f] + 3) += 4.0 * wq * q * q.transpose();
  }
  return h;
}

// ---------------------- independent least-squares solver --------------------

/// Plain Gauss-Newton least squares (no robust weights) with numerically
/// differenced Jacobians and an independent projection (rotation matrix +
/// explicit scale). Solves the same parameterization with the quaternion
/// pseudo-observation, renormalizing after each step.
struct LsProblem {
  xcal::ObservationSet set;
  std::map<int, xcal::InteriorOrientation> iop;
  std::vector<xcal::Pose> poses;
  std::vector<Vector3d> points;
  bool est_iop = true;
};

inline Eigen::VectorXd ls_pack(const LsProblem& pr, const DenseLayout& l) {
  Eigen::VectorXd th(l.total);
  for (const auto& [s, off] : l.iop_offset) {
    th[off] = pr.iop.at(s).x_p;
    th[off + 1] = pr.iop.at(s).y_p;
    th[off + 2] = pr.iop.at(s).c;
  }
  for (std::size_t f = 0; f < pr.poses.size(); ++f) {
    const int off = l.pose_offset[f];
    th.segment<3>(off) = pr.poses[f].T;
    th[off + 3] = pr.poses[f].q.w;
    th[off + 4] = pr.poses[f].q.x;
    th[off + 5] = pr.poses[f].q.y;
    th[off + 6] = pr.poses[f].q.z;
  }
  for (std::size_t p = 0; p < pr.points.size(); ++p) {
    if (l.point_offset[p] >= 0) th.segment<3>(l.point_offset[p]) = pr.points[p];
  }
  return th;
}

inline void ls_unpack(const Eigen::VectorXd& th, const DenseLayout& l, LsProblem& pr) {
  for (const auto& [s, off] : l.iop_offset) {
    pr.iop[s] = {th[off], th[off + 1], th[off + 2]};
  }
  for (std::size_t f = 0; f < pr.poses.size(); ++f) {
    const int off = l.pose_offset[f];
    pr.poses[f].T = th.segment<3>(off);
    pr.poses[f].q = xcal::Quaternion(th[off + 3], th[off + 4], th[off + 5], th[off + 6]);
  }
  for (std::size_t p = 0; p < pr.points.size(); ++p) {
    if (l.point_offset[p] >= 0) pr.points[p] = th.segment<3>(l.point_offset[p]);
  }
}

inline Eigen::VectorXd ls_residuals(const LsProblem& pr) {
  Eigen::VectorXd r(2 * pr.set.observations.size());
  for (std::size_t i = 0; i < pr.set.observations.size(); ++i) {
    const auto& o = pr.set.observations[i];
    const int f = pr.set.frame_index({o.system_id, o.frame_id});
    const int p = pr.set.point_index(o.target_id);
    const Vector2d proj = project_with_scale(pr.iop.at(o.system_id), Vector2d::Zero(),
                                             pr.poses[f], pr.points[p]);
    r[2 * i] = (o.x - proj.x()) / o.sigma;
    r[2 * i + 1] = (o.y - proj.y()) / o.sigma;
  }
  return r;
}

inline double ls_cost(const LsProblem& pr) { return 0.5 * ls_residuals(pr).squaredNorm(); }

/// Damped least squares (Levenberg accept/reject) to convergence; returns
/// the final problem state.
inline LsProblem ls_solve(LsProblem pr, int max_iter = 200) {
  const DenseLayout l = dense_layout(pr.set, pr.est_iop, true, true);
  const double wq_sigma = xcal::detail::kQuatConstraintSigma;
  double lambda = 1e-8;
  double cost = ls_cost(pr);
  for (int it = 0; it < max_iter; ++it) {
    Eigen::VectorXd th = ls_pack(pr, l);
    const Eigen::VectorXd r0 = ls_residuals(pr);
    // numerical Jacobian of the scaled residual vector
    Eigen::MatrixXd j(r0.size(), l.total);
    const double h = 1e-7;
    for (int c = 0; c < l.total; ++c) {
      Eigen::VectorXd tp = th, tm = th;
      const double step = h * std::max(1.0, std::abs(th[c]));
      tp[c] += step;
      tm[c] -= step;
      LsProblem pp = pr, pm = pr;
      ls_unpack(tp, l, pp);
      ls_unpack(tm, l, pm);
      j.col(c) = (ls_residuals(pp) - ls_residuals(pm)) / (2 * step);
    }
    Eigen::MatrixXd h_mat = j.transpose() * j;
    Eigen::VectorXd g = j.transpose() * r0;  // residual = obs - model, J of residual
    // quaternion unit pseudo-observations
    for (std::size_t f = 0; f < pr.poses.size(); ++f) {
      const int off = l.pose_offset[f];
      Eigen::Vector4d q(th[off + 3], th[off + 4], th[off + 5], th[off + 6]);
      const double rq = (1.0 - q.squaredNorm()) / wq_sigma;
      Eigen::Vector4d jq = -2.0 * q / wq_sigma;
      h_mat.block<4, 4>(off + 3, off + 3) += jq * jq.transpose();
      g.segment<4>(off + 3) += -jq * rq;
    }

    bool accepted = false;
    for (int attempt = 0; attempt < 40 && !accepted; ++attempt) {
      Eigen::MatrixXd damped = h_mat;
      for (int d = 0; d < l.total; ++d) {
        damped(d, d) += lambda * std::max(damped(d, d), 1e-12);
      }
      const Eigen::VectorXd delta = damped.ldlt().solve(-g);
      LsProblem cand = pr;
      ls_unpack(th + delta, l, cand);
      for (auto& p : cand.poses) p.q = p.q.normalized();
      const double cand_cost = ls_cost(cand);
      if (cand_cost < cost) {
        pr = cand;
        cost = cand_cost;
        lambda = std::max(lambda / 10.0, 1e-14);
        accepted = true;
        if (delta.cwiseAbs().maxCoeff() < 1e-12 && lambda <= 1e-8) return pr;
      } else {
        if (delta.cwiseAbs().maxCoeff() < 1e-13) return pr;
        lambda *= 10.0;
      }
    }
    if (!accepted) break;
  }
  return pr;
}

// --------------------- well-conditioned 5-frame problem ----------------------

/// Hand-built 5-frame, 50-target network with strong roll and elevation
/// diversity, so the principal point and the per-frame positions decorrelate
/// and every parameter is determined well enough for 1e-6 comparisons.
struct SmallNetwork {
  xcal::ObservationSet set;
  xcal::BundleInit truth;   // generating parameters
  xcal::BundleInit init;    // perturbed start
};

inline SmallNetwork small_gaussian_network(std::uint64_t seed, double noise_sigma = 0.25) {
  SmallNetwork net;
  net.set.phantom = xcal::generate_phantom(200.0, 50, seed);

  const xcal::InteriorOrientation iop{0.0, 0.0, 1500.0};
  const double az[5] = {0.0, 1.26, 2.51, 3.77, 5.03};
  const double el[5] = {-0.79, -0.35, 0.17, 0.52, 0.87};
  const double roll[5] = {0.0, 1.13, -0.87, 2.09, -2.01};
  const double dist[5] = {480, 560, 640, 700, 520};

  net.truth.iop[1] = iop;
  for (int f = 0; f < 5; ++f) {
    xcal::Pose pose;
    const Vector3d dir(std::cos(el[f]) * std::cos(az[f]), std::cos(el[f]) * std::sin(az[f]),
                       std::sin(el[f]));
    pose.T = dist[f] * dir;
    const Vector3d z_cam = -dir;
    Vector3d up(0, 0, 1);
    if (std::abs(z_cam.dot(up)) > 0.95) up = Vector3d(1, 0, 0);
    Vector3d x_cam = up.cross(z_cam).normalized();
    Vector3d y_cam = z_cam.cross(x_cam);
    const Vector3d xr = std::cos(roll[f]) * x_cam + std::sin(roll[f]) * y_cam;
    const Vector3d yr = -std::sin(roll[f]) * x_cam + std::cos(roll[f]) * y_cam;
    Matrix3d w2c;
    w2c.row(0) = xr.transpose();
    w2c.row(1) = yr.transpose();
    w2c.row(2) = z_cam.transpose();
    pose.q = xcal::Quaternion::from_rotation_matrix(w2c);
    net.truth.poses.push_back(pose);
  }
  for (const auto& p : net.set.phantom) net.truth.points.push_back(p.P);

  xcal::Rng rng(seed, 0xabc);
  for (int f = 0; f < 5; ++f) {
    for (const auto& p : net.set.phantom) {
      const Vector2d uv = xcal::project(iop, Vector2d::Zero(), net.truth.poses[f], p.P);
      net.set.observations.push_back({1, f, p.id, uv.x() + noise_sigma * rng.normal(),
                                      uv.y() + noise_sigma * rng.normal(),
                                      noise_sigma > 0 ? noise_sigma : 1.0});
    }
  }
  xcal::finalize_observation_set(net.set);

  net.init = net.truth;
  for (auto& pose : net.init.poses) {
    pose.T += Vector3d(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5));
    pose.q = (xcal::Quaternion::from_axis_angle({rng.normal(), rng.normal(), rng.normal()},
                                                rng.uniform(-0.035, 0.035)) *
              pose.q)
                 .normalized();
  }
  return net;
}

// ------------------------------- convex hull --------------------------------

inline std::vector<Vector2d> convex_hull(std::vector<Vector2d> pts) {
  std::sort(pts.begin(), pts.end(), [](const Vector2d& a, const Vector2d& b) {
    return a.x() != b.x() ? a.x() < b.x() : a.y() < b.y();
  });
  auto cross = [](const Vector2d& o, const Vector2d& a, const Vector2d& b) {
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
  };
  std::vector<Vector2d> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline bool inside_hull(const std::vector<Vector2d>& hull, const Vector2d& p) {
  for (std::size_t i = 0; i < hull.size(); ++i) {
    const Vector2d& a = hull[i];
    const Vector2d& b = hull[(i + 1) % hull.size()];
    if ((b.x() - a.x()) * (p.y() - a.y()) - (b.y() - a.y()) * (p.x() - a.x()) < 0) return false;
  }
  return true;
}

}  // namespace oracle
