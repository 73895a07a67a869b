#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "xcal/cov2.hpp"
#include "xcal/errors.hpp"
#include "xcal/geometry.hpp"
#include "xcal/observations.hpp"
#include "xcal/student_t.hpp"

namespace xcal {

enum class IopMode { parametric, learned };

struct SolverConfig {
  double nu = 4.0;               // Student-t degrees of freedom
  int max_iterations = 200;      // linearizations
  double cost_tol = 1e-10;       // relative decrease of the objective
  double grad_tol = 1e-8;        // max-norm of the gradient
  double step_tol = 1e-12;       // max-norm of the update
  double lm_lambda0 = 1e-6;
  double lm_up = 10.0;
  double lm_down = 10.0;
  int max_rejects = 25;          // consecutive rejected steps before giving up
  double inlier_tau = 3.0;       // on max(|normalized residual|)
  IopMode mode = IopMode::parametric;
};

enum class StopReason { cost_tolerance, gradient_tolerance, step_tolerance, max_iterations };

inline const char* stop_reason_name(StopReason r) {
  switch (r) {
    case StopReason::cost_tolerance: return "cost_tolerance";
    case StopReason::gradient_tolerance: return "gradient_tolerance";
    case StopReason::step_tolerance: return "step_tolerance";
    case StopReason::max_iterations: return "max_iterations";
  }
  return "?";
}

struct IterationRecord {
  int iteration = 0;
  double cost = 0.0;
  double lambda = 0.0;
  double step_norm = 0.0;
  bool accepted = false;
};

struct ResidualRecord {
  int obs_index = -1;
  Vector2d residual = Vector2d::Zero();    // observation minus model, px
  Vector2d normalized = Vector2d::Zero();  // residual / sqrt(diag C_r)
  Matrix2d r_cov = Matrix2d::Zero();       // C_r block
  bool cov_clamped = false;
  bool inlier = true;
  Vector2d location = Vector2d::Zero();    // measurement location (AP-corrected)
};

struct BundleOptions {
  bool estimate_iop = true;
  bool estimate_poses = true;
  bool estimate_points = true;
};

struct BundleInit {
  std::map<int, InteriorOrientation> iop;  // per system id
  std::vector<Pose> poses;                 // aligned with set.frames
  std::vector<Vector3d> points;            // aligned with set.phantom
};

struct BundleResult {
  std::map<int, InteriorOrientation> iop;
  std::map<int, Vector3d> iop_sigma;
  std::vector<Pose> poses;
  std::vector<Eigen::Matrix<double, 7, 1>> pose_sigma;  // T then q components
  std::vector<Vector3d> points;
  std::vector<Vector3d> point_sigma;  // zero for fixed points
  std::vector<ResidualRecord> records;  // aligned with set.observations
  double cost = 0.0;                    // Student-t cost (constants dropped)
  int iterations = 0;
  StopReason stop = StopReason::max_iterations;
  std::vector<IterationRecord> trace;
};

/// Shared flag per observation: inlier iff max(|r~x|, |r~y|) <= tau.
inline void classify_inliers(std::vector<ResidualRecord>& records, double tau) {
  if (tau <= 0.0) throw ValidationError("inlier tau must be positive");
  for (auto& r : records) {
    r.inlier = std::max(std::abs(r.normalized.x()), std::abs(r.normalized.y())) <= tau;
  }
}

namespace detail {

/// Weight of the unit-quaternion pseudo-observation. It pins the radial
/// (scale) direction of each 4-parameter quaternion block, which the
/// projection cannot observe, so the Gauss-Newton matrix stays invertible.
inline constexpr double kQuatConstraintSigma = 1e-6;

class BundleSolver {
 public:
  BundleSolver(const ObservationSet& set, const BundleInit& init, const SolverConfig& cfg,
               const BundleOptions& opt)
      : set_(set), cfg_(cfg), opt_(opt) {
    if (init.poses.size() != set.frames.size()) {
      throw ValidationError("bundle: pose init size mismatch");
    }
    if (init.points.size() != set.phantom.size()) {
      throw ValidationError("bundle: point init size mismatch");
    }
    systems_ = set.system_ids();
    for (int s : systems_) {
      if (!init.iop.count(s)) {
        throw ValidationError("bundle: missing interior orientation for system " +
                              std::to_string(s));
      }
    }
    iop_ = init.iop;
    poses_ = init.poses;
    for (auto& p : poses_) p.q = p.q.normalized();
    points_ = init.points;

    build_layout();

    obs_frame_.resize(set.observations.size());
    obs_point_.resize(set.observations.size());
    for (std::size_t i = 0; i < set.observations.size(); ++i) {
      const auto& o = set.observations[i];
      obs_frame_[i] = set.frame_index({o.system_id, o.frame_id});
      obs_point_[i] = set.point_index(o.target_id);
      if (obs_frame_[i] < 0 || obs_point_[i] < 0) {
        throw ValidationError("bundle: observation references unknown frame or target");
      }
    }

    structural_checks();
  }

  /// Residual records, covariances and cost at the current state, without
  /// taking any step.
  BundleResult evaluate_only() {
    BundleResult out;
    out.iop = iop_;
    out.poses = poses_;
    out.points = points_;
    out.cost = compute_cost(iop_, poses_, points_);
    out.iterations = 0;
    out.stop = StopReason::max_iterations;
    covariance_pass(out);
    classify_inliers(out.records, cfg_.inlier_tau);
    return out;
  }

  BundleResult solve() {
    double cost = compute_cost(iop_, poses_, points_);
    if (!std::isfinite(cost)) {
      throw ValidationError("bundle: initial parameters give non-finite cost");
    }

    double lambda = cfg_.lm_lambda0;
    StopReason stop = StopReason::max_iterations;
    std::vector<IterationRecord> trace;
    int iterations = 0;

    for (int it = 1; it <= cfg_.max_iterations; ++it) {
      iterations = it;
      assemble(iop_, poses_, points_, /*robust=*/true);
      if (gradient_max_norm() <= cfg_.grad_tol) {
        stop = StopReason::gradient_tolerance;
        break;
      }

      int rejects = 0;
      bool stopped = false;
      while (true) {
        Eigen::VectorXd delta;
        if (!solve_damped(lambda, delta)) {
          lambda = std::min(lambda * cfg_.lm_up, 1e18);
          if (++rejects >= cfg_.max_rejects) {
            throw DivergenceError("bundle: no decreasing step after " +
                                  std::to_string(rejects) + " rejections");
          }
          continue;
        }
        const double step_norm = delta.size() ? delta.cwiseAbs().maxCoeff() : 0.0;

        auto iop_c = iop_;
        auto poses_c = poses_;
        auto points_c = points_;
        apply_step(delta, iop_c, poses_c, points_c);
        const double delta_cost =
            compute_cost_delta(iop_, poses_, points_, iop_c, poses_c, points_c);
        const double cand = cost + delta_cost;

        if (delta_cost < 0.0) {
          trace.push_back({it, cand, lambda, step_norm, true});
          const double improvement = -delta_cost;
          iop_ = std::move(iop_c);
          poses_ = std::move(poses_c);
          points_ = std::move(points_c);
          cost = cand;
          lambda = std::max(lambda / cfg_.lm_down, 1e-14);
          if (step_norm <= cfg_.step_tol) {
            stop = StopReason::step_tolerance;
            stopped = true;
          } else if (improvement <= cfg_.cost_tol * std::max(std::abs(cand), 1.0) &&
                     lambda <= cfg_.lm_lambda0) {
            // a tiny gain with an open trust region is convergence; a tiny
            // gain under heavy damping is just a short step
            stop = StopReason::cost_tolerance;
            stopped = true;
          }
          break;
        }

        trace.push_back({it, cand, lambda, step_norm, false});
        if (step_norm <= cfg_.step_tol) {
          // The damped step is already negligible; nothing left to gain.
          stop = StopReason::step_tolerance;
          stopped = true;
          break;
        }
        lambda = std::min(lambda * cfg_.lm_up, 1e18);
        if (++rejects >= cfg_.max_rejects) {
          throw DivergenceError("bundle: no decreasing step after " + std::to_string(rejects) +
                                " rejections (cost " + io_fmt(cost) + ")");
        }
      }
      if (stopped) break;
    }

    BundleResult out;
    out.iop = iop_;
    out.poses = poses_;
    for (auto& p : out.poses) p.q = p.q.normalized();
    out.points = points_;
    out.cost = compute_cost(iop_, poses_, points_);  // exact, not accumulated
    out.iterations = iterations;
    out.stop = stop;
    out.trace = std::move(trace);
    covariance_pass(out);
    classify_inliers(out.records, cfg_.inlier_tau);
    return out;
  }

 private:
  static std::string io_fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
  }

  void build_layout() {
    int offset = 0;
    if (opt_.estimate_iop) {
      for (int s : systems_) {
        iop_offset_[s] = offset;
        offset += 3;
      }
    }
    pose_offset_.assign(set_.frames.size(), -1);
    if (opt_.estimate_poses) {
      for (std::size_t f = 0; f < set_.frames.size(); ++f) {
        pose_offset_[f] = offset;
        offset += 7;
      }
    }
    n_cam_ = offset;

    point_param_.assign(set_.phantom.size(), -1);
    if (opt_.estimate_points) {
      for (std::size_t p = 0; p < set_.phantom.size(); ++p) {
        if (set_.phantom[p].role == PointRole::tie) {
          point_param_[p] = n_points_est_++;
        }
      }
    }
  }

  void structural_checks() const {
    if (opt_.estimate_poses && opt_.estimate_points) {
      // Datum: the free network has 7 gauge freedoms; >= 3 observed
      // non-collinear control points remove them.
      std::set<int> observed;
      for (const auto& o : set_.observations) observed.insert(o.target_id);
      std::vector<Vector3d> controls;
      for (const auto& p : set_.phantom) {
        if (p.role == PointRole::control && observed.count(p.id)) controls.push_back(p.P);
      }
      if (controls.size() < 3 || points_collinear(controls)) {
        throw SingularNormalMatrix(
            "datum deficiency: network translation (3), rotation (3) and scale (1) are "
            "unconstrained; need >= 3 observed non-collinear control points, have " +
            std::to_string(controls.size()));
      }
    }
    if (opt_.estimate_poses) {
      std::vector<std::vector<Vector3d>> per_frame(set_.frames.size());
      for (std::size_t i = 0; i < set_.observations.size(); ++i) {
        per_frame[obs_frame_[i]].push_back(points_[obs_point_[i]]);
      }
      for (std::size_t f = 0; f < set_.frames.size(); ++f) {
        if (per_frame[f].size() < 3 || points_collinear(per_frame[f])) {
          throw SingularNormalMatrix("frame (system " +
                                     std::to_string(set_.frames[f].system_id) + ", frame " +
                                     std::to_string(set_.frames[f].frame_id) +
                                     "): fewer than 3 non-collinear targets for resection");
        }
      }
    }
    if (opt_.estimate_points && !opt_.estimate_poses) {
      std::map<int, std::set<int>> frames_per_target;
      for (const auto& o : set_.observations) frames_per_target[o.target_id].insert(o.frame_id);
      for (std::size_t p = 0; p < set_.phantom.size(); ++p) {
        if (point_param_[p] >= 0 && frames_per_target[set_.phantom[p].id].size() < 2) {
          throw SingularNormalMatrix("target " + std::to_string(set_.phantom[p].id) +
                                     " is underdetermined (seen in fewer than 2 frames)");
        }
      }
    }
  }

  double compute_cost(const std::map<int, InteriorOrientation>& iop,
                      const std::vector<Pose>& poses, const std::vector<Vector3d>& points) const {
    double total = 0.0;
    for (std::size_t i = 0; i < set_.observations.size(); ++i) {
      const auto& o = set_.observations[i];
      Vector2d proj;
      try {
        proj = project(iop.at(o.system_id), Vector2d::Zero(), poses[obs_frame_[i]],
                       points[obs_point_[i]]);
      } catch (const DepthDegenerate&) {
        return std::numeric_limits<double>::infinity();
      }
      const double inv_var = 1.0 / (o.sigma * o.sigma);
      const Vector2d r(o.x - proj.x(), o.y - proj.y());
      total += student_t_cost_term(r.x() * r.x() * inv_var, cfg_.nu);
      total += student_t_cost_term(r.y() * r.y() * inv_var, cfg_.nu);
    }
    return std::isfinite(total) ? total : std::numeric_limits<double>::infinity();
  }

  /// cost(candidate) - cost(current), accumulated per scalar term. Summing
  /// the per-term differences resolves improvements far below the rounding
  /// of the two absolute cost values, which is what lets LM converge into
  /// the weakly determined directions.
  double compute_cost_delta(const std::map<int, InteriorOrientation>& iop_a,
                            const std::vector<Pose>& poses_a,
                            const std::vector<Vector3d>& points_a,
                            const std::map<int, InteriorOrientation>& iop_b,
                            const std::vector<Pose>& poses_b,
                            const std::vector<Vector3d>& points_b) const {
    double delta = 0.0;
    for (std::size_t i = 0; i < set_.observations.size(); ++i) {
      const auto& o = set_.observations[i];
      Vector2d proj_a, proj_b;
      try {
        proj_a = project(iop_a.at(o.system_id), Vector2d::Zero(), poses_a[obs_frame_[i]],
                         points_a[obs_point_[i]]);
        proj_b = project(iop_b.at(o.system_id), Vector2d::Zero(), poses_b[obs_frame_[i]],
                         points_b[obs_point_[i]]);
      } catch (const DepthDegenerate&) {
        return std::numeric_limits<double>::infinity();
      }
      const double inv_var = 1.0 / (o.sigma * o.sigma);
      const Vector2d ra(o.x - proj_a.x(), o.y - proj_a.y());
      const Vector2d rb(o.x - proj_b.x(), o.y - proj_b.y());
      for (int m = 0; m < 2; ++m) {
        delta += student_t_cost_term(rb[m] * rb[m] * inv_var, cfg_.nu) -
                 student_t_cost_term(ra[m] * ra[m] * inv_var, cfg_.nu);
      }
    }
    return std::isfinite(delta) ? delta : std::numeric_limits<double>::infinity();
  }

  /// Builds the (possibly robust-reweighted) Gauss-Newton system at the given
  /// state: cam block U, per-point V/W blocks and the gradient.
  void assemble(const std::map<int, InteriorOrientation>& iop, const std::vector<Pose>& poses,
                const std::vector<Vector3d>& points, bool robust) {
    U_ = Eigen::MatrixXd::Zero(n_cam_, n_cam_);
    g_cam_ = Eigen::VectorXd::Zero(n_cam_);
    V_.assign(n_points_est_, Matrix3d::Zero());
    W_.assign(n_points_est_, Eigen::MatrixXd::Zero(n_cam_, 3));
    g_pt_ = Eigen::VectorXd::Zero(3 * n_points_est_);

    for (std::size_t i = 0; i < set_.observations.size(); ++i) {
      const auto& o = set_.observations[i];
      const int f = obs_frame_[i];
      const int p = obs_point_[i];
      const auto jac =
          project_jacobian(iop.at(o.system_id), Vector2d::Zero(), poses[f], points[p]);
      const Vector2d r(o.x - jac.uv.x(), o.y - jac.uv.y());
      const double inv_var = 1.0 / (o.sigma * o.sigma);

      Eigen::Vector2d w;
      for (int m = 0; m < 2; ++m) {
        w[m] = robust ? student_t_weight(r[m] * r[m] * inv_var, cfg_.nu) * inv_var : inv_var;
      }

      // camera-side column spans of this observation
      struct Span {
        int offset;
        int width;
        Eigen::Matrix<double, 2, 7> jac;  // first `width` columns used
      };
      Span spans[2];
      int n_spans = 0;
      if (opt_.estimate_iop) {
        Span s;
        s.offset = iop_offset_.at(o.system_id);
        s.width = 3;
        s.jac.setZero();
        s.jac.block<2, 3>(0, 0) = jac.d_iop;
        spans[n_spans++] = s;
      }
      if (opt_.estimate_poses) {
        Span s;
        s.offset = pose_offset_[f];
        s.width = 7;
        s.jac.block<2, 3>(0, 0) = jac.d_T;
        s.jac.block<2, 4>(0, 3) = jac.d_q;
        spans[n_spans++] = s;
      }

      for (int a = 0; a < n_spans; ++a) {
        const auto ja = spans[a].jac.leftCols(spans[a].width);
        g_cam_.segment(spans[a].offset, spans[a].width) +=
            ja.transpose() * (w.asDiagonal() * r);
        for (int b = a; b < n_spans; ++b) {
          const auto jb = spans[b].jac.leftCols(spans[b].width);
          const Eigen::MatrixXd block = ja.transpose() * (w.asDiagonal() * jb);
          U_.block(spans[a].offset, spans[b].offset, spans[a].width, spans[b].width) += block;
          if (b != a) {
            U_.block(spans[b].offset, spans[a].offset, spans[b].width, spans[a].width) +=
                block.transpose();
          }
        }
      }

      const int pp = point_param_[p];
      if (pp >= 0) {
        V_[pp] += jac.d_P.transpose() * (w.asDiagonal() * jac.d_P);
        g_pt_.segment<3>(3 * pp) += jac.d_P.transpose() * (w.asDiagonal() * r);
        for (int a = 0; a < n_spans; ++a) {
          const auto ja = spans[a].jac.leftCols(spans[a].width);
          W_[pp].block(spans[a].offset, 0, spans[a].width, 3) +=
              ja.transpose() * (w.asDiagonal() * jac.d_P);
        }
      }
    }

    // Unit-quaternion pseudo-observations (residual is zero at a normalized
    // state, so only the normal matrix is touched).
    if (opt_.estimate_poses) {
      const double wq = 1.0 / (kQuatConstraintSigma * kQuatConstraintSigma);
      for (std::size_t f = 0; f < poses.size(); ++f) {
        Eigen::Vector4d q(poses[f].q.w, poses[f].q.x, poses[f].q.y, poses[f].q.z);
        U_.block<4, 4>(pose_offset_[f] + 3, pose_offset_[f] + 3) += 4.0 * wq * q * q.transpose();
      }
    }
  }

  double gradient_max_norm() const {
    double g = g_cam_.size() ? g_cam_.cwiseAbs().maxCoeff() : 0.0;
    if (g_pt_.size()) g = std::max(g, g_pt_.cwiseAbs().maxCoeff());
    return g;
  }

  /// Schur-complement solve of the damped system; false when the factor
  /// fails (caller raises damping).
  bool solve_damped(double lambda, Eigen::VectorXd& delta) const {
    std::vector<Eigen::LDLT<Matrix3d>> v_fact(n_points_est_);
    std::vector<Matrix3d> v_damped(n_points_est_);
    for (int p = 0; p < n_points_est_; ++p) {
      Matrix3d v = V_[p];
      for (int d = 0; d < 3; ++d) v(d, d) += lambda * std::max(v(d, d), 1e-12);
      v_fact[p].compute(v);
      if (v_fact[p].info() != Eigen::Success) return false;
      v_damped[p] = v;
    }

    Eigen::VectorXd delta_cam;
    if (n_cam_ > 0) {
      Eigen::MatrixXd s = U_;
      for (int d = 0; d < n_cam_; ++d) s(d, d) += lambda * std::max(s(d, d), 1e-12);
      Eigen::VectorXd rhs = g_cam_;
      for (int p = 0; p < n_points_est_; ++p) {
        const Eigen::MatrixXd v_inv_wt = v_fact[p].solve(W_[p].transpose());
        s.noalias() -= W_[p] * v_inv_wt;
        rhs.noalias() -= W_[p] * v_fact[p].solve(g_pt_.segment<3>(3 * p));
      }
      Eigen::LDLT<Eigen::MatrixXd> s_fact(s);
      if (s_fact.info() != Eigen::Success) return false;
      delta_cam = s_fact.solve(rhs);
      if (!delta_cam.allFinite()) return false;
    }

    delta.resize(n_cam_ + 3 * n_points_est_);
    if (n_cam_ > 0) delta.head(n_cam_) = delta_cam;
    for (int p = 0; p < n_points_est_; ++p) {
      Vector3d rhs_p = g_pt_.segment<3>(3 * p);
      if (n_cam_ > 0) rhs_p -= W_[p].transpose() * delta_cam;
      delta.segment<3>(n_cam_ + 3 * p) = v_fact[p].solve(rhs_p);
    }
    return delta.allFinite();
  }

  void apply_step(const Eigen::VectorXd& delta, std::map<int, InteriorOrientation>& iop,
                  std::vector<Pose>& poses, std::vector<Vector3d>& points) const {
    if (opt_.estimate_iop) {
      for (int s : systems_) {
        const int off = iop_offset_.at(s);
        iop[s].x_p += delta[off];
        iop[s].y_p += delta[off + 1];
        iop[s].c += delta[off + 2];
      }
    }
    if (opt_.estimate_poses) {
      for (std::size_t f = 0; f < poses.size(); ++f) {
        const int off = pose_offset_[f];
        poses[f].T += delta.segment<3>(off);
        poses[f].q.w += delta[off + 3];
        poses[f].q.x += delta[off + 4];
        poses[f].q.y += delta[off + 5];
        poses[f].q.z += delta[off + 6];
        poses[f].q = poses[f].q.normalized();
      }
    }
    for (std::size_t p = 0; p < points.size(); ++p) {
      if (point_param_[p] >= 0) {
        points[p] += delta.segment<3>(n_cam_ + 3 * point_param_[p]);
      }
    }
  }

  /// Gaussian (C_l-weighted) Gauss-Newton covariance at the solution, then
  /// per-observation residual covariance C_r = C_l - A Sigma A' blockwise.
  void covariance_pass(BundleResult& out) {
    assemble(out.iop, out.poses, out.points, /*robust=*/false);

    std::vector<Eigen::LDLT<Matrix3d>> v_fact(n_points_est_);
    for (int p = 0; p < n_points_est_; ++p) {
      v_fact[p].compute(V_[p]);
      if (v_fact[p].info() != Eigen::Success || (V_[p].diagonal().array() <= 0.0).any()) {
        throw SingularNormalMatrix("object point block singular at convergence");
      }
    }

    Eigen::MatrixXd cam_cov;  // S0^{-1}
    if (n_cam_ > 0) {
      Eigen::MatrixXd s = U_;
      for (int p = 0; p < n_points_est_; ++p) {
        s.noalias() -= W_[p] * v_fact[p].solve(W_[p].transpose());
      }
      Eigen::LDLT<Eigen::MatrixXd> s_fact(s);
      if (s_fact.info() != Eigen::Success ||
          (s_fact.vectorD().array() <= 0.0).any()) {
        throw SingularNormalMatrix(
            "normal matrix singular at convergence (datum or geometry deficiency)");
      }
      cam_cov = s_fact.solve(Eigen::MatrixXd::Identity(n_cam_, n_cam_));
    }

    // Parameter standard deviations.
    for (int s : systems_) {
      if (opt_.estimate_iop) {
        const int off = iop_offset_.at(s);
        out.iop_sigma[s] = cam_cov.diagonal().segment<3>(off).cwiseMax(0.0).cwiseSqrt();
      } else {
        out.iop_sigma[s] = Vector3d::Zero();
      }
    }
    out.pose_sigma.assign(set_.frames.size(), Eigen::Matrix<double, 7, 1>::Zero());
    if (opt_.estimate_poses) {
      for (std::size_t f = 0; f < set_.frames.size(); ++f) {
        out.pose_sigma[f] =
            cam_cov.diagonal().segment<7>(pose_offset_[f]).cwiseMax(0.0).cwiseSqrt();
      }
    }

    // Per estimated point: Sigma_pp = V^{-1} + K' cam_cov K with K = W V^{-1},
    // and the camera-point cross covariance -cam_cov K.
    std::vector<Matrix3d> sigma_pp(n_points_est_);
    std::vector<Eigen::MatrixXd> cross(n_points_est_);  // n_cam x 3
    for (int p = 0; p < n_points_est_; ++p) {
      const Matrix3d v_inv = v_fact[p].solve(Matrix3d::Identity());
      if (n_cam_ > 0) {
        const Eigen::MatrixXd k = W_[p] * v_inv;  // n_cam x 3
        cross[p] = -cam_cov * k;
        sigma_pp[p] = v_inv + k.transpose() * cam_cov * k;
      } else {
        cross[p] = Eigen::MatrixXd::Zero(0, 3);
        sigma_pp[p] = v_inv;
      }
    }

    out.point_sigma.assign(set_.phantom.size(), Vector3d::Zero());
    for (std::size_t p = 0; p < set_.phantom.size(); ++p) {
      if (point_param_[p] >= 0) {
        out.point_sigma[p] =
            sigma_pp[point_param_[p]].diagonal().cwiseMax(0.0).cwiseSqrt();
      }
    }

    // Residual records.
    out.records.resize(set_.observations.size());
    for (std::size_t i = 0; i < set_.observations.size(); ++i) {
      const auto& o = set_.observations[i];
      const int f = obs_frame_[i];
      const int p = obs_point_[i];
      const auto jac =
          project_jacobian(out.iop.at(o.system_id), Vector2d::Zero(), out.poses[f],
                           out.points[p]);

      ResidualRecord rec;
      rec.obs_index = static_cast<int>(i);
      rec.location = {o.x, o.y};
      rec.residual = Vector2d(o.x - jac.uv.x(), o.y - jac.uv.y());

      // Gather the sparse A Sigma A' terms touching this observation.
      struct Span {
        int offset;
        int width;
        Eigen::Matrix<double, 2, 7> jac;
      };
      Span spans[2];
      int n_spans = 0;
      if (opt_.estimate_iop) {
        Span s;
        s.offset = iop_offset_.at(o.system_id);
        s.width = 3;
        s.jac.setZero();
        s.jac.block<2, 3>(0, 0) = jac.d_iop;
        spans[n_spans++] = s;
      }
      if (opt_.estimate_poses) {
        Span s;
        s.offset = pose_offset_[f];
        s.width = 7;
        s.jac.block<2, 3>(0, 0) = jac.d_T;
        s.jac.block<2, 4>(0, 3) = jac.d_q;
        spans[n_spans++] = s;
      }

      Matrix2d a_sigma_at = Matrix2d::Zero();
      for (int a = 0; a < n_spans; ++a) {
        const auto ja = spans[a].jac.leftCols(spans[a].width);
        for (int b = 0; b < n_spans; ++b) {
          const auto jb = spans[b].jac.leftCols(spans[b].width);
          a_sigma_at += ja *
                        cam_cov.block(spans[a].offset, spans[b].offset, spans[a].width,
                                      spans[b].width) *
                        jb.transpose();
        }
      }
      const int pp = point_param_[p];
      if (pp >= 0) {
        a_sigma_at += jac.d_P * sigma_pp[pp] * jac.d_P.transpose();
        for (int a = 0; a < n_spans; ++a) {
          const auto ja = spans[a].jac.leftCols(spans[a].width);
          const Matrix2d mixed =
              ja * cross[pp].block(spans[a].offset, 0, spans[a].width, 3) * jac.d_P.transpose();
          a_sigma_at += mixed + mixed.transpose();
        }
      }

      Matrix2d c_r = o.sigma * o.sigma * Matrix2d::Identity() - a_sigma_at;
      rec.r_cov = clamp_cov2(c_r, &rec.cov_clamped);
      rec.normalized = {rec.residual.x() / std::sqrt(rec.r_cov(0, 0)),
                        rec.residual.y() / std::sqrt(rec.r_cov(1, 1))};
      out.records[i] = rec;
    }
  }

  const ObservationSet& set_;
  SolverConfig cfg_;
  BundleOptions opt_;

  std::vector<int> systems_;
  std::map<int, InteriorOrientation> iop_;
  std::vector<Pose> poses_;
  std::vector<Vector3d> points_;

  std::map<int, int> iop_offset_;
  std::vector<int> pose_offset_;
  std::vector<int> point_param_;
  int n_cam_ = 0;
  int n_points_est_ = 0;

  std::vector<int> obs_frame_;
  std::vector<int> obs_point_;

  Eigen::MatrixXd U_;
  Eigen::VectorXd g_cam_;
  std::vector<Matrix3d> V_;
  std::vector<Eigen::MatrixXd> W_;
  Eigen::VectorXd g_pt_;
};

}  // namespace detail

/// Robust bundle adjustment over a (distortion-corrected) observation set.
/// Control points and, depending on `opt`, interior orientations are held
/// fixed. Throws SingularNormalMatrix on datum deficiency and
/// DivergenceError when no decreasing step exists.
inline BundleResult bundle_adjust(const ObservationSet& set, const BundleInit& init,
                                  const SolverConfig& cfg, const BundleOptions& opt = {}) {
  detail::BundleSolver solver(set, init, cfg, opt);
  return solver.solve();
}

/// Residuals, covariances and inlier flags evaluated at a fixed parameter
/// state (for scoring an existing calibration without re-solving).
inline BundleResult evaluate_at_state(const ObservationSet& set, const BundleInit& state,
                                      const SolverConfig& cfg, const BundleOptions& opt = {}) {
  detail::BundleSolver solver(set, state, cfg, opt);
  return solver.evaluate_only();
}

/// Single-frame spatial resection: pose of one exposure from known object
/// points, same robust objective, everything else fixed.
struct ResectionResult {
  Pose pose;
  Eigen::Matrix<double, 7, 1> pose_sigma;
  std::vector<ResidualRecord> records;
  double cost = 0.0;
};

inline ResectionResult resect_pose(const InteriorOrientation& iop,
                                   const std::vector<ImageObservation>& frame_obs,
                                   const std::vector<ObjectPoint>& object_points,
                                   const Pose& init_pose, const SolverConfig& cfg) {
  if (frame_obs.empty()) throw SingularNormalMatrix("resection: no observations");
  ObservationSet set;
  set.phantom = object_points;
  std::sort(set.phantom.begin(), set.phantom.end(),
            [](const ObjectPoint& a, const ObjectPoint& b) { return a.id < b.id; });
  set.observations = frame_obs;
  std::sort(set.observations.begin(), set.observations.end(),
            [](const ImageObservation& a, const ImageObservation& b) {
              return a.target_id < b.target_id;
            });
  for (const auto& o : set.observations) {
    if (o.system_id != frame_obs[0].system_id || o.frame_id != frame_obs[0].frame_id) {
      throw ValidationError("resection: observations span more than one frame");
    }
    if (set.point_index(o.target_id) < 0) {
      throw ValidationError("resection: unknown target " + std::to_string(o.target_id));
    }
  }
  set.frames = {{frame_obs[0].system_id, frame_obs[0].frame_id}};

  BundleInit init;
  init.iop[frame_obs[0].system_id] = iop;
  init.poses = {init_pose};
  init.points.resize(set.phantom.size());
  for (std::size_t i = 0; i < set.phantom.size(); ++i) init.points[i] = set.phantom[i].P;

  BundleOptions opt;
  opt.estimate_iop = false;
  opt.estimate_poses = true;
  opt.estimate_points = false;
  const BundleResult res = bundle_adjust(set, init, cfg, opt);

  ResectionResult out;
  out.pose = res.poses[0];
  out.pose_sigma = res.pose_sigma[0];
  out.records = res.records;
  out.cost = res.cost;
  return out;
}

/// Multi-frame intersection of the tie points with poses and interior
/// orientation held fixed (control points stay at their coordinates).
inline BundleResult triangulate_points(const ObservationSet& set, const BundleInit& init,
                                       const SolverConfig& cfg) {
  BundleOptions opt;
  opt.estimate_iop = false;
  opt.estimate_poses = false;
  opt.estimate_points = true;
  return bundle_adjust(set, init, cfg, opt);
}

}  // namespace xcal
