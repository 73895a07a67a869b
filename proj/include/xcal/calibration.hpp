#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xcal/bundle.hpp"
#include "xcal/distortion.hpp"
#include "xcal/observations.hpp"

namespace xcal {

struct CalibConfig {
  SolverConfig solver;          // solver.mode selects the IOP treatment
  CvConfig cv;
  int max_outer = 50;
  double eps_conv = 1e-4;       // relative change of F and of G
  int patience = 3;             // consecutive in-tolerance iterations
  double eps_fast = 1e-7;       // immediate stop when both changes drop this low
  double c_nominal = 1500.0;    // nominal principal distance (px)
};

struct OuterIteration {
  int iteration = 0;
  double f = 0.0;      // bundle cost after this iteration's adjustment
  double g = 0.0;      // CV cost of this iteration's distortion fit
  double f_rel = 0.0;  // F / F(1)
  double g_rel = 0.0;  // G / G(1)
  double blend = 0.0;  // (f_rel + g_rel) / 2, the diagnostic "weighted total"
};

struct CalibrationRun {
  IopMode mode = IopMode::parametric;
  std::vector<OuterIteration> trace;
  bool converged = false;
  std::string reason;
  int iterations = 0;
};

struct SystemCalibration {
  int system_id = 0;
  InteriorOrientation iop;
  Vector3d iop_sigma = Vector3d::Zero();
  DistortionModel model;
};

struct CalibrationResult {
  std::vector<SystemCalibration> systems;
  std::vector<FrameKey> frames;
  std::vector<Pose> poses;
  std::vector<Eigen::Matrix<double, 7, 1>> pose_sigma;
  std::vector<ObjectPoint> objects;  // estimated coordinates, roles preserved
  std::vector<Vector3d> object_sigma;
  CalibrationRun run;
  BundleResult last_bundle;  // residuals/covariances of the final adjustment

  const SystemCalibration& system(int system_id) const {
    for (const auto& s : systems)
      if (s.system_id == system_id) return s;
    throw IdMismatch("no calibration for system " + std::to_string(system_id));
  }
};

// ------------------------- correction application --------------------------

inline Vector2d apply_correction(const DistortionModel& model, const Vector2d& measured) {
  if (model.is_null()) return measured;
  return measured - model.predict(measured);
}

/// Corrected copy of an observation set; models keyed by system id, missing
/// entries mean no correction for that system.
inline ObservationSet apply_correction(const std::map<int, const DistortionModel*>& models,
                                       const ObservationSet& set) {
  ObservationSet out = set;
  for (auto& o : out.observations) {
    auto it = models.find(o.system_id);
    if (it == models.end() || it->second == nullptr || it->second->is_null()) continue;
    const Vector2d corrected = apply_correction(*it->second, Vector2d(o.x, o.y));
    o.x = corrected.x();
    o.y = corrected.y();
  }
  return out;
}

/// Dense correction map over a centered square pixel grid.
struct GridCorrection {
  Vector2d location;
  Vector2d correction;
};

inline std::vector<GridCorrection> correction_grid(const DistortionModel& model, double half_size,
                                                   double step) {
  if (step <= 0.0) throw ValidationError("grid step must be positive");
  std::vector<GridCorrection> out;
  for (double y = -half_size; y <= half_size + 1e-9; y += step) {
    for (double x = -half_size; x <= half_size + 1e-9; x += step) {
      const Vector2d loc(x, y);
      out.push_back({loc, model.is_null() ? Vector2d::Zero() : model.predict(loc)});
    }
  }
  return out;
}

// ----------------------------- the outer loop -------------------------------

namespace detail {

inline double rel_change(double prev, double cur) {
  return std::abs(cur - prev) / std::max(std::abs(prev), 1e-12);
}

struct LoopState {
  std::map<int, InteriorOrientation> iop;
  std::vector<Pose> poses;
  std::vector<Vector3d> points;
  std::map<int, DistortionModel> models;
  BundleResult bundle;
};

inline CalibrationResult run_self_calibration(const ObservationSet& obs,
                                              const std::map<FrameKey, Pose>& init_poses,
                                              const CalibConfig& cfg,
                                              const std::map<int, DistortionModel>& prior_models,
                                              bool fit_models = true) {
  const std::vector<int> systems = obs.system_ids();
  if (systems.empty()) throw ValidationError("calibration: no observations");

  BundleInit init;
  for (int s : systems) init.iop[s] = {0.0, 0.0, cfg.c_nominal};
  init.poses.reserve(obs.frames.size());
  for (const auto& f : obs.frames) {
    auto it = init_poses.find(f);
    if (it == init_poses.end()) {
      throw ValidationError("calibration: no initial pose for system " +
                            std::to_string(f.system_id) + ", frame " +
                            std::to_string(f.frame_id));
    }
    init.poses.push_back(it->second);
  }
  init.points.resize(obs.phantom.size());
  for (std::size_t i = 0; i < obs.phantom.size(); ++i) init.points[i] = obs.phantom[i].P;

  BundleOptions opt;
  opt.estimate_iop = cfg.solver.mode == IopMode::parametric;
  opt.estimate_poses = true;
  opt.estimate_points = true;

  LoopState cur;
  cur.iop = init.iop;
  cur.poses = init.poses;
  cur.points = init.points;
  for (int s : systems) {
    auto it = prior_models.find(s);
    cur.models[s] = (it != prior_models.end()) ? it->second : DistortionModel();
  }

  CalibrationRun run;
  run.mode = cfg.solver.mode;
  LoopState accepted;  // last state whose F kept the outer descent
  double f_prev = 0.0, g_prev = 0.0, f0 = 0.0, g0 = 0.0;
  int streak = 0;

  for (int outer = 1; outer <= cfg.max_outer; ++outer) {
    std::map<int, const DistortionModel*> model_ptrs;
    for (int s : systems) model_ptrs[s] = &cur.models.at(s);
    const ObservationSet corrected = apply_correction(model_ptrs, obs);

    BundleInit it_init;
    it_init.iop = cur.iop;
    it_init.poses = cur.poses;
    it_init.points = cur.points;
    const BundleResult bundle = bundle_adjust(corrected, it_init, cfg.solver, opt);
    const double f = bundle.cost;

    // Outer-loop descent guard: an iteration that raises F (the kNN update
    // overshot) is rejected and the previous state is final.
    if (outer > 1 && f > f_prev + 1e-9 * std::max(std::abs(f_prev), 1.0)) {
      cur = accepted;
      run.converged = true;
      run.reason = "outer step rejected (F would increase); previous iterate is the optimum";
      break;
    }

    cur.iop = bundle.iop;
    cur.poses = bundle.poses;
    cur.points = bundle.points;
    cur.bundle = bundle;

    // Fit per-system distortion on this adjustment's inlier residuals.
    // Sample locations are the corrected measurement locations; values are
    // the prior correction at the raw measurement plus the new residual.
    double g = 0.0;
    std::map<int, DistortionModel> fitted = cur.models;
    for (int s : fit_models ? systems : std::vector<int>{}) {
      std::vector<DistortionSample> raw;
      for (const auto& rec : bundle.records) {
        const auto& o = obs.observations[rec.obs_index];
        if (o.system_id != s || !rec.inlier) continue;
        DistortionSample sample;
        sample.location = {o.x, o.y};  // measured (uncorrected) location
        sample.value = rec.residual;
        sample.weight = rec.r_cov;
        raw.push_back(sample);
      }
      const DistortionModel& prior = cur.models.at(s);
      fitted[s] = fit_distortion(raw, prior.is_null() ? nullptr : &prior, cfg.cv);
      g += fitted[s].cv_cost();
    }

    if (outer == 1) {
      f0 = std::max(f, 1e-12);
      g0 = std::max(g, 1e-12);
    }
    OuterIteration entry;
    entry.iteration = outer;
    entry.f = f;
    entry.g = g;
    entry.f_rel = f / f0;
    entry.g_rel = g / g0;
    entry.blend = 0.5 * (entry.f_rel + entry.g_rel);
    run.trace.push_back(entry);
    run.iterations = outer;

    accepted = cur;
    accepted.models = fitted;  // cumulative field is part of the result

    if (outer > 1) {
      const double df = rel_change(f_prev, f);
      const double dg = rel_change(g_prev, g);
      if (df < cfg.eps_fast && dg < cfg.eps_fast) {
        cur = accepted;
        run.converged = true;
        run.reason = "relative changes of F and G below fast tolerance";
        break;
      }
      streak = (df < cfg.eps_conv && dg < cfg.eps_conv) ? streak + 1 : 0;
      if (streak >= cfg.patience) {
        cur = accepted;
        run.converged = true;
        run.reason = "relative changes of F and G below tolerance over patience window";
        break;
      }
    }
    f_prev = f;
    g_prev = g;
    cur.models = fitted;
    if (outer == cfg.max_outer) {
      cur = accepted;
      run.reason = "max outer iterations reached with changes above tolerance";
    }
  }

  CalibrationResult out;
  out.run = run;
  out.frames = obs.frames;
  out.poses = cur.poses;
  out.pose_sigma = cur.bundle.pose_sigma;
  out.objects = obs.phantom;
  for (std::size_t i = 0; i < out.objects.size(); ++i) out.objects[i].P = cur.points[i];
  out.object_sigma = cur.bundle.point_sigma;
  for (int s : systems) {
    SystemCalibration sys;
    sys.system_id = s;
    sys.iop = cur.iop.at(s);
    sys.iop_sigma = cur.bundle.iop_sigma.count(s) ? cur.bundle.iop_sigma.at(s) : Vector3d::Zero();
    sys.model = cur.models.at(s);
    out.systems.push_back(std::move(sys));
  }
  out.last_bundle = cur.bundle;
  return out;
}

}  // namespace detail

/// Alternating robust bundle adjustment and kNN distortion regression for a
/// single system (the self-calibration loop). In learned mode the interior
/// orientation stays frozen at (0, 0, c_nominal) and the regressor absorbs
/// it; in parametric mode it is estimated in the adjustment.
inline CalibrationResult self_calibrate(const ObservationSet& obs,
                                        const std::map<FrameKey, Pose>& init_poses,
                                        const CalibConfig& cfg,
                                        const std::map<int, DistortionModel>& prior_models = {}) {
  if (obs.system_ids().size() != 1) {
    throw ValidationError("self_calibrate expects exactly one system (use calibrate_joint)");
  }
  return detail::run_self_calibration(obs, init_poses, cfg, prior_models);
}

/// Joint calibration of two systems sharing one phantom: a single adjustment
/// over both systems' frames with shared tie points, one distortion model
/// per system, no relative-orientation constraint between the systems.
inline CalibrationResult calibrate_joint(const ObservationSet& obs,
                                         const std::map<FrameKey, Pose>& init_poses,
                                         const CalibConfig& cfg,
                                         const std::map<int, DistortionModel>& prior_models = {}) {
  if (obs.system_ids().size() != 2) {
    throw ValidationError("calibrate_joint expects exactly two systems");
  }
  return detail::run_self_calibration(obs, init_poses, cfg, prior_models);
}

/// The pre-calibration state both modes start from: one robust adjustment
/// with the interior orientation frozen at nominal and no distortion
/// corrections. Reports compare against this as "Before".
inline CalibrationResult baseline_adjust(const ObservationSet& obs,
                                         const std::map<FrameKey, Pose>& init_poses,
                                         const CalibConfig& cfg) {
  CalibConfig base = cfg;
  base.solver.mode = IopMode::learned;
  base.max_outer = 1;
  CalibrationResult res = detail::run_self_calibration(obs, init_poses, base, {},
                                                       /*fit_models=*/false);
  // A one-iteration run is the definition of the baseline, not a failure.
  res.run.converged = true;
  res.run.reason = "baseline (single adjustment, nominal IOP, no corrections)";
  for (auto& sys : res.systems) sys.model = DistortionModel();
  return res;
}

}  // namespace xcal
