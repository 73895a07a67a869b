#pragma once

#include <CLI11.hpp>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xcal/calibration.hpp"
#include "xcal/csv.hpp"
#include "xcal/observations.hpp"
#include "xcal/quality.hpp"
#include "xcal/synthetic.hpp"

// Command-line front end. Exit codes: 0 ok, 2 configuration/input error,
// 3 non-convergence, 4 solver singularity, 1 anything else.

namespace xcal {
namespace cli {

namespace fs = std::filesystem;

// ------------------------------ result bundle -------------------------------

inline const char* kIopHeader = "system_id,x_p_px,y_p_px,c_px,sx_p_px,sy_p_px,sc_px";
inline const char* kObjectsHeader = "target_id,X_mm,Y_mm,Z_mm,sX_mm,sY_mm,sZ_mm,role";
inline const char* kPoseSigmaSuffix = ",sTx_mm,sTy_mm,sTz_mm,sqw,sqx,sqy,sqz";
inline const char* kTraceHeader = "iter,F,G,F_rel,G_rel,blend";

inline std::string mode_name(IopMode m) {
  return m == IopMode::parametric ? "iop_parametric" : "iop_learned";
}

inline IopMode parse_mode(const std::string& s) {
  if (s == "iop_parametric") return IopMode::parametric;
  if (s == "iop_learned") return IopMode::learned;
  throw ConfigError("unknown mode '" + s + "' (use iop_parametric or iop_learned)");
}

inline void write_calibration_bundle(const fs::path& dir, const CalibrationResult& result,
                                     const CalibConfig& cfg) {
  fs::create_directories(dir);

  {
    io::FileWriter w((dir / "iop.csv").string());
    w.line(kIopHeader);
    for (const auto& sys : result.systems) {
      w.line(std::to_string(sys.system_id) + "," + io::fmt_full(sys.iop.x_p) + "," +
             io::fmt_full(sys.iop.y_p) + "," + io::fmt_full(sys.iop.c) + "," +
             io::fmt_full(sys.iop_sigma.x()) + "," + io::fmt_full(sys.iop_sigma.y()) + "," +
             io::fmt_full(sys.iop_sigma.z()));
    }
  }

  {
    io::FileWriter w((dir / "poses.csv").string());
    w.line(std::string(kPoseHeader) + kPoseSigmaSuffix);
    for (std::size_t f = 0; f < result.frames.size(); ++f) {
      const Quaternion q = result.poses[f].q.normalized().canonical();
      const auto& s = result.pose_sigma[f];
      std::string line = std::to_string(result.frames[f].system_id) + "," +
                         std::to_string(result.frames[f].frame_id);
      for (double v : {result.poses[f].T.x(), result.poses[f].T.y(), result.poses[f].T.z(), q.w,
                       q.x, q.y, q.z, s[0], s[1], s[2], s[3], s[4], s[5], s[6]}) {
        line += "," + io::fmt_full(v);
      }
      w.line(line);
    }
  }

  {
    io::FileWriter w((dir / "objects.csv").string());
    w.line(kObjectsHeader);
    for (std::size_t p = 0; p < result.objects.size(); ++p) {
      const auto& o = result.objects[p];
      const Vector3d s =
          p < result.object_sigma.size() ? result.object_sigma[p] : Vector3d::Zero();
      w.line(std::to_string(o.id) + "," + io::fmt_full(o.P.x()) + "," + io::fmt_full(o.P.y()) +
             "," + io::fmt_full(o.P.z()) + "," + io::fmt_full(s.x()) + "," +
             io::fmt_full(s.y()) + "," + io::fmt_full(s.z()) + "," + role_name(o.role));
    }
  }

  for (const auto& sys : result.systems) {
    save_distortion_model((dir / ("distortion_system" + std::to_string(sys.system_id) + ".csv"))
                              .string(),
                          sys.model);
  }

  {
    io::FileWriter w((dir / "trace.csv").string());
    w.line(kTraceHeader);
    for (const auto& t : result.run.trace) {
      w.line(std::to_string(t.iteration) + "," + io::fmt_full(t.f) + "," + io::fmt_full(t.g) +
             "," + io::fmt_full(t.f_rel) + "," + io::fmt_full(t.g_rel) + "," +
             io::fmt_full(t.blend));
    }
  }

  {
    io::KeyValueFile kv;
    kv.set("format", "xcal-run-v1");
    kv.set("mode", mode_name(result.run.mode));
    std::string systems;
    for (const auto& sys : result.systems) {
      if (!systems.empty()) systems += ' ';
      systems += std::to_string(sys.system_id);
    }
    kv.set("systems", systems);
    kv.set("converged", result.run.converged ? "1" : "0");
    kv.set("reason", result.run.reason);
    kv.set("outer_iterations", std::to_string(result.run.iterations));
    if (!result.run.trace.empty()) {
      kv.set_doubles("final_F", {result.run.trace.back().f});
      kv.set_doubles("final_G", {result.run.trace.back().g});
    }
    for (const auto& sys : result.systems) {
      kv.set("k.system." + std::to_string(sys.system_id), std::to_string(sys.model.k()));
    }
    kv.set_doubles("nu", {cfg.solver.nu});
    kv.set_doubles("inlier_tau", {cfg.solver.inlier_tau});
    kv.set_doubles("c_nominal", {cfg.c_nominal});
    kv.set("cv_folds", std::to_string(cfg.cv.folds));
    kv.set("cv_seed", std::to_string(cfg.cv.shuffle_seed));
    std::string grid;
    for (int k : cfg.cv.k_grid) {
      if (!grid.empty()) grid += ' ';
      grid += std::to_string(k);
    }
    kv.set("k_grid", grid);
    kv.set("max_outer", std::to_string(cfg.max_outer));
    kv.set_doubles("eps_conv", {cfg.eps_conv});
    kv.save((dir / "run.txt").string());
  }
}

struct LoadedBundle {
  IopMode mode = IopMode::parametric;
  std::vector<int> system_ids;
  std::map<int, InteriorOrientation> iop;
  std::map<int, DistortionModel> models;
  std::vector<FrameKey> frames;
  std::vector<Pose> poses;
  std::vector<ObjectPoint> objects;
  bool converged = true;

  CalibrationResult as_result() const {
    CalibrationResult r;
    for (int s : system_ids) {
      SystemCalibration sys;
      sys.system_id = s;
      sys.iop = iop.at(s);
      sys.model = models.at(s);
      r.systems.push_back(std::move(sys));
    }
    r.frames = frames;
    r.poses = poses;
    r.objects = objects;
    return r;
  }
};

inline LoadedBundle load_calibration_bundle(const fs::path& dir) {
  LoadedBundle b;
  const auto run = io::KeyValueFile::load((dir / "run.txt").string());
  b.mode = parse_mode(run.get("mode"));
  b.converged = run.get("converged") == "1";
  {
    std::istringstream ss(run.get("systems"));
    int s;
    while (ss >> s) b.system_ids.push_back(s);
  }

  const auto iop_lines = io::read_lines((dir / "iop.csv").string());
  if (iop_lines.empty() || iop_lines[0] != kIopHeader) {
    throw ParseError((dir / "iop.csv").string() + ": bad header");
  }
  for (std::size_t i = 1; i < iop_lines.size(); ++i) {
    if (iop_lines[i].empty()) continue;
    const auto f = io::split(iop_lines[i], ',');
    if (f.size() != 7) throw ParseError((dir / "iop.csv").string() + ": bad row");
    const int sys = static_cast<int>(io::parse_int(f[0], "iop.csv"));
    b.iop[sys] = {io::parse_double(f[1], "iop.csv"), io::parse_double(f[2], "iop.csv"),
                  io::parse_double(f[3], "iop.csv")};
  }

  for (int s : b.system_ids) {
    const fs::path model_path = dir / ("distortion_system" + std::to_string(s) + ".csv");
    b.models[s] = load_distortion_model(model_path.string());
    if (!b.iop.count(s)) throw ParseError("bundle lacks iop for system " + std::to_string(s));
  }

  for (const auto& [key, pose] : load_poses((dir / "poses.csv").string())) {
    b.frames.push_back(key);
    b.poses.push_back(pose);
  }

  const auto obj_lines = io::read_lines((dir / "objects.csv").string());
  if (obj_lines.empty() || obj_lines[0] != kObjectsHeader) {
    throw ParseError((dir / "objects.csv").string() + ": bad header");
  }
  for (std::size_t i = 1; i < obj_lines.size(); ++i) {
    if (obj_lines[i].empty()) continue;
    const auto f = io::split(obj_lines[i], ',');
    if (f.size() != 8) throw ParseError((dir / "objects.csv").string() + ": bad row");
    ObjectPoint p;
    p.id = static_cast<int>(io::parse_int(f[0], "objects.csv"));
    p.P = {io::parse_double(f[1], "objects.csv"), io::parse_double(f[2], "objects.csv"),
           io::parse_double(f[3], "objects.csv")};
    p.role = parse_role(f[7], "objects.csv");
    b.objects.push_back(p);
  }
  return b;
}

// -------------------------------- simulate ----------------------------------

struct SimulateOptions {
  std::string out;
  SyntheticScenario scenario;
};

inline int cmd_simulate(const SimulateOptions& opt) {
  if (opt.scenario.frames_train > opt.scenario.frames_total) {
    throw ConfigError("frames-train exceeds frames (train " +
                      std::to_string(opt.scenario.frames_train) + " > total " +
                      std::to_string(opt.scenario.frames_total) + ")");
  }
  if (opt.scenario.n_targets < 8) throw ConfigError("targets must be >= 8");
  if (opt.scenario.side_mm <= 0) throw ConfigError("side-mm must be positive");
  if (opt.scenario.noise_sigma_px < 0) throw ConfigError("noise-sigma must be >= 0");
  if (opt.scenario.outlier_fraction < 0 || opt.scenario.outlier_fraction > 0.5) {
    throw ConfigError("outlier-fraction must lie in [0, 0.5]");
  }

  const auto sim = simulate_captures(opt.scenario);
  const fs::path dir(opt.out);
  fs::create_directories(dir);
  save_phantom((dir / "phantom.csv").string(), sim.truth.phantom);
  save_observations((dir / "train.csv").string(), sim.train);
  save_observations((dir / "test.csv").string(), sim.test);
  save_truth((dir / "truth.txt").string(), sim.truth);
  save_poses((dir / "init_poses.csv").string(), sim.frame_keys, sim.init_poses);
  if (!sim.gross_errors.empty()) {
    save_gross_errors((dir / "gross_errors.csv").string(), sim.gross_errors);
  }
  std::cout << "simulated " << sim.train.observations.size() << " train / "
            << sim.test.observations.size() << " test observations into " << opt.out << "\n";
  return 0;
}

// -------------------------------- calibrate ---------------------------------

struct CalibrateOptions {
  std::string obs;
  std::string phantom;
  std::string init_poses;
  std::string out;
  std::string mode = "iop_parametric";
  bool joint = false;
  int system = 0;  // 0: the only system present
  CalibConfig calib;
};

inline std::map<FrameKey, Pose> load_init_pose_map(const std::string& path) {
  return load_poses(path);
}

inline int cmd_calibrate(const CalibrateOptions& opt) {
  const auto phantom = load_phantom(opt.phantom);
  ObservationSet all = load_observations(opt.obs, phantom);
  const auto init = load_init_pose_map(opt.init_poses);
  CalibConfig cfg = opt.calib;
  cfg.solver.mode = parse_mode(opt.mode);

  const auto systems = all.system_ids();
  CalibrationResult result;
  if (opt.joint) {
    if (systems.size() != 2) {
      throw ConfigError("--joint needs exactly two systems in " + opt.obs + ", found " +
                        std::to_string(systems.size()));
    }
    result = calibrate_joint(all, init, cfg);
  } else {
    int chosen = opt.system;
    if (chosen == 0) {
      if (systems.size() != 1) {
        throw ConfigError(opt.obs + " contains " + std::to_string(systems.size()) +
                          " systems; pick one with --system or use --joint");
      }
      chosen = systems[0];
    }
    if (std::find(systems.begin(), systems.end(), chosen) == systems.end()) {
      throw ConfigError("system " + std::to_string(chosen) + " not present in " + opt.obs);
    }
    result = self_calibrate(all.filter_system(chosen), init, cfg);
  }

  write_calibration_bundle(opt.out, result, cfg);
  std::cout << "calibration " << (result.run.converged ? "converged" : "did NOT converge")
            << " after " << result.run.iterations << " outer iterations (" << result.run.reason
            << ")\n";
  for (const auto& sys : result.systems) {
    std::cout << "system " << sys.system_id << ": iop = (" << io::fmt_fixed(sys.iop.x_p) << ", "
              << io::fmt_fixed(sys.iop.y_p) << ", " << io::fmt_fixed(sys.iop.c) << ") px, k = "
              << sys.model.k() << "\n";
  }
  return result.run.converged ? 0 : 3;
}

// --------------------------------- resect -----------------------------------

struct ResectOptions {
  std::string obs;
  std::string bundle;
  std::string init_poses;
  std::string out;
  SolverConfig solver;
};

inline int cmd_resect(const ResectOptions& opt) {
  const auto bundle = load_calibration_bundle(opt.bundle);
  const auto obs = load_observations(opt.obs, bundle.objects);
  const auto init = load_init_pose_map(opt.init_poses);

  std::map<int, const DistortionModel*> models;
  for (const auto& [s, m] : bundle.models) models[s] = &m;
  const ObservationSet corrected = apply_correction(models, obs);

  std::map<FrameKey, std::vector<ImageObservation>> by_frame;
  for (const auto& o : corrected.observations) by_frame[{o.system_id, o.frame_id}].push_back(o);

  std::vector<FrameKey> keys;
  std::vector<Pose> poses;
  std::vector<Eigen::Matrix<double, 7, 1>> sigmas;
  for (const auto& key : corrected.frames) {
    if (!bundle.iop.count(key.system_id)) {
      throw ConfigError("bundle has no calibration for system " +
                        std::to_string(key.system_id));
    }
    auto it = init.find(key);
    if (it == init.end()) {
      throw ConfigError("no initial pose for system " + std::to_string(key.system_id) +
                        ", frame " + std::to_string(key.frame_id));
    }
    const auto res = resect_pose(bundle.iop.at(key.system_id), by_frame.at(key), bundle.objects,
                                 it->second, opt.solver);
    keys.push_back(key);
    poses.push_back(res.pose);
    sigmas.push_back(res.pose_sigma);
  }

  fs::create_directories(opt.out);
  io::FileWriter w((fs::path(opt.out) / "resected_poses.csv").string());
  w.line(std::string(kPoseHeader) + kPoseSigmaSuffix);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const Quaternion q = poses[i].q.normalized().canonical();
    std::string line = std::to_string(keys[i].system_id) + "," + std::to_string(keys[i].frame_id);
    for (double v : {poses[i].T.x(), poses[i].T.y(), poses[i].T.z(), q.w, q.x, q.y, q.z,
                     sigmas[i][0], sigmas[i][1], sigmas[i][2], sigmas[i][3], sigmas[i][4],
                     sigmas[i][5], sigmas[i][6]}) {
      line += "," + io::fmt_full(v);
    }
    w.line(line);
  }
  std::cout << "resected " << keys.size() << " frames into " << opt.out << "\n";
  return 0;
}

// ---------------------------------- apply -----------------------------------

struct ApplyOptions {
  std::string model;
  std::string obs;       // correct an observation file...
  std::string phantom;   // needed to load obs
  double grid_step = 0;  // ...or emit a dense grid
  double grid_half = 512;
  std::string out_file;
};

inline int cmd_apply(const ApplyOptions& opt) {
  const auto model = load_distortion_model(opt.model);
  if ((opt.grid_step > 0) == !opt.obs.empty()) {
    throw ConfigError("use exactly one of --obs or --grid-step");
  }
  if (opt.grid_step > 0) {
    io::FileWriter w(opt.out_file);
    w.line("x_px,y_px,dx_px,dy_px");
    for (const auto& g : correction_grid(model, opt.grid_half, opt.grid_step)) {
      w.line(io::fmt_full(g.location.x()) + "," + io::fmt_full(g.location.y()) + "," +
             io::fmt_full(g.correction.x()) + "," + io::fmt_full(g.correction.y()));
    }
  } else {
    if (opt.phantom.empty()) throw ConfigError("--obs needs --phantom for validation");
    const auto obs = load_observations(opt.obs, load_phantom(opt.phantom));
    ObservationSet corrected = obs;
    for (auto& o : corrected.observations) {
      const Vector2d c = apply_correction(model, Vector2d(o.x, o.y));
      o.x = c.x();
      o.y = c.y();
    }
    save_observations(opt.out_file, corrected);
  }
  std::cout << "wrote " << opt.out_file << "\n";
  return 0;
}

// --------------------------------- evaluate ---------------------------------

struct EvaluateOptions {
  std::string bundle;
  std::string compare;  // optional second bundle
  std::string obs_train;
  std::string obs_test;
  std::string phantom;
  std::string init_poses;
  std::string truth;
  std::string out;
  SolverConfig solver;
  double c_nominal = 1500.0;
};

struct VariantEvaluation {
  std::string label;
  ImageErrorStats train_image;
  ObjectErrorStats object_in, object_out;
  PoseErrorStats pose_in, pose_out;
  std::vector<ResidualRecord> train_records;
};

namespace detail {

inline VariantEvaluation evaluate_result(const std::string& label,
                                         const CalibrationResult& result,
                                         const ObservationSet& train,
                                         const ObservationSet& test, const TruthRecord& truth,
                                         const std::map<FrameKey, Pose>& init,
                                         const SolverConfig& solver) {
  VariantEvaluation ev;
  ev.label = label;

  std::map<int, const DistortionModel*> models;
  std::map<int, InteriorOrientation> iop;
  for (const auto& sys : result.systems) {
    models[sys.system_id] = &sys.model;
    iop[sys.system_id] = sys.iop;
  }

  // training reprojection at the calibrated state
  const ObservationSet corrected = apply_correction(models, train);
  BundleInit state;
  state.iop = iop;
  state.poses = result.poses;
  state.points.resize(corrected.phantom.size());
  for (std::size_t i = 0; i < corrected.phantom.size(); ++i) {
    state.points[i] = result.objects[i].P;
  }
  const BundleResult at_state = evaluate_at_state(corrected, state, solver);
  ev.train_records = at_state.records;
  ev.train_image = reprojection_report(at_state.records);

  ev.object_in = object_space_report(result.objects, truth.phantom);
  std::map<FrameKey, Pose> truth_poses;
  for (const auto& sys : truth.systems) {
    for (std::size_t f = 0; f < sys.poses.size(); ++f) {
      truth_poses[{sys.system_id, static_cast<int>(f)}] = sys.poses[f];
    }
  }
  ev.pose_in = pose_report(result.frames, result.poses, truth_poses);

  const auto out = evaluate_out_of_sample(result, test, truth, init, solver);
  ev.object_out = out.object;
  ev.pose_out = out.pose;
  return ev;
}

inline void write_histogram(const fs::path& path, const std::vector<ResidualRecord>& records) {
  io::FileWriter w(path.string());
  w.line("bin_lo,bin_hi,count_x,count_y");
  for (const auto& b : normalized_residual_histogram(records)) {
    w.line(io::fmt_full(b.lo) + "," + io::fmt_full(b.hi) + "," + std::to_string(b.count_x) +
           "," + std::to_string(b.count_y));
  }
}

inline void write_scatter(const fs::path& path, const ObservationSet& set,
                          const std::vector<ResidualRecord>& records) {
  io::FileWriter w(path.string());
  w.line("x_px,y_px,rx_px,ry_px,system_id");
  for (const auto& r : records) {
    const auto& o = set.observations[r.obs_index];
    w.line(io::fmt_full(o.x) + "," + io::fmt_full(o.y) + "," + io::fmt_full(r.residual.x()) +
           "," + io::fmt_full(r.residual.y()) + "," + std::to_string(o.system_id));
  }
}

}  // namespace detail

inline int cmd_evaluate(const EvaluateOptions& opt) {
  const auto phantom = load_phantom(opt.phantom);
  const auto truth = load_truth(opt.truth, phantom);
  const auto train_all = load_observations(opt.obs_train, phantom);
  const auto test_all = load_observations(opt.obs_test, phantom);
  const auto init = load_init_pose_map(opt.init_poses);

  const auto first = load_calibration_bundle(opt.bundle);

  // restrict the data to the systems covered by the bundle under evaluation
  ObservationSet train, test;
  train.phantom = phantom;
  test.phantom = phantom;
  for (const auto& o : train_all.observations) {
    if (first.iop.count(o.system_id)) train.observations.push_back(o);
  }
  for (const auto& o : test_all.observations) {
    if (first.iop.count(o.system_id)) test.observations.push_back(o);
  }
  finalize_observation_set(train);
  finalize_observation_set(test);

  CalibConfig base_cfg;
  base_cfg.solver = opt.solver;
  base_cfg.c_nominal = opt.c_nominal;

  std::vector<VariantEvaluation> variants;
  const auto before = baseline_adjust(train, init, base_cfg);
  variants.push_back(detail::evaluate_result("before", before, train, test, truth, init,
                                             opt.solver));

  auto label_for = [](IopMode m) {
    return m == IopMode::parametric ? std::string("after_w_iop") : std::string("after");
  };
  variants.push_back(detail::evaluate_result(label_for(first.mode), first.as_result(), train,
                                             test, truth, init, opt.solver));
  if (!opt.compare.empty()) {
    const auto second = load_calibration_bundle(opt.compare);
    std::string label = label_for(second.mode);
    if (label == variants.back().label) label += "_2";
    variants.push_back(detail::evaluate_result(label, second.as_result(), train, test, truth,
                                               init, opt.solver));
  }

  const fs::path dir(opt.out);
  fs::create_directories(dir);

  // reprojection table (training frames)
  {
    io::FileWriter w((dir / "report_reprojection.csv").string());
    w.line("variant,cost,rmse_x_px,rmse_y_px,imp_cost_pct,imp_x_pct,imp_y_pct");
    const auto& b = variants.front().train_image;
    for (const auto& v : variants) {
      std::string line = v.label + "," + io::fmt_full(v.train_image.cost) + "," +
                         io::fmt_full(v.train_image.rmse_x) + "," +
                         io::fmt_full(v.train_image.rmse_y);
      if (&v == &variants.front()) {
        line += ",,,";
      } else {
        line += "," + io::fmt_full(improvement_percent(b.cost, v.train_image.cost)) + "," +
                io::fmt_full(improvement_percent(b.rmse_x, v.train_image.rmse_x)) + "," +
                io::fmt_full(improvement_percent(b.rmse_y, v.train_image.rmse_y));
      }
      w.line(line);
    }
  }

  // object / pose tables, in- and out-of-sample
  auto write_axis_table = [&](const std::string& name, auto getter) {
    io::FileWriter w((dir / name).string());
    std::string header = "axis";
    for (const auto& v : variants) header += "," + v.label + "_mm";
    for (std::size_t i = 1; i < variants.size(); ++i) {
      header += ",imp_" + variants[i].label + "_pct";
    }
    w.line(header);
    const char* axes[6] = {"X", "Y", "Z", "X_o", "Y_o", "Z_o"};
    for (int a = 0; a < 6; ++a) {
      std::string line = axes[a];
      std::vector<double> vals;
      for (const auto& v : variants) {
        vals.push_back(getter(v, a));
        line += "," + io::fmt_full(vals.back());
      }
      for (std::size_t i = 1; i < variants.size(); ++i) {
        line += "," + io::fmt_full(improvement_percent(vals[0], vals[i]));
      }
      w.line(line);
    }
  };
  auto in_sample_axis = [](const VariantEvaluation& v, int a) {
    return a < 3 ? v.object_in.rmse[a] : v.pose_in.rmse_t[a - 3];
  };
  auto out_sample_axis = [](const VariantEvaluation& v, int a) {
    return a < 3 ? v.object_out.rmse[a] : v.pose_out.rmse_t[a - 3];
  };
  write_axis_table("report_in_sample.csv", in_sample_axis);
  write_axis_table("report_out_of_sample.csv", out_sample_axis);

  // figure data: histograms and residual scatters per variant
  for (const auto& v : variants) {
    detail::write_histogram(dir / ("hist_" + v.label + ".csv"), v.train_records);
    detail::write_scatter(dir / ("scatter_" + v.label + ".csv"), train, v.train_records);
  }

  // human-readable tables
  {
    std::string text;
    {
      std::vector<std::vector<std::string>> rows;
      const auto& b = variants.front().train_image;
      for (const auto& v : variants) {
        std::vector<std::string> row = {v.label, io::fmt_sci(v.train_image.cost, 2),
                                        io::fmt_fixed(v.train_image.rmse_x),
                                        io::fmt_fixed(v.train_image.rmse_y)};
        if (&v == &variants.front()) {
          row.insert(row.end(), {"N/A", "N/A", "N/A"});
        } else {
          row.push_back(io::fmt_fixed(improvement_percent(b.cost, v.train_image.cost)));
          row.push_back(io::fmt_fixed(improvement_percent(b.rmse_x, v.train_image.rmse_x)));
          row.push_back(io::fmt_fixed(improvement_percent(b.rmse_y, v.train_image.rmse_y)));
        }
        rows.push_back(row);
      }
      text += render_table("Reprojection errors (training frames)",
                           {"", "Cost", "RMSE x [px]", "RMSE y [px]", "Impr cost [%]",
                            "Impr x [%]", "Impr y [%]"},
                           rows);
    }
    for (const auto& [title, getter] :
         std::vector<std::pair<std::string, std::function<double(const VariantEvaluation&, int)>>>{
             {"In-sample errors [mm]", in_sample_axis},
             {"Out-of-sample errors [mm]", out_sample_axis}}) {
      std::vector<std::string> header = {"Axis"};
      for (const auto& v : variants) header.push_back(v.label);
      for (std::size_t i = 1; i < variants.size(); ++i) header.push_back("Impr " + variants[i].label + " [%]");
      std::vector<std::vector<std::string>> rows;
      const char* axes[6] = {"X", "Y", "Z", "X_o", "Y_o", "Z_o"};
      for (int a = 0; a < 6; ++a) {
        std::vector<std::string> row = {axes[a]};
        std::vector<double> vals;
        for (const auto& v : variants) {
          vals.push_back(getter(v, a));
          row.push_back(io::fmt_fixed(vals.back()));
        }
        for (std::size_t i = 1; i < variants.size(); ++i) {
          row.push_back(io::fmt_fixed(improvement_percent(vals[0], vals[i])));
        }
        rows.push_back(row);
      }
      text += "\n" + render_table(title, header, rows);
    }
    io::FileWriter w((dir / "tables.txt").string());
    w.line(text);
  }

  std::cout << "evaluation written to " << opt.out << "\n";
  return 0;
}

// ---------------------------------- report ----------------------------------

struct ReportOptions {
  std::string in;
};

inline int cmd_report(const ReportOptions& opt) {
  const fs::path dir(opt.in);
  bool any = false;
  for (const auto& name :
       {"report_reprojection.csv", "report_in_sample.csv", "report_out_of_sample.csv"}) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) continue;
    any = true;
    const auto lines = io::read_lines(p.string());
    if (lines.empty()) continue;
    std::vector<std::string> header = io::split(lines[0], ',');
    std::vector<std::vector<std::string>> rows;
    for (std::size_t i = 1; i < lines.size(); ++i) {
      if (lines[i].empty()) continue;
      auto row = io::split(lines[i], ',');
      for (auto& cell : row) {
        // render numeric cells at table precision
        try {
          const double v = io::parse_double(cell, "cell");
          cell = std::abs(v) >= 1e4 ? io::fmt_sci(v, 2) : io::fmt_fixed(v);
        } catch (const ParseError&) {
          // labels pass through
        }
      }
      rows.push_back(row);
    }
    std::cout << render_table(name, header, rows) << "\n";
  }
  if (!any) throw ConfigError("no report CSVs found in " + opt.in);
  return 0;
}

// ----------------------------------- main -----------------------------------

inline void add_solver_flags(CLI::App* cmd, SolverConfig& solver) {
  cmd->add_option("--nu", solver.nu, "Student-t degrees of freedom");
  cmd->add_option("--inlier-tau", solver.inlier_tau, "inlier gate on |normalized residual|");
  cmd->add_option("--max-iterations", solver.max_iterations, "LM iteration cap");
}

inline int run(std::vector<std::string> args) {
  CLI::App app{"self-calibrating bundle adjustment with kNN distortion learning"};
  app.require_subcommand(1);

  // simulate
  SimulateOptions sim_opt;
  auto* sim = app.add_subcommand("simulate", "generate a synthetic calibration scenario");
  sim->set_config("--config");
  sim->add_option("--out", sim_opt.out, "output directory")->required();
  sim->add_option("--seed", sim_opt.scenario.seed, "RNG seed")->required();
  sim->add_option("--systems", sim_opt.scenario.n_systems, "number of systems (1 or 2)");
  sim->add_option("--frames", sim_opt.scenario.frames_total, "frames per system");
  sim->add_option("--frames-train", sim_opt.scenario.frames_train, "training frames per system");
  sim->add_option("--targets", sim_opt.scenario.n_targets, "phantom target count");
  sim->add_option("--side-mm", sim_opt.scenario.side_mm, "phantom cube side [mm]");
  sim->add_option("--image-size", sim_opt.scenario.image_size_px, "frame size [px]");
  sim->add_option("--c-nominal", sim_opt.scenario.c_nominal_px, "nominal principal distance [px]");
  sim->add_option("--noise-sigma", sim_opt.scenario.noise_sigma_px, "measurement noise [px]");
  sim->add_option("--field-scale", sim_opt.scenario.field_scale, "distortion field scale");
  sim->add_option("--iop-error", sim_opt.scenario.iop_error_scale, "true-iop offset scale");
  sim->add_option("--outlier-fraction", sim_opt.scenario.outlier_fraction,
                  "fraction of gross errors in training data");
  sim->add_option("--outlier-sigmas", sim_opt.scenario.outlier_sigmas, "gross error size [sigma]");

  // calibrate
  CalibrateOptions cal_opt;
  auto* cal = app.add_subcommand("calibrate", "run the self-calibration loop");
  cal->set_config("--config");
  cal->add_option("--obs", cal_opt.obs, "observation CSV")->required();
  cal->add_option("--phantom", cal_opt.phantom, "phantom CSV")->required();
  cal->add_option("--init-poses", cal_opt.init_poses, "approximate pose CSV")->required();
  cal->add_option("--out", cal_opt.out, "output directory")->required();
  cal->add_option("--mode", cal_opt.mode, "iop_parametric | iop_learned");
  cal->add_flag("--joint", cal_opt.joint, "calibrate two systems jointly");
  cal->add_option("--system", cal_opt.system, "system id to calibrate");
  cal->add_option("--c-nominal", cal_opt.calib.c_nominal, "nominal principal distance [px]");
  cal->add_option("--max-outer", cal_opt.calib.max_outer, "outer iteration cap");
  cal->add_option("--eps-conv", cal_opt.calib.eps_conv, "outer convergence tolerance");
  cal->add_option("--k-grid", cal_opt.calib.cv.k_grid, "candidate k values")->delimiter(',');
  cal->add_option("--cv-folds", cal_opt.calib.cv.folds, "cross-validation folds");
  cal->add_option("--cv-seed", cal_opt.calib.cv.shuffle_seed, "cross-validation shuffle seed");
  add_solver_flags(cal, cal_opt.calib.solver);

  // resect
  ResectOptions res_opt;
  auto* res = app.add_subcommand("resect", "resect frame poses against a calibration");
  res->set_config("--config");
  res->add_option("--obs", res_opt.obs, "observation CSV")->required();
  res->add_option("--bundle", res_opt.bundle, "calibration bundle directory")->required();
  res->add_option("--init-poses", res_opt.init_poses, "approximate pose CSV")->required();
  res->add_option("--out", res_opt.out, "output directory")->required();
  add_solver_flags(res, res_opt.solver);

  // apply
  ApplyOptions app_opt;
  auto* apl = app.add_subcommand("apply", "apply a distortion model to points or a grid");
  apl->set_config("--config");
  apl->add_option("--model", app_opt.model, "distortion model CSV")->required();
  apl->add_option("--obs", app_opt.obs, "observation CSV to correct");
  apl->add_option("--phantom", app_opt.phantom, "phantom CSV (with --obs)");
  apl->add_option("--grid-step", app_opt.grid_step, "emit a dense grid with this step [px]");
  apl->add_option("--grid-half", app_opt.grid_half, "grid half-extent [px]");
  apl->add_option("--out-file", app_opt.out_file, "output CSV")->required();

  // evaluate
  EvaluateOptions ev_opt;
  auto* ev = app.add_subcommand("evaluate", "score calibrations against the truth record");
  ev->set_config("--config");
  ev->add_option("--bundle", ev_opt.bundle, "calibration bundle directory")->required();
  ev->add_option("--compare", ev_opt.compare, "second bundle for a three-row table");
  ev->add_option("--obs-train", ev_opt.obs_train, "training observation CSV")->required();
  ev->add_option("--obs-test", ev_opt.obs_test, "test observation CSV")->required();
  ev->add_option("--phantom", ev_opt.phantom, "phantom CSV")->required();
  ev->add_option("--init-poses", ev_opt.init_poses, "approximate pose CSV")->required();
  ev->add_option("--truth", ev_opt.truth, "truth record")->required();
  ev->add_option("--out", ev_opt.out, "output directory")->required();
  ev->add_option("--c-nominal", ev_opt.c_nominal, "nominal principal distance [px]");
  add_solver_flags(ev, ev_opt.solver);

  // report
  ReportOptions rep_opt;
  auto* rep = app.add_subcommand("report", "render evaluation CSVs as text tables");
  rep->add_option("--in", rep_opt.in, "evaluation output directory")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (sim->parsed()) return cmd_simulate(sim_opt);
    if (cal->parsed()) return cmd_calibrate(cal_opt);
    if (res->parsed()) return cmd_resect(res_opt);
    if (apl->parsed()) return cmd_apply(app_opt);
    if (ev->parsed()) return cmd_evaluate(ev_opt);
    if (rep->parsed()) return cmd_report(rep_opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const SingularNormalMatrix& e) {
    std::cerr << "singular normal matrix: " << e.what() << "\n";
    return 4;
  } catch (const DivergenceError& e) {
    std::cerr << "solver divergence: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

inline int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv + 1, argv + argc));
}

}  // namespace cli
}  // namespace xcal
