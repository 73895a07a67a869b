#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "xcal/csv.hpp"
#include "xcal/errors.hpp"
#include "xcal/geometry.hpp"
#include "xcal/observations.hpp"
#include "xcal/rng.hpp"

namespace xcal {

// ---------------------------------------------------------------------------
// Synthetic truth field: an image-intensifier style pincushion/barrel radial
// term plus a low-frequency sinusoid (S-distortion). Smooth but not exactly
// representable by low-order polynomials or by the kNN averages, so learned
// corrections can approach it without hitting it exactly.
// ---------------------------------------------------------------------------

struct SyntheticField {
  double center_x = 0.0, center_y = 0.0;  // px, centered image coordinates
  double radial_x = 0.0, radial_y = 0.0;  // px at unit normalized radius
  double sin_x = 0.0, sin_y = 0.0;        // px
  double wave_x = 600.0, wave_y = 700.0;  // px, sinusoid wavelengths
  double norm_radius = 512.0;             // px

  Vector2d eval(const Vector2d& p) const {
    const double xn = (p.x() - center_x) / norm_radius;
    const double yn = (p.y() - center_y) / norm_radius;
    const double r2 = xn * xn + yn * yn;
    const double dx = radial_x * r2 * xn + sin_x * std::sin(2.0 * M_PI * (p.y() - center_y) / wave_x);
    const double dy = radial_y * r2 * yn + sin_y * std::sin(2.0 * M_PI * (p.x() - center_x) / wave_y);
    return {dx, dy};
  }

  SyntheticField scaled(double s) const {
    SyntheticField f = *this;
    f.radial_x *= s;
    f.radial_y *= s;
    f.sin_x *= s;
    f.sin_y *= s;
    return f;
  }

  std::vector<double> coefficients() const {
    return {center_x, center_y, radial_x, radial_y, sin_x, sin_y, wave_x, wave_y, norm_radius};
  }

  static SyntheticField from_coefficients(const std::vector<double>& c) {
    if (c.size() != 9) throw ParseError("field spec needs 9 coefficients");
    SyntheticField f;
    f.center_x = c[0];
    f.center_y = c[1];
    f.radial_x = c[2];
    f.radial_y = c[3];
    f.sin_x = c[4];
    f.sin_y = c[5];
    f.wave_x = c[6];
    f.wave_y = c[7];
    f.norm_radius = c[8];
    return f;
  }
};

// ---------------------------------------------------------------------------
// Scenario description (defaults mirror the experiment scale: 150 frames per
// system of which 15 train, a 500-target cube of side 200 mm, 0.3 px noise).
// ---------------------------------------------------------------------------

struct SyntheticScenario {
  std::uint64_t seed = 42;
  int n_systems = 1;
  double side_mm = 200.0;
  int n_targets = 500;
  int frames_total = 150;
  int frames_train = 15;
  double image_size_px = 1024.0;
  double c_nominal_px = 1500.0;
  double noise_sigma_px = 0.3;
  double field_scale = 1.0;      // 0 disables the synthetic distortion field
  double iop_error_scale = 1.0;  // 0 puts the true IOP at the nominal values
  double outlier_fraction = 0.0;
  double outlier_sigmas = 10.0;
};

struct SystemTruth {
  int system_id = 0;
  InteriorOrientation iop;
  SyntheticField field;
  std::vector<Pose> poses;  // frame f at index f
};

struct TruthRecord {
  SyntheticScenario scenario;
  std::vector<ObjectPoint> phantom;
  std::vector<SystemTruth> systems;

  const SystemTruth& system(int system_id) const {
    for (const auto& s : systems)
      if (s.system_id == system_id) return s;
    throw IdMismatch("no truth for system " + std::to_string(system_id));
  }
};

struct GrossErrorLabel {
  int system_id = 0;
  int frame_id = 0;
  int target_id = 0;
};

struct SimulatedData {
  ObservationSet train;
  ObservationSet test;
  TruthRecord truth;
  std::vector<FrameKey> frame_keys;  // all frames, both splits
  std::vector<Pose> init_poses;      // perturbed approximations, aligned with frame_keys
  std::vector<GrossErrorLabel> gross_errors;
  int dropped_degenerate = 0;
};

// ------------------------------ phantom ------------------------------------

namespace detail {

/// Rejection-sampled target placement; min_dist_override < 0 uses the
/// side/(2 n^(1/3)) spacing rule. The override exists to exercise the
/// infeasible-spacing path in tests.
inline std::vector<ObjectPoint> generate_phantom_impl(double side_mm, int n_targets,
                                                      std::uint64_t seed,
                                                      double min_dist_override) {
  if (n_targets < 8) throw ValidationError("phantom needs at least 8 targets");
  if (side_mm <= 0.0) throw ValidationError("phantom side must be positive");
  const double h = side_mm / 2.0;
  const double d_min = min_dist_override >= 0.0
                           ? min_dist_override
                           : side_mm / (2.0 * std::cbrt(static_cast<double>(n_targets)));

  std::vector<ObjectPoint> pts;
  // Cube corners first; they form the fixed control (datum) subset.
  for (int i = 0; i < 8; ++i) {
    ObjectPoint p;
    p.id = static_cast<int>(pts.size()) + 1;
    p.P = {(i & 1) ? h : -h, (i & 2) ? h : -h, (i & 4) ? h : -h};
    p.role = PointRole::control;
    pts.push_back(p);
  }

  Rng rng(seed, /*stream=*/1);
  int consecutive_rejects = 0;
  while (static_cast<int>(pts.size()) < n_targets) {
    Vector3d cand;
    if (rng.uniform() < 0.75) {
      // On a face, jittered inward.
      const int face = static_cast<int>(rng.bounded(6));
      const double a = rng.uniform(-h, h);
      const double b = rng.uniform(-h, h);
      const double inward = rng.uniform(0.0, 0.15 * side_mm);
      const int axis = face / 2;
      const double sign = (face % 2) ? 1.0 : -1.0;
      cand[axis] = sign * (h - inward);
      cand[(axis + 1) % 3] = a;
      cand[(axis + 2) % 3] = b;
    } else {
      cand = {rng.uniform(-h, h), rng.uniform(-h, h), rng.uniform(-h, h)};
    }
    bool ok = true;
    for (const auto& p : pts) {
      if ((p.P - cand).norm() < d_min) {
        ok = false;
        break;
      }
    }
    if (!ok) {
      if (++consecutive_rejects >= 1000) {
        throw InfeasibleSpacing("could not place target " + std::to_string(pts.size() + 1) +
                                " with spacing " + io::fmt_full(d_min) + " mm in 1000 rounds");
      }
      continue;
    }
    consecutive_rejects = 0;
    ObjectPoint p;
    p.id = static_cast<int>(pts.size()) + 1;
    p.P = cand;
    p.role = PointRole::tie;
    pts.push_back(p);
  }
  return pts;
}

}  // namespace detail

inline std::vector<ObjectPoint> generate_phantom(double side_mm, int n_targets,
                                                 std::uint64_t seed) {
  return detail::generate_phantom_impl(side_mm, n_targets, seed, -1.0);
}

inline std::vector<ObjectPoint> generate_phantom(double side_mm, int n_targets, std::uint64_t seed,
                                                 double min_dist_mm) {
  return detail::generate_phantom_impl(side_mm, n_targets, seed, min_dist_mm);
}

// ------------------------------ system truth -------------------------------

namespace detail {

inline SystemTruth make_system_truth(const SyntheticScenario& sc, int system_index) {
  SystemTruth sys;
  sys.system_id = system_index + 1;

  // Per-system interior-orientation offsets and distortion presets. The
  // amplitudes are calibrated so the default scenario's pre-calibration
  // reprojection RMSE lands near 1.15 px.
  const double e = sc.iop_error_scale;
  if (system_index == 0) {
    sys.iop = {4.0 * e, -3.0 * e, sc.c_nominal_px * (1.0 + 0.02 * e)};
    sys.field = {15.0, -10.0, 1.35, 1.30, 0.52, 0.48, 620.0, 730.0, sc.image_size_px / 2.0};
  } else {
    sys.iop = {-5.0 * e, 3.5 * e, sc.c_nominal_px * (1.0 - 0.022 * e)};
    sys.field = {-20.0, 12.0, -1.25, -1.40, 0.55, 0.42, 710.0, 590.0, sc.image_size_px / 2.0};
  }
  sys.field = sys.field.scaled(sc.field_scale);

  // Orbit poses: varied azimuth/elevation/distance/roll so the interior
  // orientation is observable, at a distance where the phantom spans about
  // 70% of the frame.
  const double span_mm = sc.side_mm * std::sqrt(2.0) / 2.0;
  const double d0 = sc.c_nominal_px * span_mm / (0.35 * sc.image_size_px);
  Rng rng(sc.seed, 10 + static_cast<std::uint64_t>(system_index));
  const double az_offset = system_index * (M_PI / 3.0);
  sys.poses.reserve(sc.frames_total);
  for (int f = 0; f < sc.frames_total; ++f) {
    const double frac = static_cast<double>(f) / std::max(1, sc.frames_total);
    const double az = 2.0 * M_PI * std::fmod(3.0 * frac, 1.0) + az_offset + rng.uniform(-0.10, 0.10);
    const double tri = 1.0 - std::abs(2.0 * frac - 1.0);
    const double el = (-30.0 + 65.0 * tri) * M_PI / 180.0 + rng.uniform(-0.07, 0.07);
    const double dist = d0 * (1.0 + rng.uniform(-0.15, 0.15));
    const Vector3d look_at(rng.uniform(-12.0, 12.0), rng.uniform(-12.0, 12.0),
                           rng.uniform(-12.0, 12.0));
    const Vector3d dir(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    const double roll = rng.uniform(-15.0, 15.0) * M_PI / 180.0;

    Pose pose;
    pose.T = look_at + dist * dir;
    const Vector3d z_cam = (look_at - pose.T).normalized();
    Vector3d up(0, 0, 1);
    if (std::abs(z_cam.dot(up)) > 0.99) up = Vector3d(1, 0, 0);
    Vector3d x_cam = up.cross(z_cam).normalized();
    Vector3d y_cam = z_cam.cross(x_cam);
    // roll about the viewing axis
    const Vector3d xr = std::cos(roll) * x_cam + std::sin(roll) * y_cam;
    const Vector3d yr = -std::sin(roll) * x_cam + std::cos(roll) * y_cam;
    Matrix3d world_to_cam;
    world_to_cam.row(0) = xr.transpose();
    world_to_cam.row(1) = yr.transpose();
    world_to_cam.row(2) = z_cam.transpose();
    pose.q = Quaternion::from_rotation_matrix(world_to_cam).canonical();
    sys.poses.push_back(pose);
  }
  return sys;
}

}  // namespace detail

// ------------------------------- simulation --------------------------------

/// Uniformly sampled training frame indices: floor(j * total / train).
inline std::vector<int> train_frame_indices(int frames_total, int frames_train) {
  std::vector<int> idx;
  for (int j = 0; j < frames_train; ++j) {
    idx.push_back(static_cast<int>(static_cast<long>(j) * frames_total / frames_train));
  }
  return idx;
}

inline SimulatedData simulate_captures(const SyntheticScenario& sc) {
  if (sc.frames_train > sc.frames_total) {
    throw ValidationError("frames_train exceeds frames_total");
  }
  if (sc.frames_train < 1) throw ValidationError("frames_train must be >= 1");
  if (sc.n_systems < 1 || sc.n_systems > 2) throw ValidationError("n_systems must be 1 or 2");
  if (sc.noise_sigma_px < 0) throw ValidationError("noise_sigma_px must be >= 0");

  SimulatedData out;
  out.truth.scenario = sc;
  out.truth.phantom = generate_phantom(sc.side_mm, sc.n_targets, sc.seed);

  const double sigma_apriori = sc.noise_sigma_px > 0.0 ? sc.noise_sigma_px : 1.0;
  const double half = sc.image_size_px / 2.0;
  const auto train_idx = train_frame_indices(sc.frames_total, sc.frames_train);

  for (int si = 0; si < sc.n_systems; ++si) {
    out.truth.systems.push_back(detail::make_system_truth(sc, si));
    const SystemTruth& sys = out.truth.systems.back();
    Rng noise(sc.seed, 20 + static_cast<std::uint64_t>(si));

    for (int f = 0; f < sc.frames_total; ++f) {
      const bool in_train =
          std::binary_search(train_idx.begin(), train_idx.end(), f);
      ObservationSet& split = in_train ? out.train : out.test;
      for (const auto& pt : out.truth.phantom) {
        // Noise is drawn for every (frame, target) pair so the stream does
        // not shift when visibility changes.
        const double n1 = noise.normal();
        const double n2 = noise.normal();
        Vector2d ideal;
        try {
          const Vector3d u = sys.poses[f].q.rotate(pt.P - sys.poses[f].T);
          if (u.z() / sys.poses[f].q.squared_norm() <= kDepthEpsilon) {
            ++out.dropped_degenerate;
            continue;
          }
          ideal = project(sys.iop, Vector2d::Zero(), sys.poses[f], pt.P);
        } catch (const DepthDegenerate&) {
          ++out.dropped_degenerate;
          continue;
        }
        const Vector2d observed =
            ideal + sys.field.eval(ideal) + sc.noise_sigma_px * Vector2d(n1, n2);
        if (std::abs(observed.x()) > half || std::abs(observed.y()) > half) continue;
        ImageObservation o;
        o.system_id = sys.system_id;
        o.frame_id = f;
        o.target_id = pt.id;
        o.x = observed.x();
        o.y = observed.y();
        o.sigma = sigma_apriori;
        split.observations.push_back(o);
      }
    }
  }

  out.train.phantom = out.truth.phantom;
  out.test.phantom = out.truth.phantom;
  finalize_observation_set(out.train);
  finalize_observation_set(out.test);

  // Approximate initial poses: truth plus a bounded perturbation, standing in
  // for the coarse pose knowledge a practitioner supplies.
  Rng perturb(sc.seed, 30);
  for (int si = 0; si < sc.n_systems; ++si) {
    const SystemTruth& sys = out.truth.systems[si];
    for (int f = 0; f < sc.frames_total; ++f) {
      Pose p = sys.poses[f];
      p.T += Vector3d(perturb.uniform(-5.0, 5.0), perturb.uniform(-5.0, 5.0),
                      perturb.uniform(-5.0, 5.0));
      Vector3d axis(perturb.normal(), perturb.normal(), perturb.normal());
      if (axis.norm() < 1e-12) axis = Vector3d::UnitZ();
      const double angle = perturb.uniform(-2.0, 2.0) * M_PI / 180.0;
      p.q = (Quaternion::from_axis_angle(axis, angle) * p.q).normalized().canonical();
      out.frame_keys.push_back({sys.system_id, f});
      out.init_poses.push_back(p);
    }
  }

  if (sc.outlier_fraction > 0.0) {
    Rng gross(sc.seed, 40);
    const std::size_t n = out.train.observations.size();
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    gross.shuffle(order);
    const auto n_inject =
        static_cast<std::size_t>(std::llround(sc.outlier_fraction * static_cast<double>(n)));
    std::vector<int> chosen(order.begin(), order.begin() + std::min(n_inject, n));
    std::sort(chosen.begin(), chosen.end());
    for (int idx : chosen) {
      ImageObservation& o = out.train.observations[idx];
      const double mag = sc.outlier_sigmas * o.sigma;
      o.x += (gross.uniform() < 0.5 ? -mag : mag);
      o.y += (gross.uniform() < 0.5 ? -mag : mag);
      out.gross_errors.push_back({o.system_id, o.frame_id, o.target_id});
    }
  }

  return out;
}

// ------------------------------ truth record -------------------------------

inline void save_truth(const std::string& path, const TruthRecord& t) {
  io::KeyValueFile kv;
  kv.set("format", "xcal-truth-v1");
  const SyntheticScenario& sc = t.scenario;
  kv.set("seed", std::to_string(sc.seed));
  kv.set("n_systems", std::to_string(sc.n_systems));
  kv.set_doubles("side_mm", {sc.side_mm});
  kv.set("n_targets", std::to_string(sc.n_targets));
  kv.set("frames_total", std::to_string(sc.frames_total));
  kv.set("frames_train", std::to_string(sc.frames_train));
  kv.set_doubles("image_size_px", {sc.image_size_px});
  kv.set_doubles("c_nominal_px", {sc.c_nominal_px});
  kv.set_doubles("noise_sigma_px", {sc.noise_sigma_px});
  kv.set_doubles("field_scale", {sc.field_scale});
  kv.set_doubles("iop_error_scale", {sc.iop_error_scale});
  kv.set_doubles("outlier_fraction", {sc.outlier_fraction});
  kv.set_doubles("outlier_sigmas", {sc.outlier_sigmas});
  for (const auto& sys : t.systems) {
    const std::string p = "system." + std::to_string(sys.system_id);
    kv.set_doubles(p + ".iop", {sys.iop.x_p, sys.iop.y_p, sys.iop.c});
    kv.set_doubles(p + ".field", sys.field.coefficients());
    for (std::size_t f = 0; f < sys.poses.size(); ++f) {
      const Pose& pose = sys.poses[f];
      const Quaternion q = pose.q.canonical();
      kv.set_doubles(p + ".frame." + std::to_string(f) + ".pose",
                     {pose.T.x(), pose.T.y(), pose.T.z(), q.w, q.x, q.y, q.z});
    }
  }
  kv.save(path);
}

inline TruthRecord load_truth(const std::string& path, const std::vector<ObjectPoint>& phantom) {
  const auto kv = io::KeyValueFile::load(path);
  if (!kv.has("format") || kv.get("format") != "xcal-truth-v1") {
    throw ParseError(path + ": unknown truth format");
  }
  TruthRecord t;
  t.phantom = phantom;
  SyntheticScenario& sc = t.scenario;
  sc.seed = static_cast<std::uint64_t>(io::parse_int(kv.get("seed"), "seed"));
  sc.n_systems = static_cast<int>(io::parse_int(kv.get("n_systems"), "n_systems"));
  sc.side_mm = kv.get_double("side_mm");
  sc.n_targets = static_cast<int>(io::parse_int(kv.get("n_targets"), "n_targets"));
  sc.frames_total = static_cast<int>(io::parse_int(kv.get("frames_total"), "frames_total"));
  sc.frames_train = static_cast<int>(io::parse_int(kv.get("frames_train"), "frames_train"));
  sc.image_size_px = kv.get_double("image_size_px");
  sc.c_nominal_px = kv.get_double("c_nominal_px");
  sc.noise_sigma_px = kv.get_double("noise_sigma_px");
  sc.field_scale = kv.get_double("field_scale");
  sc.iop_error_scale = kv.get_double("iop_error_scale");
  sc.outlier_fraction = kv.get_double("outlier_fraction");
  sc.outlier_sigmas = kv.get_double("outlier_sigmas");
  for (int si = 0; si < sc.n_systems; ++si) {
    SystemTruth sys;
    sys.system_id = si + 1;
    const std::string p = "system." + std::to_string(sys.system_id);
    const auto iop = kv.get_doubles(p + ".iop");
    if (iop.size() != 3) throw ParseError(path + ": bad iop entry");
    sys.iop = {iop[0], iop[1], iop[2]};
    sys.field = SyntheticField::from_coefficients(kv.get_doubles(p + ".field"));
    for (int f = 0; f < sc.frames_total; ++f) {
      const auto v = kv.get_doubles(p + ".frame." + std::to_string(f) + ".pose");
      if (v.size() != 7) throw ParseError(path + ": bad pose entry");
      Pose pose;
      pose.T = {v[0], v[1], v[2]};
      pose.q = Quaternion(v[3], v[4], v[5], v[6]).normalized();
      sys.poses.push_back(pose);
    }
    t.systems.push_back(std::move(sys));
  }
  return t;
}

inline void save_gross_errors(const std::string& path, const std::vector<GrossErrorLabel>& labels) {
  io::FileWriter w(path);
  w.line("system_id,frame_id,target_id");
  for (const auto& l : labels) {
    w.line(std::to_string(l.system_id) + "," + std::to_string(l.frame_id) + "," +
           std::to_string(l.target_id));
  }
}

inline std::vector<GrossErrorLabel> load_gross_errors(const std::string& path) {
  const auto lines = io::read_lines(path);
  if (lines.empty() || lines[0] != "system_id,frame_id,target_id") {
    throw ParseError(path + ": expected header 'system_id,frame_id,target_id'");
  }
  std::vector<GrossErrorLabel> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string ctx = path + ":" + std::to_string(i + 1);
    const auto f = io::split(lines[i], ',');
    if (f.size() != 3) throw ParseError(ctx + ": expected 3 fields");
    out.push_back({static_cast<int>(io::parse_int(f[0], ctx)),
                   static_cast<int>(io::parse_int(f[1], ctx)),
                   static_cast<int>(io::parse_int(f[2], ctx))});
  }
  return out;
}

}  // namespace xcal
