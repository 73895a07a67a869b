#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xcal/bundle.hpp"
#include "xcal/calibration.hpp"
#include "xcal/cov2.hpp"
#include "xcal/observations.hpp"
#include "xcal/synthetic.hpp"

namespace xcal {

// Quality-control metrics: reprojection, object-space and sensor-position
// RMSE, with improvement percentages against a baseline. All report
// functions are pure; identical inputs give identical reports.

struct ImageErrorStats {
  double cost = 0.0;    // sum of r' C_r^{-1} r over observations (blockwise)
  double rmse_x = 0.0;  // px
  double rmse_y = 0.0;  // px
  std::size_t count = 0;
};

struct ObjectErrorStats {
  Vector3d rmse = Vector3d::Zero();  // mm, per axis
  std::size_t count = 0;
};

struct PoseErrorStats {
  Vector3d rmse_t = Vector3d::Zero();  // mm, per axis
  double rmse_angle_deg = 0.0;         // auxiliary, not a paper metric
  std::size_t count = 0;
};

/// improvement % = 100 (before - after) / before; negative when things got
/// worse, which the reports must allow.
inline double improvement_percent(double before, double after) {
  return 100.0 * (before - after) / before;
}

inline ImageErrorStats reprojection_report(const std::vector<ResidualRecord>& records) {
  if (records.empty()) throw ValidationError("reprojection report of zero records");
  ImageErrorStats out;
  double sx = 0.0, sy = 0.0;
  for (const auto& r : records) {
    sx += r.residual.x() * r.residual.x();
    sy += r.residual.y() * r.residual.y();
    out.cost += r.residual.dot(invert_cov2(clamp_cov2(r.r_cov)) * r.residual);
  }
  out.count = records.size();
  out.rmse_x = std::sqrt(sx / static_cast<double>(records.size()));
  out.rmse_y = std::sqrt(sy / static_cast<double>(records.size()));
  return out;
}

/// Per-axis RMSE of estimated tie points against the truth (shared datum, no
/// similarity alignment; control points are fixed and excluded).
inline ObjectErrorStats object_space_report(const std::vector<ObjectPoint>& estimated,
                                            const std::vector<ObjectPoint>& truth) {
  std::map<int, Vector3d> truth_by_id;
  for (const auto& t : truth) truth_by_id[t.id] = t.P;
  ObjectErrorStats out;
  Vector3d acc = Vector3d::Zero();
  for (const auto& e : estimated) {
    if (e.role != PointRole::tie) continue;
    auto it = truth_by_id.find(e.id);
    if (it == truth_by_id.end()) {
      throw IdMismatch("object report: target " + std::to_string(e.id) + " missing from truth");
    }
    const Vector3d d = e.P - it->second;
    acc += d.cwiseProduct(d);
    ++out.count;
  }
  if (out.count == 0) throw ValidationError("object report: no tie points");
  out.rmse = (acc / static_cast<double>(out.count)).cwiseSqrt();
  return out;
}

inline PoseErrorStats pose_report(const std::vector<FrameKey>& frames,
                                  const std::vector<Pose>& estimated,
                                  const std::map<FrameKey, Pose>& truth) {
  if (frames.size() != estimated.size()) throw ValidationError("pose report size mismatch");
  if (frames.empty()) throw ValidationError("pose report of zero frames");
  PoseErrorStats out;
  Vector3d acc = Vector3d::Zero();
  double acc_ang = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    auto it = truth.find(frames[i]);
    if (it == truth.end()) {
      throw IdMismatch("pose report: frame (system " + std::to_string(frames[i].system_id) +
                       ", frame " + std::to_string(frames[i].frame_id) + ") missing from truth");
    }
    const Vector3d d = estimated[i].T - it->second.T;
    acc += d.cwiseProduct(d);
    const double ang = estimated[i].q.normalized().angle_to(it->second.q.normalized());
    acc_ang += ang * ang;
    ++out.count;
  }
  out.rmse_t = (acc / static_cast<double>(out.count)).cwiseSqrt();
  out.rmse_angle_deg = std::sqrt(acc_ang / static_cast<double>(out.count)) * 180.0 / M_PI;
  return out;
}

// ------------------------- out-of-sample evaluation -------------------------

/// Frames never seen by the calibration: corrections and interior
/// orientation applied to the test measurements, each test frame resected,
/// tie points triangulated from the corrected test observations with the
/// calibration held fixed, then everything scored against truth.
struct OutOfSampleReport {
  ImageErrorStats image;   // residuals of the test-frame intersection
  ObjectErrorStats object;
  PoseErrorStats pose;
  std::vector<FrameKey> frames;
  std::vector<Pose> resected;
  std::vector<ObjectPoint> triangulated;
  std::vector<ResidualRecord> records;
};

inline OutOfSampleReport evaluate_out_of_sample(const CalibrationResult& result,
                                                const ObservationSet& test,
                                                const TruthRecord& truth,
                                                const std::map<FrameKey, Pose>& init_poses,
                                                const SolverConfig& solver_cfg) {
  std::map<int, const DistortionModel*> models;
  std::map<int, InteriorOrientation> iop;
  for (const auto& sys : result.systems) {
    models[sys.system_id] = &sys.model;
    iop[sys.system_id] = sys.iop;
  }
  for (int s : test.system_ids()) {
    if (!iop.count(s)) {
      throw IdMismatch("test data contains system " + std::to_string(s) +
                       " absent from the calibration");
    }
  }
  const ObservationSet corrected = apply_correction(models, test);

  OutOfSampleReport out;
  out.frames = corrected.frames;

  // Spatial resection of every test frame against the estimated object
  // coordinates.
  std::vector<Pose> resected(corrected.frames.size());
  std::map<FrameKey, std::vector<ImageObservation>> by_frame;
  for (const auto& o : corrected.observations) by_frame[{o.system_id, o.frame_id}].push_back(o);
  for (std::size_t f = 0; f < corrected.frames.size(); ++f) {
    const FrameKey key = corrected.frames[f];
    auto init_it = init_poses.find(key);
    if (init_it == init_poses.end()) {
      throw ValidationError("no initial pose for test frame (system " +
                            std::to_string(key.system_id) + ", frame " +
                            std::to_string(key.frame_id) + ")");
    }
    const auto res = resect_pose(iop.at(key.system_id), by_frame.at(key), result.objects,
                                 init_it->second, solver_cfg);
    resected[f] = res.pose;
  }
  out.resected = resected;

  std::map<FrameKey, Pose> truth_poses;
  for (const auto& sys : truth.systems) {
    for (std::size_t f = 0; f < sys.poses.size(); ++f) {
      truth_poses[{sys.system_id, static_cast<int>(f)}] = sys.poses[f];
    }
  }
  out.pose = pose_report(corrected.frames, resected, truth_poses);

  // Intersection of the tie points from the corrected test observations.
  BundleInit tri_init;
  tri_init.iop = iop;
  tri_init.poses = resected;
  tri_init.points.resize(corrected.phantom.size());
  for (std::size_t i = 0; i < corrected.phantom.size(); ++i) {
    tri_init.points[i] = result.objects[i].P;
  }
  const BundleResult tri = triangulate_points(corrected, tri_init, solver_cfg);
  out.triangulated = corrected.phantom;
  for (std::size_t i = 0; i < out.triangulated.size(); ++i) {
    out.triangulated[i].P = tri.points[i];
  }
  out.records = tri.records;
  out.object = object_space_report(out.triangulated, truth.phantom);
  out.image = reprojection_report(tri.records);
  return out;
}

// --------------------------- histogram / scatter ----------------------------

struct HistogramBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count_x = 0, count_y = 0;
};

/// Fixed-range histogram of normalized residuals; out-of-range values land
/// in the edge bins so counts always sum to the record count.
inline std::vector<HistogramBin> normalized_residual_histogram(
    const std::vector<ResidualRecord>& records, double range = 8.0, int bins = 64) {
  std::vector<HistogramBin> out(bins);
  const double width = 2.0 * range / bins;
  for (int b = 0; b < bins; ++b) {
    out[b].lo = -range + b * width;
    out[b].hi = -range + (b + 1) * width;
  }
  auto bin_of = [&](double v) {
    int b = static_cast<int>(std::floor((v + range) / width));
    return std::clamp(b, 0, bins - 1);
  };
  for (const auto& r : records) {
    ++out[bin_of(r.normalized.x())].count_x;
    ++out[bin_of(r.normalized.y())].count_y;
  }
  return out;
}

// ------------------------------ table rendering -----------------------------

/// Plain-text table with aligned columns, values already formatted.
inline std::string render_table(const std::string& title,
                                const std::vector<std::string>& header,
                                const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size() && c < width.size(); ++c) {
      width[c] = std::max(width[c], row[c].size());
    }
  }
  std::string out = title + "\n";
  auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out += std::string(width[c] - row[c].size() + 2, ' ');
    }
    out += '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + 2;
  out += std::string(total > 2 ? total - 2 : total, '-') + "\n";
  for (const auto& row : rows) emit(row);
  return out;
}

}  // namespace xcal
