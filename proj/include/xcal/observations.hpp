#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "xcal/csv.hpp"
#include "xcal/errors.hpp"
#include "xcal/geometry.hpp"

namespace xcal {

/// One measured target location in one frame of one system. Image
/// coordinates are centered on the nominal image middle: x grows with the
/// column index, y with the row index, so a 1024 px wide frame spans
/// [-512, 512) in x.
struct ImageObservation {
  int system_id = 0;
  int frame_id = 0;
  int target_id = 0;
  double x = 0.0;      // px
  double y = 0.0;      // px
  double sigma = 1.0;  // a-priori std-dev, px
};

struct FrameKey {
  int system_id = 0;
  int frame_id = 0;
  friend auto operator<=>(const FrameKey&, const FrameKey&) = default;
};

struct ObservationSet {
  std::vector<ImageObservation> observations;  // sorted by (system, frame, target)
  std::vector<FrameKey> frames;                // sorted, unique
  std::vector<ObjectPoint> phantom;            // sorted by target id

  int frame_index(const FrameKey& key) const {
    auto it = std::lower_bound(frames.begin(), frames.end(), key);
    if (it == frames.end() || *it != key) return -1;
    return static_cast<int>(it - frames.begin());
  }

  int point_index(int target_id) const {
    auto it = std::lower_bound(phantom.begin(), phantom.end(), target_id,
                               [](const ObjectPoint& p, int id) { return p.id < id; });
    if (it == phantom.end() || it->id != target_id) return -1;
    return static_cast<int>(it - phantom.begin());
  }

  std::vector<int> system_ids() const {
    std::vector<int> ids;
    for (const auto& f : frames)
      if (ids.empty() || ids.back() != f.system_id) ids.push_back(f.system_id);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }

  /// Observations of a single system, with the shared phantom.
  ObservationSet filter_system(int system_id) const {
    ObservationSet out;
    out.phantom = phantom;
    for (const auto& o : observations)
      if (o.system_id == system_id) out.observations.push_back(o);
    for (const auto& f : frames)
      if (f.system_id == system_id) out.frames.push_back(f);
    return out;
  }
};

inline const char* role_name(PointRole role) {
  return role == PointRole::control ? "control" : "tie";
}

inline PointRole parse_role(const std::string& s, const std::string& context) {
  if (s == "control") return PointRole::control;
  if (s == "tie") return PointRole::tie;
  throw ParseError("unknown role '" + s + "' (" + context + ")");
}

namespace detail {

inline std::string obs_key_str(int s, int f, int t) {
  return "(system " + std::to_string(s) + ", frame " + std::to_string(f) + ", target " +
         std::to_string(t) + ")";
}

}  // namespace detail

/// Canonical ordering, key uniqueness, sigma positivity, target existence and
/// the per-frame >= 3 non-collinear targets minimum.
inline void finalize_observation_set(ObservationSet& set) {
  std::sort(set.phantom.begin(), set.phantom.end(),
            [](const ObjectPoint& a, const ObjectPoint& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < set.phantom.size(); ++i) {
    if (set.phantom[i].id == set.phantom[i - 1].id) {
      throw ValidationError("duplicate target id in phantom: " + std::to_string(set.phantom[i].id));
    }
  }

  std::sort(set.observations.begin(), set.observations.end(),
            [](const ImageObservation& a, const ImageObservation& b) {
              return std::tie(a.system_id, a.frame_id, a.target_id) <
                     std::tie(b.system_id, b.frame_id, b.target_id);
            });
  for (std::size_t i = 1; i < set.observations.size(); ++i) {
    const auto& a = set.observations[i - 1];
    const auto& b = set.observations[i];
    if (a.system_id == b.system_id && a.frame_id == b.frame_id && a.target_id == b.target_id) {
      throw ValidationError("duplicate observation " +
                            detail::obs_key_str(b.system_id, b.frame_id, b.target_id));
    }
  }

  set.frames.clear();
  for (const auto& o : set.observations) {
    if (o.sigma <= 0.0) {
      throw ValidationError("sigma must be positive at " +
                            detail::obs_key_str(o.system_id, o.frame_id, o.target_id));
    }
    if (set.point_index(o.target_id) < 0) {
      throw ValidationError("unknown target id " + std::to_string(o.target_id) + " at " +
                            detail::obs_key_str(o.system_id, o.frame_id, o.target_id));
    }
    const FrameKey key{o.system_id, o.frame_id};
    if (set.frames.empty() || set.frames.back() != key) set.frames.push_back(key);
  }

  // Per-frame solvability: at least three non-collinear observed targets.
  std::size_t i = 0;
  while (i < set.observations.size()) {
    std::size_t j = i;
    std::vector<Vector3d> pts;
    while (j < set.observations.size() &&
           set.observations[j].system_id == set.observations[i].system_id &&
           set.observations[j].frame_id == set.observations[i].frame_id) {
      pts.push_back(set.phantom[set.point_index(set.observations[j].target_id)].P);
      ++j;
    }
    if (pts.size() < 3) {
      throw ValidationError("frame (system " + std::to_string(set.observations[i].system_id) +
                            ", frame " + std::to_string(set.observations[i].frame_id) +
                            ") observes fewer than 3 targets");
    }
    if (points_collinear(pts)) {
      throw ValidationError("frame (system " + std::to_string(set.observations[i].system_id) +
                            ", frame " + std::to_string(set.observations[i].frame_id) +
                            ") observes only collinear targets");
    }
    i = j;
  }
}

// --------------------------- CSV interfaces --------------------------------

inline const char* kObservationHeader = "system_id,frame_id,target_id,x_px,y_px,sigma_px";
inline const char* kPhantomHeader = "target_id,X_mm,Y_mm,Z_mm,role";

inline std::vector<ObjectPoint> load_phantom(const std::string& path) {
  const auto lines = io::read_lines(path);
  if (lines.empty() || lines[0] != kPhantomHeader) {
    throw ParseError(path + ": expected header '" + std::string(kPhantomHeader) + "'");
  }
  std::vector<ObjectPoint> pts;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string ctx = path + ":" + std::to_string(i + 1);
    const auto f = io::split(lines[i], ',');
    if (f.size() != 5) throw ParseError(ctx + ": expected 5 fields, got " + std::to_string(f.size()));
    ObjectPoint p;
    p.id = static_cast<int>(io::parse_int(f[0], ctx));
    p.P = {io::parse_double(f[1], ctx), io::parse_double(f[2], ctx), io::parse_double(f[3], ctx)};
    p.role = parse_role(f[4], ctx);
    pts.push_back(p);
  }
  return pts;
}

inline void save_phantom(const std::string& path, const std::vector<ObjectPoint>& pts) {
  io::FileWriter w(path);
  w.line(kPhantomHeader);
  for (const auto& p : pts) {
    w.line(std::to_string(p.id) + "," + io::fmt_full(p.P.x()) + "," + io::fmt_full(p.P.y()) + "," +
           io::fmt_full(p.P.z()) + "," + role_name(p.role));
  }
}

inline ObservationSet load_observations(const std::string& path,
                                        const std::vector<ObjectPoint>& phantom) {
  const auto lines = io::read_lines(path);
  if (lines.empty() || lines[0] != kObservationHeader) {
    throw ParseError(path + ": expected header '" + std::string(kObservationHeader) + "'");
  }
  ObservationSet set;
  set.phantom = phantom;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string ctx = path + ":" + std::to_string(i + 1);
    const auto f = io::split(lines[i], ',');
    if (f.size() != 6) throw ParseError(ctx + ": expected 6 fields, got " + std::to_string(f.size()));
    ImageObservation o;
    o.system_id = static_cast<int>(io::parse_int(f[0], ctx));
    o.frame_id = static_cast<int>(io::parse_int(f[1], ctx));
    o.target_id = static_cast<int>(io::parse_int(f[2], ctx));
    o.x = io::parse_double(f[3], ctx);
    o.y = io::parse_double(f[4], ctx);
    o.sigma = io::parse_double(f[5], ctx);
    set.observations.push_back(o);
  }
  finalize_observation_set(set);
  return set;
}

inline void save_observations(const std::string& path, const ObservationSet& set) {
  io::FileWriter w(path);
  w.line(kObservationHeader);
  for (const auto& o : set.observations) {
    w.line(std::to_string(o.system_id) + "," + std::to_string(o.frame_id) + "," +
           std::to_string(o.target_id) + "," + io::fmt_full(o.x) + "," + io::fmt_full(o.y) + "," +
           io::fmt_full(o.sigma));
  }
}

// ------------------------------ pose CSVs ----------------------------------

inline const char* kPoseHeader = "system_id,frame_id,Tx_mm,Ty_mm,Tz_mm,qw,qx,qy,qz";

inline void save_poses(const std::string& path, const std::vector<FrameKey>& frames,
                       const std::vector<Pose>& poses) {
  if (frames.size() != poses.size()) throw ValidationError("frames/poses size mismatch");
  io::FileWriter w(path);
  w.line(kPoseHeader);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Quaternion q = poses[i].q.normalized().canonical();
    w.line(std::to_string(frames[i].system_id) + "," + std::to_string(frames[i].frame_id) + "," +
           io::fmt_full(poses[i].T.x()) + "," + io::fmt_full(poses[i].T.y()) + "," +
           io::fmt_full(poses[i].T.z()) + "," + io::fmt_full(q.w) + "," + io::fmt_full(q.x) + "," +
           io::fmt_full(q.y) + "," + io::fmt_full(q.z));
  }
}

inline std::map<FrameKey, Pose> load_poses(const std::string& path) {
  const auto lines = io::read_lines(path);
  if (lines.empty() || lines[0].rfind(kPoseHeader, 0) != 0) {
    throw ParseError(path + ": expected header starting with '" + std::string(kPoseHeader) + "'");
  }
  std::map<FrameKey, Pose> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string ctx = path + ":" + std::to_string(i + 1);
    const auto f = io::split(lines[i], ',');
    if (f.size() < 9) throw ParseError(ctx + ": expected >= 9 fields");
    FrameKey key{static_cast<int>(io::parse_int(f[0], ctx)),
                 static_cast<int>(io::parse_int(f[1], ctx))};
    Pose p;
    p.T = {io::parse_double(f[2], ctx), io::parse_double(f[3], ctx), io::parse_double(f[4], ctx)};
    p.q = Quaternion(io::parse_double(f[5], ctx), io::parse_double(f[6], ctx),
                     io::parse_double(f[7], ctx), io::parse_double(f[8], ctx))
              .normalized();
    if (!out.emplace(key, p).second) {
      throw ValidationError(ctx + ": duplicate frame (system " + std::to_string(key.system_id) +
                            ", frame " + std::to_string(key.frame_id) + ")");
    }
  }
  return out;
}

}  // namespace xcal
