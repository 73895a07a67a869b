#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "xcal/cov2.hpp"
#include "xcal/csv.hpp"
#include "xcal/errors.hpp"
#include "xcal/kdtree.hpp"
#include "xcal/rng.hpp"

namespace xcal {

/// One cumulative image-correction sample: the correction (dx, dy) observed
/// at an (ideal) image location, weighted by that observation's residual
/// covariance block.
struct DistortionSample {
  Vector2d location = Vector2d::Zero();          // px
  Vector2d value = Vector2d::Zero();             // cumulative correction, px
  Matrix2d weight = Matrix2d::Identity();        // C_r block of the residual
};

struct CvConfig {
  std::vector<int> k_grid{1, 2, 3, 5, 8, 13, 21, 34, 55, 89};
  int folds = 10;
  std::uint64_t shuffle_seed = 0;
  bool inverse_distance_weighting = false;  // off by default: plain averaging
};

/// kNN regressor over the sampled correction field. Prediction is the mean
/// of the k nearest samples' values; ties in distance break toward the
/// smaller sample index.
class DistortionModel {
 public:
  DistortionModel() = default;

  DistortionModel(std::vector<DistortionSample> samples, int k, double cv_cost,
                  bool inverse_distance_weighting = false)
      : samples_(std::move(samples)),
        k_(k),
        cv_cost_(cv_cost),
        idw_(inverse_distance_weighting) {
    std::vector<Vector2d> locations(samples_.size());
    for (std::size_t i = 0; i < samples_.size(); ++i) locations[i] = samples_[i].location;
    index_ = KdTree2d(std::move(locations));
    if (!samples_.empty() && (k_ < 1 || static_cast<std::size_t>(k_) > samples_.size())) {
      throw ValidationError("distortion model k out of range");
    }
  }

  bool is_null() const { return samples_.empty(); }
  int k() const { return k_; }
  double cv_cost() const { return cv_cost_; }
  const std::vector<DistortionSample>& samples() const { return samples_; }
  const KdTree2d& index() const { return index_; }

  /// Predicted correction at an arbitrary image location (extrapolates
  /// outside the sample hull by construction).
  Vector2d predict(const Vector2d& query) const {
    if (is_null()) {
      throw InsufficientSamples("prediction from an empty distortion model");
    }
    return predict_mean(index_, samples_, query, k_, idw_);
  }

  static Vector2d predict_mean(const KdTree2d& index, const std::vector<DistortionSample>& samples,
                               const Vector2d& query, int k, bool idw) {
    const auto neighbors = index.knn(query, k);
    Vector2d acc = Vector2d::Zero();
    if (!idw) {
      for (const auto& n : neighbors) acc += samples[n.index].value;
      return acc / static_cast<double>(neighbors.size());
    }
    double wsum = 0.0;
    for (const auto& n : neighbors) {
      const double w = 1.0 / std::sqrt(n.dist_sq + 1e-18);
      acc += w * samples[n.index].value;
      wsum += w;
    }
    return acc / wsum;
  }

 private:
  std::vector<DistortionSample> samples_;
  KdTree2d index_;
  int k_ = 0;
  double cv_cost_ = 0.0;
  bool idw_ = false;
};

inline Vector2d knn_predict(const DistortionModel& model, const Vector2d& query) {
  return model.predict(query);
}

// ---------------------------------------------------------------------------
// 10-fold cross-validation with grid search over k, minimizing the weighted
// L2 cost G = sum over held-out samples of (r - g)' C_r^{-1} (r - g).
// ---------------------------------------------------------------------------

struct CvResult {
  int best_k = 0;
  double best_cost = 0.0;
  std::vector<std::pair<int, double>> cost_table;  // (k, G) per grid entry
};

/// Seed-deterministic fold assignment: a Fisher-Yates shuffle of the sample
/// indices, cut into `folds` contiguous chunks. fold_of[i] is the fold of
/// sample i.
inline std::vector<int> cv_fold_assignment(std::size_t n, int folds, std::uint64_t seed) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, /*stream=*/0x6f6c64f5u);
  rng.shuffle(order);
  std::vector<int> fold_of(n);
  for (int f = 0; f < folds; ++f) {
    const std::size_t lo = f * n / folds;
    const std::size_t hi = (f + 1) * n / folds;
    for (std::size_t i = lo; i < hi; ++i) fold_of[order[i]] = f;
  }
  return fold_of;
}

inline CvResult cv_select_k(const std::vector<DistortionSample>& samples, const CvConfig& cfg) {
  const std::size_t n = samples.size();
  if (cfg.folds < 2) throw ValidationError("cross-validation needs >= 2 folds");
  if (n < static_cast<std::size_t>(cfg.folds)) {
    throw InsufficientSamples("cross-validation needs at least one sample per fold (" +
                              std::to_string(n) + " < " + std::to_string(cfg.folds) + ")");
  }
  if (cfg.k_grid.empty()) throw ValidationError("empty k grid");
  for (std::size_t i = 0; i < cfg.k_grid.size(); ++i) {
    if (cfg.k_grid[i] < 1 || (i > 0 && cfg.k_grid[i] <= cfg.k_grid[i - 1])) {
      throw ValidationError("k grid must be strictly increasing and >= 1");
    }
  }
  const std::size_t max_fold = (n + cfg.folds - 1) / cfg.folds;
  const std::size_t min_train = n - max_fold;
  const int k_max = cfg.k_grid.back();
  if (static_cast<std::size_t>(k_max) > min_train) {
    throw GridTooLarge("k=" + std::to_string(k_max) + " exceeds smallest training fold (" +
                       std::to_string(min_train) + " samples)");
  }

  const std::vector<int> fold_of = cv_fold_assignment(n, cfg.folds, cfg.shuffle_seed);

  // Per-sample squared CV error for each grid k; accumulated over samples in
  // index order afterwards so the result does not depend on fold evaluation
  // order.
  std::vector<std::vector<double>> err(cfg.k_grid.size(), std::vector<double>(n, 0.0));
  std::vector<Matrix2d> weight_inv(n);
  for (std::size_t i = 0; i < n; ++i) {
    weight_inv[i] = invert_cov2(clamp_cov2(samples[i].weight));
  }

  for (int f = 0; f < cfg.folds; ++f) {
    std::vector<int> train_ids;
    train_ids.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of[i] != f) train_ids.push_back(static_cast<int>(i));
    }
    std::vector<Vector2d> train_locs(train_ids.size());
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
      train_locs[i] = samples[train_ids[i]].location;
    }
    const KdTree2d tree(std::move(train_locs));

    for (std::size_t i = 0; i < n; ++i) {
      if (fold_of[i] != f) continue;
      const auto neighbors = tree.knn(samples[i].location, k_max);
      // The k-NN set for a smaller k is a prefix of the sorted neighbour
      // list, so one k_max query serves the whole grid.
      Vector2d acc = Vector2d::Zero();
      std::size_t gi = 0;
      for (int j = 0; j < k_max; ++j) {
        acc += samples[train_ids[neighbors[j].index]].value;
        while (gi < cfg.k_grid.size() && cfg.k_grid[gi] == j + 1) {
          const Vector2d g = acc / static_cast<double>(j + 1);
          const Vector2d e = samples[i].value - g;
          err[gi][i] = e.dot(weight_inv[i] * e);
          ++gi;
        }
      }
    }
  }

  CvResult out;
  for (std::size_t gi = 0; gi < cfg.k_grid.size(); ++gi) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += err[gi][i];
    out.cost_table.emplace_back(cfg.k_grid[gi], total);
    if (gi == 0 || total < out.best_cost) {
      out.best_cost = total;
      out.best_k = cfg.k_grid[gi];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fitting: accumulate this round's residuals onto the prior correction field
// (AP_next = AP_prev + dAP) and re-tune k by cross-validation.
// ---------------------------------------------------------------------------

/// `raw` carries per-sample locations as *measured* and values as this
/// iteration's residuals. The training location becomes the measured
/// location minus the prior correction (the best estimate of the ideal
/// location) and the stored value becomes the cumulative correction there.
inline DistortionModel fit_distortion(const std::vector<DistortionSample>& raw,
                                      const DistortionModel* prior, const CvConfig& cfg) {
  if (raw.size() < static_cast<std::size_t>(cfg.folds)) {
    throw InsufficientSamples("fit_distortion: " + std::to_string(raw.size()) +
                              " samples for " + std::to_string(cfg.folds) + " folds");
  }
  std::vector<DistortionSample> cumulative(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Vector2d correction = Vector2d::Zero();
    if (prior != nullptr && !prior->is_null()) correction = prior->predict(raw[i].location);
    cumulative[i].location = raw[i].location - correction;
    cumulative[i].value = correction + raw[i].value;
    cumulative[i].weight = raw[i].weight;
  }

  // Default grid capped at the training-fold size; an entirely infeasible
  // user grid still errors.
  const std::size_t n = cumulative.size();
  const std::size_t max_fold = (n + cfg.folds - 1) / cfg.folds;
  const std::size_t min_train = n - max_fold;
  CvConfig capped = cfg;
  capped.k_grid.clear();
  for (int k : cfg.k_grid) {
    if (static_cast<std::size_t>(k) <= min_train) capped.k_grid.push_back(k);
  }
  if (capped.k_grid.empty()) {
    throw GridTooLarge("no k grid entry fits the smallest training fold (" +
                       std::to_string(min_train) + " samples)");
  }

  const CvResult cv = cv_select_k(cumulative, capped);
  return DistortionModel(std::move(cumulative), cv.best_k, cv.best_cost,
                         cfg.inverse_distance_weighting);
}

// ------------------------------ serialization ------------------------------

/// Format: first line `k=<value>`, then a CSV of samples. Weights are not
/// persisted; a loaded model predicts but refits start from scratch weights.
inline void save_distortion_model(const std::string& path, const DistortionModel& model) {
  io::FileWriter w(path);
  w.line("k=" + std::to_string(model.k()));
  w.line("x_px,y_px,dx_px,dy_px");
  for (const auto& s : model.samples()) {
    w.line(io::fmt_full(s.location.x()) + "," + io::fmt_full(s.location.y()) + "," +
           io::fmt_full(s.value.x()) + "," + io::fmt_full(s.value.y()));
  }
}

inline DistortionModel load_distortion_model(const std::string& path) {
  const auto lines = io::read_lines(path);
  if (lines.size() < 2 || lines[0].rfind("k=", 0) != 0) {
    throw ParseError(path + ": expected first line 'k=<value>'");
  }
  const int k = static_cast<int>(io::parse_int(lines[0].substr(2), path + ":1"));
  if (lines[1] != "x_px,y_px,dx_px,dy_px") {
    throw ParseError(path + ": expected header 'x_px,y_px,dx_px,dy_px'");
  }
  std::vector<DistortionSample> samples;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string ctx = path + ":" + std::to_string(i + 1);
    const auto f = io::split(lines[i], ',');
    if (f.size() != 4) throw ParseError(ctx + ": expected 4 fields");
    DistortionSample s;
    s.location = {io::parse_double(f[0], ctx), io::parse_double(f[1], ctx)};
    s.value = {io::parse_double(f[2], ctx), io::parse_double(f[3], ctx)};
    samples.push_back(s);
  }
  if (samples.empty() && k != 0) throw ParseError(path + ": k set but no samples");
  return DistortionModel(std::move(samples), k, 0.0);
}

}  // namespace xcal
