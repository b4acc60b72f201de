// Copyright 2026 The occ4d Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Depth and point-set metrics for forecast evaluation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occ4d/errors.hpp"
#include "occ4d/geometry.hpp"
#include "occ4d/render.hpp"
#include "occ4d/voxel.hpp"

namespace occ4d {

/// Raised when a near-field crop leaves one of the sets empty.
class NoNearFieldPoints : public std::runtime_error {
 public:
  NoNearFieldPoints() : std::runtime_error("no near-field points") {}
};

inline double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Static 3-d tree over a point set; nearest-neighbour queries are exact.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points) : points_(std::move(points)), order_(points_.size()) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) build(0, order_.size(), 0);
  }

  std::size_t size() const noexcept { return points_.size(); }

  struct Hit {
    std::size_t index = 0;  // into the constructor's point list
    double squared_distance = std::numeric_limits<double>::infinity();
    double distance() const { return std::sqrt(squared_distance); }
  };

  Hit nearest(const Vec3& q) const {
    detail::require(!points_.empty(), "KdTree::nearest: empty tree");
    Hit best;
    search(0, order_.size(), 0, q, best);
    return best;
  }

 private:
  // Node for [lo, hi) is the median element; children are the two halves.
  void build(std::size_t lo, std::size_t hi, int axis) {
    if (hi - lo <= 1) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi), [&](std::size_t a, std::size_t b) {
                       return points_[a][axis] < points_[b][axis];
                     });
    build(lo, mid, (axis + 1) % 3);
    build(mid + 1, hi, (axis + 1) % 3);
  }

  void search(std::size_t lo, std::size_t hi, int axis, const Vec3& q, Hit& best) const {
    if (lo >= hi) return;
    const std::size_t mid = lo + (hi - lo) / 2;
    const std::size_t idx = order_[mid];
    const double d2 = squared_distance(points_[idx], q);
    if (d2 < best.squared_distance || (d2 == best.squared_distance && idx < best.index)) best = {idx, d2};
    const double delta = q[axis] - points_[idx][axis];
    const int next = (axis + 1) % 3;
    const bool left_first = delta < 0.0;
    if (left_first) search(lo, mid, next, q, best); else search(mid + 1, hi, next, q, best);
    if (delta * delta <= best.squared_distance) {
      if (left_first) search(mid + 1, hi, next, q, best); else search(lo, mid, next, q, best);
    }
  }

  std::vector<Vec3> points_;
  std::vector<std::size_t> order_;
};

inline double l1_depth(std::span<const double> pred, std::span<const double> gt) {
  detail::require(pred.size() == gt.size(), "l1_depth: length mismatch");
  detail::require(!gt.empty(), "l1_depth: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) s += std::abs(pred[i] - gt[i]);
  return s / static_cast<double>(gt.size());
}

inline double absrel(std::span<const double> pred, std::span<const double> gt) {
  detail::require(pred.size() == gt.size(), "absrel: length mismatch");
  detail::require(!gt.empty(), "absrel: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    detail::require(gt[i] > 0.0, "absrel: ground-truth depth must be positive (index " + std::to_string(i) + ")");
    s += std::abs(pred[i] - gt[i]) / gt[i];
  }
  return s / static_cast<double>(gt.size());
}

namespace detail {
inline double mean_nearest(std::span<const Vec3> from, const KdTree& to) {
  double s = 0.0;
  for (const Vec3& p : from) s += to.nearest(p).distance();
  return s / static_cast<double>(from.size());
}
}  // namespace detail

/// Mean nearest-neighbour distance a->b plus b->a (Euclidean, not squared).
inline double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) {
  detail::require(!a.empty() && !b.empty(), "chamfer: empty point set");
  const KdTree ta(std::vector<Vec3>(a.begin(), a.end()));
  const KdTree tb(std::vector<Vec3>(b.begin(), b.end()));
  return detail::mean_nearest(a, tb) + detail::mean_nearest(b, ta);
}

/// Points whose horizontal distance from `center` is at most `radius`.
inline std::vector<Vec3> crop_horizontal(std::span<const Vec3> pts, const Vec3& center, double radius) {
  std::vector<Vec3> out;
  for (const Vec3& p : pts) {
    const double dx = p[0] - center[0], dy = p[1] - center[1];
    if (std::sqrt(dx * dx + dy * dy) <= radius) out.push_back(p);
  }
  return out;
}

inline double near_field_chamfer(std::span<const Vec3> a, std::span<const Vec3> b, double radius,
                                 const Vec3& sensor_origin = {0, 0, 0}) {
  detail::require(radius > 0.0, "near_field_chamfer: radius must be positive");
  const auto ca = crop_horizontal(a, sensor_origin, radius);
  const auto cb = crop_horizontal(b, sensor_origin, radius);
  if (ca.empty() || cb.empty()) throw NoNearFieldPoints();
  return chamfer(ca, cb);
}

struct MetricsReport {
  double l1 = 0.0;
  double absrel = 0.0;
  double nfcd = 0.0;  // meaningful only when nfcd_frames > 0
  double cd = 0.0;
  std::size_t ray_count = 0;
  std::size_t predicted_points = 0;
  std::size_t gt_points = 0;
  std::size_t nfcd_frames = 0;  // frames with points on both sides of the near-field crop

  bool has_nfcd() const { return nfcd_frames > 0; }

  /// NFCD is null when no frame had near-field points.
  nlohmann::json to_json() const {
    return {{"l1", l1},
            {"absrel", absrel},
            {"nfcd", has_nfcd() ? nlohmann::json(nfcd) : nlohmann::json(nullptr)},
            {"cd", cd},
            {"ray_count", ray_count},
            {"point_counts", {{"predicted", predicted_points}, {"ground_truth", gt_points}}}};
  }
  /// l1,absrel,nfcd,cd,ray_count; an undefined NFCD is an empty field.
  std::string csv_row() const;
  static constexpr const char* kCsvHeader = "l1,absrel,nfcd,cd,ray_count";
};

namespace detail {
inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}
}  // namespace detail

inline std::string MetricsReport::csv_row() const {
  return detail::format_double(l1) + "," + detail::format_double(absrel) + "," + (has_nfcd() ? detail::format_double(nfcd) : "") + "," +
         detail::format_double(cd) + "," + std::to_string(ray_count);
}

inline void validate_report(const MetricsReport& r) {
  for (double v : {r.l1, r.absrel, r.nfcd, r.cd})
    if (!std::isfinite(v) || v < 0.0) throw NumericError("metrics: non-finite or negative value");
}

/// Ground truth for one future frame, in the current frame's coordinates.
struct EvalFrame {
  std::vector<QueryRay> rays;
  PointCloud gt_cloud;
  Vec3 sensor_origin{0, 0, 0};
};

struct EvalConfig {
  double max_range = 50.0;
  double nfcd_radius = 35.0;
};

/// Renders every ray against its frame and scores the result.
/// L1 and AbsRel pool all rays; CD and NFCD average per-frame values over
/// frames that have points. Frames with an empty near-field crop are left out
/// of NFCD; when that is every frame, the report's NFCD is undefined.
inline MetricsReport evaluate(const OccupancyForecast& forecast, std::span<const EvalFrame> frames,
                              const EvalConfig& cfg) {
  detail::require(frames.size() == forecast.size(), "evaluate: " + std::to_string(frames.size()) +
                                                        " ground-truth frames for a " +
                                                        std::to_string(forecast.size()) + "-frame forecast");
  NoGradScope no_grad;
  std::vector<FrameRay> batch;
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (const QueryRay& r : frames[f].rays) batch.push_back({f, r});
  detail::require(!batch.empty(), "evaluate: no query rays");
  const Tensor depths = render_batch(forecast, batch, cfg.max_range);

  std::vector<double> pred(depths.data().begin(), depths.data().end());
  std::vector<double> gt;
  gt.reserve(batch.size());
  for (const auto& fr : batch) gt.push_back(fr.ray.gt_depth);

  MetricsReport report;
  report.ray_count = batch.size();
  report.l1 = l1_depth(pred, gt);
  report.absrel = absrel(pred, gt);

  double cd_sum = 0.0, nfcd_sum = 0.0;
  std::size_t cd_frames = 0, nfcd_frames = 0;
  std::size_t offset = 0;
  for (const EvalFrame& frame : frames) {
    std::vector<Vec3> predicted;
    predicted.reserve(frame.rays.size());
    for (std::size_t i = 0; i < frame.rays.size(); ++i) predicted.push_back(frame.rays[i].at(pred[offset + i]));
    offset += frame.rays.size();
    report.predicted_points += predicted.size();
    report.gt_points += frame.gt_cloud.size();
    if (predicted.empty() || frame.gt_cloud.empty()) continue;
    cd_sum += chamfer(predicted, frame.gt_cloud.points);
    ++cd_frames;
    try {
      nfcd_sum += near_field_chamfer(predicted, frame.gt_cloud.points, cfg.nfcd_radius, frame.sensor_origin);
      ++nfcd_frames;
    } catch (const NoNearFieldPoints&) {
    }
  }
  detail::require(cd_frames > 0, "evaluate: no frame has both predicted and ground-truth points");
  report.cd = cd_sum / static_cast<double>(cd_frames);
  report.nfcd_frames = nfcd_frames;
  if (nfcd_frames > 0) report.nfcd = nfcd_sum / static_cast<double>(nfcd_frames);
  validate_report(report);
  return report;
}

}  // namespace occ4d
