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

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occ4d/errors.hpp"

namespace occ4d {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 out{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      out[r * 3 + c] = a[r * 3] * b[c] + a[r * 3 + 1] * b[3 + c] + a[r * 3 + 2] * b[6 + c];
  return out;
}

inline Mat3 transpose(const Mat3& m) { return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]}; }

/// Rigid transform x -> R x + t (sensor -> world when used as an ego pose).
struct Pose {
  Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0, 0, 0};

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& t) { return {Mat3{1, 0, 0, 0, 1, 0, 0, 0, 1}, t}; }
  /// Rotation by `yaw` radians about +z, then translation.
  static Pose from_yaw(double yaw, const Vec3& t = {0, 0, 0}) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {Mat3{c, -s, 0, s, c, 0, 0, 0, 1}, t};
  }

  bool operator==(const Pose&) const = default;
};

/// Throws ContractViolation unless R Rᵀ = I and det R = +1 within `tol`.
inline void validate_pose(const Pose& pose, double tol = 1e-9) {
  const Mat3 rrt = mat_mul(pose.rotation, transpose(pose.rotation));
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      detail::require(std::abs(rrt[r * 3 + c] - (r == c ? 1.0 : 0.0)) <= tol, "pose: rotation is not orthonormal");
  const Mat3& m = pose.rotation;
  const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
                     m[2] * (m[3] * m[7] - m[4] * m[6]);
  detail::require(std::abs(det - 1.0) <= tol, "pose: rotation determinant is " + std::to_string(det));
  for (double v : pose.translation) detail::require(std::isfinite(v), "pose: translation is not finite");
}

inline Vec3 transform_point(const Pose& a, const Vec3& p) { return mat_vec(a.rotation, p) + a.translation; }

/// a ∘ b: applies b, then a.
inline Pose compose(const Pose& a, const Pose& b) {
  return {mat_mul(a.rotation, b.rotation), mat_vec(a.rotation, b.translation) + a.translation};
}

inline Pose invert(const Pose& a) {
  const Mat3 rt = transpose(a.rotation);
  const Vec3 t = mat_vec(rt, a.translation);
  return {rt, Vec3{-t[0], -t[1], -t[2]}};
}

struct PointCloud {
  std::vector<Vec3> points;
  double timestamp = 0.0;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
  bool operator==(const PointCloud&) const = default;
};

struct QueryRay {
  Vec3 origin{0, 0, 0};
  Vec3 direction{1, 0, 0};
  double gt_depth = 1.0;

  Vec3 endpoint() const { return origin + gt_depth * direction; }
  Vec3 at(double t) const { return origin + t * direction; }
};

/// Expresses a cloud captured at `frame_pose` in the sensor frame of `current_pose`.
inline PointCloud align_to_current(const PointCloud& cloud, const Pose& frame_pose, const Pose& current_pose) {
  const Pose to_current = compose(invert(current_pose), frame_pose);
  PointCloud out;
  out.timestamp = cloud.timestamp;
  out.points.reserve(cloud.size());
  for (const Vec3& p : cloud.points) out.points.push_back(transform_point(to_current, p));
  return out;
}

struct RayBuildResult {
  std::vector<QueryRay> rays;
  std::size_t skipped = 0;  // points within kMinRayRange of the origin
};

inline constexpr double kMinRayRange = 1e-6;

/// One query ray per point, from `origin` through the point.
inline RayBuildResult rays_from_future_cloud(const PointCloud& cloud, const Vec3& origin) {
  RayBuildResult out;
  out.rays.reserve(cloud.size());
  for (const Vec3& p : cloud.points) {
    const Vec3 d = p - origin;
    const double range = norm(d);
    if (!(range > kMinRayRange)) {
      ++out.skipped;
      continue;
    }
    out.rays.push_back({origin, (1.0 / range) * d, range});
  }
  return out;
}

// Pose JSON: {"rotation": [9 values, row-major], "translation": [3 values]}.

inline nlohmann::json pose_to_json(const Pose& pose) {
  return {{"rotation", pose.rotation}, {"translation", pose.translation}};
}

inline Pose pose_from_json(const nlohmann::json& j) {
  Pose pose;
  const auto& r = j.at("rotation");
  const auto& t = j.at("translation");
  detail::require(r.is_array() && r.size() == 9, "pose: rotation must have 9 entries");
  detail::require(t.is_array() && t.size() == 3, "pose: translation must have 3 entries");
  for (std::size_t i = 0; i < 9; ++i) pose.rotation[i] = r[i].get<double>();
  for (std::size_t i = 0; i < 3; ++i) pose.translation[i] = t[i].get<double>();
  validate_pose(pose);
  return pose;
}

}  // namespace occ4d
