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

// Synthetic driving sequences: moving boxes on a ground plane seen by a
// spinning multi-beam LiDAR, and the on-disk sequence format.
//
// Sequence directory:
//   manifest.json      frame count, period, per-frame timestamp + pose
//   frame_<k>.o4dp     "O4DP", u32 version=1, u64 count, count x (f32 x, y, z)
// Binary fields are little-endian. Points are in the sensor frame of their
// own timestamp; poses are sensor -> world.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occ4d/binio.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/geometry.hpp"

namespace occ4d {

struct Box {
  Vec3 center{0, 0, 0};
  Vec3 half_extents{1, 1, 1};
  Vec3 velocity{0, 0, 0};  // m/s

  bool operator==(const Box&) const = default;
};

/// Boxes over the ground plane z = 0, plus the ego pose of every frame.
struct Scene {
  std::vector<Box> boxes;
  std::vector<Pose> ego_trajectory;
  bool ground = true;

  /// The same scene with every box advanced to time `t` (seconds).
  Scene at(double t) const {
    Scene s = *this;
    for (Box& b : s.boxes) b.center = b.center + t * b.velocity;
    return s;
  }
};

inline void validate_scene(const Scene& scene) {
  for (const Box& b : scene.boxes)
    for (double e : b.half_extents) detail::require(e > 0.0, "scene: box extents must be positive");
  for (const Pose& p : scene.ego_trajectory) validate_pose(p);
}

struct LidarConfig {
  std::size_t azimuth_count = 360;
  std::vector<double> elevation_deg = default_elevations();
  double max_range = 50.0;

  /// 16 beams evenly spaced over [-15, 5] degrees.
  static std::vector<double> default_elevations() {
    std::vector<double> out;
    for (int i = 0; i < 16; ++i) out.push_back(-15.0 + 20.0 * i / 15.0);
    return out;
  }
};

/// Entry distance of the ray into an axis-aligned box, if in (0, inf).
inline std::optional<double> ray_box_entry(const Vec3& origin, const Vec3& dir, const Box& box) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    const double lo = box.center[a] - box.half_extents[a];
    const double hi = box.center[a] + box.half_extents[a];
    if (dir[a] == 0.0) {
      if (origin[a] < lo || origin[a] > hi) return std::nullopt;
      continue;
    }
    double t0 = (lo - origin[a]) / dir[a], t1 = (hi - origin[a]) / dir[a];
    if (t0 > t1) std::swap(t0, t1);
    t_near = std::max(t_near, t0);
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_near <= 0.0) return std::nullopt;
  return t_near;
}

/// Nearest hit distance along a world-frame ray, or nullopt beyond max_range.
inline std::optional<double> cast_ray(const Scene& scene, const Vec3& origin, const Vec3& dir, double max_range) {
  double best = std::numeric_limits<double>::infinity();
  for (const Box& b : scene.boxes)
    if (auto t = ray_box_entry(origin, dir, b)) best = std::min(best, *t);
  if (scene.ground && dir[2] < 0.0 && origin[2] > 0.0) best = std::min(best, -origin[2] / dir[2]);
  if (best > max_range) return std::nullopt;
  return best;
}

/// Unit beam direction in the sensor frame.
inline Vec3 beam_direction(double azimuth_rad, double elevation_deg) {
  const double el = elevation_deg * std::numbers::pi / 180.0;
  return {std::cos(el) * std::cos(azimuth_rad), std::cos(el) * std::sin(azimuth_rad), std::sin(el)};
}

/// Sweeps every (azimuth, elevation) beam from the posed sensor. Returns the
/// closest return of each beam in the sensor frame; misses are dropped.
inline PointCloud simulate_lidar(const Scene& scene, const Pose& pose, const LidarConfig& lidar,
                                 double azimuth_offset = 0.0) {
  detail::require(lidar.azimuth_count >= 1, "simulate_lidar: azimuth_count must be >= 1");
  PointCloud cloud;
  for (std::size_t i = 0; i < lidar.azimuth_count; ++i) {
    const double az = azimuth_offset + 2.0 * std::numbers::pi * static_cast<double>(i) /
                                           static_cast<double>(lidar.azimuth_count);
    for (double el : lidar.elevation_deg) {
      const Vec3 local = beam_direction(az, el);
      const Vec3 world = mat_vec(pose.rotation, local);
      if (auto t = cast_ray(scene, pose.translation, world, lidar.max_range)) cloud.points.push_back(*t * local);
    }
  }
  return cloud;
}

struct GeneratorConfig {
  std::size_t num_past = 5;
  std::size_t num_future = 5;
  double frame_period = 0.6;
  LidarConfig lidar;
  /// Random per-frame azimuth phase, drawn from the sequence seed.
  bool azimuth_jitter = false;
  /// Round points to float32 so the on-disk form is exact.
  bool quantize_f32 = true;

  // Scene sampling (random_scene).
  std::size_t num_boxes = 8;
  double scene_extent = 28.0;
  double max_box_speed = 3.0;
  double dynamic_fraction = 0.5;
  double ego_speed = 2.0;
  double sensor_height = 1.8;

  std::size_t frame_count() const { return num_past + 1 + num_future; }
};

/// Frames num_past+1 observed (oldest first, current last) then num_future future.
struct SequenceRecord {
  std::size_t num_past = 5;
  std::size_t num_future = 5;
  double frame_period = 0.6;
  std::vector<PointCloud> clouds;
  std::vector<Pose> poses;

  std::size_t current_index() const { return num_past; }
  std::size_t frame_count() const { return num_past + 1 + num_future; }
  const Pose& current_pose() const { return poses.at(current_index()); }

  bool operator==(const SequenceRecord&) const = default;
};

inline void validate_record(const SequenceRecord& rec) {
  detail::require(rec.frame_period > 0.0, "sequence: frame_period must be positive");
  detail::require(rec.num_future >= 1, "sequence: needs at least one future frame");
  detail::require(rec.clouds.size() == rec.frame_count() && rec.poses.size() == rec.frame_count(),
                  "sequence: frame count mismatch (expected " + std::to_string(rec.frame_count()) + ")");
  for (std::size_t k = 0; k < rec.clouds.size(); ++k) {
    detail::require(!rec.clouds[k].empty(), "sequence: frame " + std::to_string(k) + " has no points");
    if (k > 0)
      detail::require(rec.clouds[k].timestamp > rec.clouds[k - 1].timestamp,
                      "sequence: timestamps must increase");
  }
}

inline double frame_timestamp(std::size_t k, std::size_t num_past, double period) {
  return (static_cast<double>(k) - static_cast<double>(num_past)) * period;
}

/// Ego driving along +x at constant speed, sensor at `height`; pose k is at
/// the k-th frame time relative to the current frame.
inline std::vector<Pose> straight_trajectory(std::size_t frames, std::size_t num_past, double period, double speed,
                                             double height) {
  std::vector<Pose> out;
  for (std::size_t k = 0; k < frames; ++k)
    out.push_back(Pose::from_translation({speed * frame_timestamp(k, num_past, period), 0.0, height}));
  return out;
}

/// Random boxes resting on the ground away from the ego lane; a fraction move.
inline Scene random_scene(const GeneratorConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](double lo, double hi) {
    return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
  };
  Scene scene;
  while (scene.boxes.size() < cfg.num_boxes) {
    Box b;
    b.half_extents = {uniform(0.5, 2.5), uniform(0.5, 2.5), uniform(0.5, 1.5)};
    b.center = {uniform(-cfg.scene_extent, cfg.scene_extent), uniform(-cfg.scene_extent, cfg.scene_extent),
                b.half_extents[2]};
    if (std::abs(b.center[1]) - b.half_extents[1] < 3.0) continue;  // keep the ego lane clear
    if (uniform(0.0, 1.0) < cfg.dynamic_fraction) {
      const double heading = uniform(0.0, 2.0 * std::numbers::pi);
      const double speed = uniform(0.0, cfg.max_box_speed);
      b.velocity = {speed * std::cos(heading), speed * std::sin(heading), 0.0};
    }
    scene.boxes.push_back(b);
  }
  scene.ego_trajectory =
      straight_trajectory(cfg.frame_count(), cfg.num_past, cfg.frame_period, cfg.ego_speed, cfg.sensor_height);
  return scene;
}

/// Rounds every coordinate to the nearest float, staged through a float
/// buffer like the on-disk form. GCC 11 at -O3 SLP-vectorizes the in-place
/// double->float->double round trip per point and loses the x/y conversions.
inline void quantize_to_f32(PointCloud& cloud) {
  std::vector<float> staged;
  staged.reserve(3 * cloud.points.size());
  for (const Vec3& p : cloud.points)
    for (double c : p) staged.push_back(static_cast<float>(c));
  std::size_t i = 0;
  for (Vec3& p : cloud.points)
    for (double& c : p) c = static_cast<double>(staged[i++]);
}

/// Simulates every frame of the scene. Box positions are given at the current
/// frame (t = 0) and move with their velocity; timestamps are relative to it.
inline SequenceRecord generate_sequence(const Scene& scene, const GeneratorConfig& cfg, std::uint64_t seed) {
  validate_scene(scene);
  detail::require(scene.ego_trajectory.size() == cfg.frame_count(),
                  "generate_sequence: scene has " + std::to_string(scene.ego_trajectory.size()) +
                      " ego poses, expected " + std::to_string(cfg.frame_count()));
  std::mt19937_64 rng(seed);
  SequenceRecord rec;
  rec.num_past = cfg.num_past;
  rec.num_future = cfg.num_future;
  rec.frame_period = cfg.frame_period;
  for (std::size_t k = 0; k < cfg.frame_count(); ++k) {
    const double t = frame_timestamp(k, cfg.num_past, cfg.frame_period);
    const double jitter = cfg.azimuth_jitter ? static_cast<double>(rng() >> 11) * 0x1.0p-53 * 2.0 *
                                                   std::numbers::pi / static_cast<double>(cfg.lidar.azimuth_count)
                                             : 0.0;
    PointCloud cloud = simulate_lidar(scene.at(t), scene.ego_trajectory[k], cfg.lidar, jitter);
    cloud.timestamp = t;
    if (cfg.quantize_f32) quantize_to_f32(cloud);
    rec.clouds.push_back(std::move(cloud));
    rec.poses.push_back(scene.ego_trajectory[k]);
  }
  return rec;
}

/// Uniform random permutation of the point order (Fisher-Yates).
inline PointCloud point_shuffle(const PointCloud& cloud, std::uint64_t seed) {
  PointCloud out = cloud;
  std::mt19937_64 rng(seed);
  for (std::size_t i = out.points.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(out.points[i - 1], out.points[pick(rng)]);
  }
  return out;
}

inline constexpr std::uint32_t kPointFileVersion = 1;
inline constexpr int kSequenceVersion = 1;

inline std::string frame_file_name(std::size_t k) {
  std::ostringstream s;
  s << "frame_" << std::setw(4) << std::setfill('0') << k << ".o4dp";
  return s.str();
}

inline void write_points(const std::filesystem::path& path, const PointCloud& cloud) {
  binio::Writer w;
  w.bytes("O4DP");
  w.u32(kPointFileVersion);
  w.u64(cloud.points.size());
  for (const Vec3& p : cloud.points)
    for (double c : p) w.f32(static_cast<float>(c));
  w.save(path);
}

inline PointCloud read_points(const std::filesystem::path& path) {
  auto r = binio::Reader::open(path);
  if (r.bytes(4) != "O4DP") throw ParseError(path.string(), "bad magic");
  const std::uint32_t version = r.u32();
  if (version != kPointFileVersion)
    throw ParseError(path.string(), "unsupported point file version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  if (count > r.remaining() / 12) throw ParseError(path.string(), "unexpected end of file");
  PointCloud cloud;
  cloud.points.resize(count);
  for (Vec3& p : cloud.points)
    for (double& c : p) c = r.f32();
  if (r.remaining() != 0) throw ParseError(path.string(), "point count mismatch: trailing bytes after " +
                                                             std::to_string(count) + " points");
  return cloud;
}

inline void write_sequence(const SequenceRecord& rec, const std::filesystem::path& dir) {
  validate_record(rec);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
  nlohmann::json manifest;
  manifest["format"] = "occ4d-sequence";
  manifest["version"] = kSequenceVersion;
  manifest["num_past"] = rec.num_past;
  manifest["num_future"] = rec.num_future;
  manifest["frame_period"] = rec.frame_period;
  manifest["frame_count"] = rec.frame_count();
  manifest["frames"] = nlohmann::json::array();
  for (std::size_t k = 0; k < rec.frame_count(); ++k) {
    write_points(dir / frame_file_name(k), rec.clouds[k]);
    manifest["frames"].push_back(
        {{"file", frame_file_name(k)}, {"timestamp", rec.clouds[k].timestamp}, {"pose", pose_to_json(rec.poses[k])}});
  }
  const auto path = dir / "manifest.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError(path.string(), "write failed");
}

inline SequenceRecord read_sequence(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "missing file");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), std::string("invalid JSON: ") + e.what());
  }
  SequenceRecord rec;
  try {
    if (manifest.at("format").get<std::string>() != "occ4d-sequence")
      throw ParseError(path.string(), "not a sequence manifest");
    if (manifest.at("version").get<int>() != kSequenceVersion)
      throw ParseError(path.string(), "unsupported sequence version");
    rec.num_past = manifest.at("num_past").get<std::size_t>();
    rec.num_future = manifest.at("num_future").get<std::size_t>();
    rec.frame_period = manifest.at("frame_period").get<double>();
    const auto& frames = manifest.at("frames");
    const std::size_t declared = manifest.at("frame_count").get<std::size_t>();
    if (declared != rec.frame_count() || frames.size() != rec.frame_count())
      throw ParseError(path.string(), "frame count mismatch: manifest lists " + std::to_string(frames.size()) +
                                          " frames, declares " + std::to_string(declared) + ", expected " +
                                          std::to_string(rec.frame_count()));
    for (const auto& f : frames) {
      PointCloud cloud = read_points(dir / f.at("file").get<std::string>());
      cloud.timestamp = f.at("timestamp").get<double>();
      rec.clouds.push_back(std::move(cloud));
      try {
        rec.poses.push_back(pose_from_json(f.at("pose")));
      } catch (const ContractViolation& e) {
        throw ParseError(path.string(), e.what());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string(), std::string("malformed manifest: ") + e.what());
  }
  try {
    validate_record(rec);
  } catch (const ContractViolation& e) {
    throw ParseError(path.string(), e.what());
  }
  return rec;
}

}  // namespace occ4d
