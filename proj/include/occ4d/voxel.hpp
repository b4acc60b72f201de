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

// Metric voxel grids. Cells are half-open [low, high) on every axis and grid
// tensors are laid out [Z,Y,X], which doubles as a [C,H,W] BEV map with
// height slices as channels.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "occ4d/binio.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/geometry.hpp"
#include "occ4d/ops.hpp"
#include "occ4d/tensor.hpp"

namespace occ4d {

using CellIndex = std::array<std::int64_t, 3>;  // (ix, iy, iz)

/// Fractional cell coordinates within this many cells of an integer are
/// snapped to it, absorbing decimal representation error (4.6/0.2 -> 23).
inline constexpr double kIndexSnap = 1e-9;

class GridSpec {
 public:
  GridSpec() = default;
  GridSpec(const Vec3& min_corner, const Vec3& max_corner, const Vec3& voxel_size)
      : min_(min_corner), max_(max_corner), size_(voxel_size) {
    static constexpr const char* kAxis = "xyz";
    for (int a = 0; a < 3; ++a) {
      const std::string axis(1, kAxis[a]);
      detail::require(std::isfinite(min_[a]) && std::isfinite(max_[a]) && std::isfinite(size_[a]),
                      "grid: non-finite bound on axis " + axis);
      detail::require(max_[a] > min_[a], "grid: max_corner must exceed min_corner on axis " + axis);
      detail::require(size_[a] > 0.0, "grid: voxel_size must be positive on axis " + axis);
      const double ratio = (max_[a] - min_[a]) / size_[a];
      const double rounded = std::round(ratio);
      detail::require(rounded >= 1.0 && std::abs(ratio - rounded) <= 1e-9 * std::max(1.0, ratio),
                      "grid: extent on axis " + axis + " is not a whole number of voxels (" +
                          std::to_string(ratio) + ")");
      counts_[a] = static_cast<std::size_t>(rounded);
    }
  }

  /// Cubic cells of edge `voxel` spanning counts (nx, ny, nz) from `min_corner`.
  static GridSpec from_counts(const Vec3& min_corner, std::size_t nx, std::size_t ny, std::size_t nz,
                              const Vec3& voxel_size) {
    return GridSpec(min_corner,
                    {min_corner[0] + static_cast<double>(nx) * voxel_size[0],
                     min_corner[1] + static_cast<double>(ny) * voxel_size[1],
                     min_corner[2] + static_cast<double>(nz) * voxel_size[2]},
                    voxel_size);
  }

  const Vec3& min_corner() const { return min_; }
  const Vec3& max_corner() const { return max_; }
  const Vec3& voxel_size() const { return size_; }
  std::size_t nx() const { return counts_[0]; }
  std::size_t ny() const { return counts_[1]; }
  std::size_t nz() const { return counts_[2]; }
  std::size_t count(int axis) const { return counts_[static_cast<std::size_t>(axis)]; }
  std::size_t cell_count() const { return counts_[0] * counts_[1] * counts_[2]; }
  /// Tensor shape [Z,Y,X].
  Shape shape() const { return {nz(), ny(), nx()}; }

  /// Flat offset in a [Z,Y,X] tensor.
  std::size_t flat(const CellIndex& c) const {
    return (static_cast<std::size_t>(c[2]) * ny() + static_cast<std::size_t>(c[1])) * nx() +
           static_cast<std::size_t>(c[0]);
  }
  bool contains(const CellIndex& c) const {
    for (int a = 0; a < 3; ++a)
      if (c[a] < 0 || c[a] >= static_cast<std::int64_t>(counts_[a])) return false;
    return true;
  }
  Vec3 cell_center(const CellIndex& c) const {
    Vec3 out;
    for (int a = 0; a < 3; ++a) out[a] = min_[a] + (static_cast<double>(c[a]) + 0.5) * size_[a];
    return out;
  }
  /// Coordinate of the plane between cells i-1 and i on `axis`.
  double boundary(int axis, std::int64_t i) const { return min_[axis] + static_cast<double>(i) * size_[axis]; }

  bool operator==(const GridSpec&) const = default;

 private:
  Vec3 min_{0, 0, 0};
  Vec3 max_{1, 1, 1};
  Vec3 size_{1, 1, 1};
  std::array<std::size_t, 3> counts_{1, 1, 1};
};

/// Cell containing `p`, or nullopt when any coordinate falls outside [min, max).
inline std::optional<CellIndex> voxel_index(const GridSpec& spec, const Vec3& p) {
  CellIndex idx{};
  for (int a = 0; a < 3; ++a) {
    const double f = (p[a] - spec.min_corner()[a]) / spec.voxel_size()[a];
    if (!std::isfinite(f)) return std::nullopt;
    const double r = std::round(f);
    const double cell = std::abs(f - r) <= kIndexSnap ? r : std::floor(f);
    if (cell < 0.0 || cell >= static_cast<double>(spec.count(a))) return std::nullopt;
    idx[a] = static_cast<std::int64_t>(cell);
  }
  return idx;
}

enum class GridKind { kProbability, kLogit };

struct OccupancyGrid {
  GridSpec spec;
  Tensor values;  // [Z,Y,X]
  GridKind kind = GridKind::kProbability;

  double at(const CellIndex& c) const { return values.data()[spec.flat(c)]; }
};

inline void validate_grid(const OccupancyGrid& grid) {
  detail::require(grid.values.defined() && grid.values.shape() == grid.spec.shape(),
                  "occupancy grid: tensor shape does not match grid cell counts " + shape_string(grid.spec.shape()));
  if (grid.kind == GridKind::kProbability) {
    for (double v : grid.values.data())
      detail::require(v >= 0.0 && v <= 1.0, "occupancy grid: probability outside [0,1]");
  }
}

struct OccupancyForecast {
  std::vector<OccupancyGrid> frames;
  double frame_period = 0.6;

  std::size_t size() const noexcept { return frames.size(); }
};

inline void validate_forecast(const OccupancyForecast& f) {
  detail::require(!f.frames.empty(), "forecast: needs at least one frame");
  for (const auto& g : f.frames) {
    detail::require(g.spec == f.frames.front().spec, "forecast: frames disagree on grid spec");
    validate_grid(g);
  }
}

struct VoxelizeResult {
  OccupancyGrid grid;
  std::size_t outside = 0;
};

/// Binary occupancy: 1 where at least one point lands, else 0.
inline VoxelizeResult voxelize(const PointCloud& cloud, const GridSpec& spec) {
  VoxelizeResult out{{spec, Tensor(spec.shape()), GridKind::kProbability}, 0};
  auto cells = out.grid.values.mutable_data();
  for (const Vec3& p : cloud.points) {
    if (auto idx = voxel_index(spec, p)) {
      cells[spec.flat(*idx)] = 1.0;
    } else {
      ++out.outside;
    }
  }
  return out;
}

/// Height slices as channels: the [Z,Y,X] tensor viewed as [C=Z, H=Y, W=X].
inline Tensor bev_encode(const OccupancyGrid& grid) {
  detail::require(grid.kind == GridKind::kProbability, "bev_encode: grid must hold probabilities");
  return grid.values;
}

/// Per-channel max over factor x factor blocks.
inline Tensor downsample_bev(const Tensor& bev, std::size_t factor) { return max_pool(bev, factor); }

// Grid dump: "O4DG", u32 version, 9 f64 (min xyz, max xyz, voxel xyz), then
// cell values as f32 in [Z,Y,X] order. All little-endian.

inline constexpr std::uint32_t kGridDumpVersion = 1;

inline void write_grid(const std::filesystem::path& path, const OccupancyGrid& grid) {
  binio::Writer w;
  w.bytes("O4DG");
  w.u32(kGridDumpVersion);
  for (const Vec3* v : {&grid.spec.min_corner(), &grid.spec.max_corner(), &grid.spec.voxel_size()})
    for (double c : *v) w.f64(c);
  for (double v : grid.values.data()) w.f32(static_cast<float>(v));
  w.save(path);
}

inline OccupancyGrid read_grid(const std::filesystem::path& path, GridKind kind = GridKind::kProbability) {
  auto r = binio::Reader::open(path);
  if (r.bytes(4) != "O4DG") throw ParseError(path.string(), "bad magic");
  const std::uint32_t version = r.u32();
  if (version != kGridDumpVersion)
    throw ParseError(path.string(), "unsupported grid version " + std::to_string(version));
  Vec3 lo, hi, size;
  for (Vec3* v : {&lo, &hi, &size})
    for (double& c : *v) c = r.f64();
  GridSpec spec;
  try {
    spec = GridSpec(lo, hi, size);
  } catch (const ContractViolation& e) {
    throw ParseError(path.string(), e.what());
  }
  std::vector<double> values(spec.cell_count());
  for (double& v : values) v = r.f32();
  r.expect_end();
  return {spec, Tensor(spec.shape(), std::move(values)), kind};
}

}  // namespace occ4d
