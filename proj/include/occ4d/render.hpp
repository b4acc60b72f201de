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

// Expected-depth rendering of occupancy grids along query rays.
//
// Each visited cell i contributes one sample at its segment midpoint d_i and
// acts as a termination probability p_i:
//
//   w_i = p_i * prod_{j<i} (1 - p_j)
//   E[d] = sum_i w_i d_i + (1 - sum_i w_i) * background
//
// Cell membership comes from an exact grid walk and is held fixed in the
// backward pass; gradients flow only through the p_i.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include "occ4d/errors.hpp"
#include "occ4d/geometry.hpp"
#include "occ4d/ops.hpp"
#include "occ4d/parallel.hpp"
#include "occ4d/tensor.hpp"
#include "occ4d/voxel.hpp"

namespace occ4d {

/// Cells pierced by a ray segment, in order of increasing distance.
struct RaySampleChain {
  std::vector<CellIndex> cells;
  std::vector<std::size_t> flat;  // offsets into the [Z,Y,X] tensor
  std::vector<double> entries;
  std::vector<double> exits;
  std::vector<double> midpoints;
  double exit_distance = 0.0;  // where the clipped segment leaves the grid or ends

  std::size_t size() const noexcept { return cells.size(); }
  bool empty() const noexcept { return cells.empty(); }
};

/// Incremental grid walk over the segment [origin, origin + max_range * dir].
///
/// Rays starting outside are clipped to their entry point. When crossings on
/// several axes coincide, all of them are taken in one step (x, then y, then
/// z), so cells touched only at a corner or edge are not emitted; every
/// emitted cell has a segment of positive length.
inline RaySampleChain traverse(const GridSpec& spec, const QueryRay& ray, double max_range) {
  detail::require(max_range > 0.0, "traverse: max_range must be positive");
  RaySampleChain chain;
  const Vec3& o = ray.origin;
  const Vec3& d = ray.direction;

  double t_enter = 0.0, t_leave = max_range;
  for (int a = 0; a < 3; ++a) {
    const double lo = spec.min_corner()[a], hi = spec.max_corner()[a];
    if (d[a] == 0.0) {
      if (o[a] < lo || o[a] >= hi) return chain;
      continue;
    }
    double ta = (lo - o[a]) / d[a], tb = (hi - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t_enter = std::max(t_enter, ta);
    t_leave = std::min(t_leave, tb);
  }
  if (!(t_enter < t_leave)) return chain;

  CellIndex cell{};
  std::array<int, 3> step{};
  std::array<double, 3> t_next{};
  constexpr double kInf = std::numeric_limits<double>::infinity();
  auto crossing = [&](int a) {
    if (step[a] == 0) return kInf;
    const std::int64_t plane = step[a] > 0 ? cell[a] + 1 : cell[a];
    return (spec.boundary(a, plane) - o[a]) / d[a];
  };
  for (int a = 0; a < 3; ++a) {
    step[a] = d[a] > 0.0 ? 1 : (d[a] < 0.0 ? -1 : 0);
    const double f = (o[a] + t_enter * d[a] - spec.min_corner()[a]) / spec.voxel_size()[a];
    const double r = std::round(f);
    double c = std::floor(f);
    // On a cell boundary, start in the cell the ray is heading into.
    if (std::abs(f - r) <= kIndexSnap) c = step[a] < 0 ? r - 1.0 : r;
    c = std::clamp(c, 0.0, static_cast<double>(spec.count(a)) - 1.0);
    cell[a] = static_cast<std::int64_t>(c);
  }
  for (int a = 0; a < 3; ++a) t_next[a] = crossing(a);

  double t = t_enter;
  const std::size_t max_steps = spec.nx() + spec.ny() + spec.nz() + 3;
  for (std::size_t guard = 0; guard < max_steps; ++guard) {
    const double t_cross = std::min({t_next[0], t_next[1], t_next[2]});
    const double t_out = std::min(t_cross, t_leave);
    if (t_out > t) {
      chain.cells.push_back(cell);
      chain.flat.push_back(spec.flat(cell));
      chain.entries.push_back(t);
      chain.exits.push_back(t_out);
      chain.midpoints.push_back(0.5 * (t + t_out));
      t = t_out;
    }
    if (t_cross >= t_leave) break;
    bool left_grid = false;
    for (int a = 0; a < 3; ++a) {
      if (t_next[a] != t_cross) continue;
      cell[a] += step[a];
      if (cell[a] < 0 || cell[a] >= static_cast<std::int64_t>(spec.count(a))) left_grid = true;
      t_next[a] = crossing(a);
    }
    if (left_grid) break;
  }
  chain.exit_distance = chain.empty() ? t_enter : chain.exits.back();
  return chain;
}

namespace detail {

inline double render_forward(std::span<const double> probs, const RaySampleChain& chain, double background) {
  double transmittance = 1.0, depth = 0.0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const double p = probs[chain.flat[i]];
    depth += p * transmittance * chain.midpoints[i];
    transmittance *= 1.0 - p;
  }
  return depth + transmittance * background;
}

/// Adds scale * dE[d]/dp into grad. With R_k the expected (d - background)
/// of the part of the ray beyond cell k, dE/dp_k = T_k * ((d_k - bg) - R_k).
inline void render_backward(std::span<const double> probs, const RaySampleChain& chain, double background,
                            double scale, std::span<double> grad) {
  const std::size_t n = chain.size();
  std::vector<double> transmittance(n);
  double t = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    transmittance[i] = t;
    t *= 1.0 - probs[chain.flat[i]];
  }
  double beyond = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double p = probs[chain.flat[k]];
    const double rel = chain.midpoints[k] - background;
    grad[chain.flat[k]] += scale * transmittance[k] * (rel - beyond);
    beyond = p * rel + (1.0 - p) * beyond;
  }
}

inline void require_background(const RaySampleChain& chain, double background) {
  require(background >= chain.exit_distance - 1e-9,
          "expected_depth: background_depth " + std::to_string(background) + " is before the chain exit " +
              std::to_string(chain.exit_distance));
}

}  // namespace detail

/// Termination weights w_i along the chain, plus the background weight
/// (the transmittance left after the last cell).
struct TerminationWeights {
  std::vector<double> cells;
  double background = 1.0;
};

inline TerminationWeights termination_weights(std::span<const double> probs, const RaySampleChain& chain) {
  TerminationWeights w;
  w.cells.reserve(chain.size());
  double t = 1.0;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    const double p = probs[chain.flat[i]];
    w.cells.push_back(p * t);
    t *= 1.0 - p;
  }
  w.background = t;
  return w;
}

/// Expected termination depth along `chain`; differentiable in grid values.
inline Tensor expected_depth(const OccupancyGrid& frame, const RaySampleChain& chain, double background_depth) {
  detail::require(frame.kind == GridKind::kProbability, "expected_depth: grid must hold probabilities");
  detail::require(frame.values.shape() == frame.spec.shape(), "expected_depth: grid tensor shape mismatch");
  detail::require_background(chain, background_depth);
  const Tensor& probs = frame.values;
  Tensor out = Tensor::scalar(detail::render_forward(probs.data(), chain, background_depth));
  detail::record_op({&probs}, out, [probs, chain, background_depth](std::span<const double> g, Adjoints& adj) {
    detail::render_backward(probs.data(), chain, background_depth, g[0], adj.of(probs));
  });
  return out;
}

struct FrameRay {
  std::size_t frame = 0;
  QueryRay ray;
};

/// Renders every ray against its own forecast frame. Logit frames pass
/// through a recorded sigmoid first. Returns a [N] tensor of depths.
/// `background_depth` <= 0 means "use max_range".
inline Tensor render_batch(const OccupancyForecast& forecast, std::span<const FrameRay> rays, double max_range,
                           double background_depth = 0.0) {
  detail::require(!forecast.frames.empty(), "render_batch: forecast has no frames");
  const double background = background_depth > 0.0 ? background_depth : max_range;
  detail::require(background >= max_range, "render_batch: background_depth must be >= max_range");
  for (std::size_t i = 0; i < rays.size(); ++i)
    detail::require(rays[i].frame < forecast.size(), "render_batch: ray " + std::to_string(i) +
                                                         " targets frame " + std::to_string(rays[i].frame) +
                                                         " but the forecast has " +
                                                         std::to_string(forecast.size()));

  std::vector<bool> used(forecast.size(), false);
  for (const auto& r : rays) used[r.frame] = true;
  std::vector<Tensor> probs(forecast.size());
  for (std::size_t f = 0; f < forecast.size(); ++f) {
    if (!used[f]) continue;
    const OccupancyGrid& g = forecast.frames[f];
    detail::require(g.values.shape() == g.spec.shape(), "render_batch: frame tensor shape mismatch");
    probs[f] = g.kind == GridKind::kLogit ? sigmoid(g.values) : g.values;
  }

  auto chains = std::make_shared<std::vector<RaySampleChain>>(rays.size());
  Tensor out(Shape{rays.size()});
  auto depth = out.mutable_data();
  parallel_for(rays.size(), [&](std::size_t i) {
    (*chains)[i] = traverse(forecast.frames[rays[i].frame].spec, rays[i].ray, max_range);
    depth[i] = detail::render_forward(probs[rays[i].frame].data(), (*chains)[i], background);
  });

  std::vector<Tensor> inputs;
  for (const Tensor& p : probs)
    if (p.defined()) inputs.push_back(p);
  std::vector<std::size_t> frame_of(rays.size());
  for (std::size_t i = 0; i < rays.size(); ++i) frame_of[i] = rays[i].frame;
  detail::record_op_dynamic(
      inputs, out, [probs, chains, frame_of, background](std::span<const double> g, Adjoints& adj) {
        // Serial over rays so the accumulated gradient is schedule-independent.
        for (std::size_t i = 0; i < frame_of.size(); ++i) {
          const Tensor& p = probs[frame_of[i]];
          if (!Adjoints::wants(p) || g[i] == 0.0) continue;
          detail::render_backward(p.data(), (*chains)[i], background, g[i], adj.of(p));
        }
      });
  return out;
}

}  // namespace occ4d
