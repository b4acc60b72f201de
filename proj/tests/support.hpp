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

// Reference oracles shared by the unit suites and the acceptance runner.
// None of these call into the code they check beyond building inputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "occ4d/forecast.hpp"
#include "occ4d/geometry.hpp"
#include "occ4d/ops.hpp"
#include "occ4d/render.hpp"
#include "occ4d/tensor.hpp"
#include "occ4d/train.hpp"
#include "occ4d/voxel.hpp"

namespace occ4d::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = u(rng);
  if (grad) t.set_requires_grad();
  return t;
}

/// sum_i w_i x_i, recorded on the tape. Turns any op output into a scalar
/// with a generic upstream gradient.
inline Tensor weighted_sum(const Tensor& x, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * x.data()[i];
  Tensor out = Tensor::scalar(s);
  detail::record_op({&x}, out, [x, w](std::span<const double> g, Adjoints& adj) {
    auto gx = adj.of(x);
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g[0] * w[i];
  });
  return out;
}

inline std::vector<double> random_weights(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(n);
  for (double& v : w) v = u(rng);
  return w;
}

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_grad = 0.0;
  std::size_t checked = 0;
};

/// Tape gradients of loss() with respect to `leaves` against central finite
/// differences. Relative error uses max(|analytic|, |numeric|, floor) as the
/// denominator so entries with vanishing gradient compare absolutely.
/// `stride` > 1 checks every stride-th entry of each leaf.
inline GradCheck check_gradients(std::vector<Tensor> leaves, const std::function<Tensor()>& loss, double h = 1e-5,
                                 double floor = 1e-6, std::size_t stride = 1) {
  for (Tensor& t : leaves) t.clear_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    tape.backward(loss());
  }
  GradCheck out;
  NoGradScope no_grad;
  for (Tensor& t : leaves) {
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); i += stride) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = loss().item();
      data[i] = saved - h;
      const double down = loss().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      out.max_abs_grad = std::max(out.max_abs_grad, std::abs(analytic[i]));
      ++out.checked;
    }
  }
  return out;
}

/// Cell of `p` by plain floor division, half-open on every axis.
inline std::optional<CellIndex> floor_cell(const Vec3& lo, const Vec3& size, const std::array<std::size_t, 3>& counts,
                                           const Vec3& p) {
  CellIndex c{};
  for (int a = 0; a < 3; ++a) {
    const double f = std::floor((p[a] - lo[a]) / size[a]);
    if (!(f >= 0.0) || f >= static_cast<double>(counts[a])) return std::nullopt;
    c[a] = static_cast<std::int64_t>(f);
  }
  return c;
}

/// Cells along [origin, origin + max_range * dir] by dense sampling at
/// voxel/100, with bisection between samples whose cells differ so short
/// corner segments are not stepped over. Transitions closer than `resolution`
/// are treated as simultaneous.
inline std::vector<CellIndex> sampled_cells(const GridSpec& spec, const QueryRay& ray, double max_range,
                                            double resolution = 1e-11) {
  const Vec3 lo = spec.min_corner(), size = spec.voxel_size();
  const std::array<std::size_t, 3> counts{spec.nx(), spec.ny(), spec.nz()};
  auto cell_at = [&](double t) { return floor_cell(lo, size, counts, ray.at(t)); };
  std::vector<CellIndex> out;
  auto emit = [&out](const std::optional<CellIndex>& c) {
    if (c && (out.empty() || out.back() != *c)) out.push_back(*c);
  };
  std::function<void(double, const std::optional<CellIndex>&, double, const std::optional<CellIndex>&)> refine =
      [&](double t0, const std::optional<CellIndex>& c0, double t1, const std::optional<CellIndex>& c1) {
        if (c0 == c1) return;
        if (t1 - t0 <= resolution) {
          emit(c1);
          return;
        }
        const double tm = 0.5 * (t0 + t1);
        const auto cm = cell_at(tm);
        refine(t0, c0, tm, cm);
        refine(tm, cm, t1, c1);
      };
  const double step = std::min({size[0], size[1], size[2]}) / 100.0;
  const auto n = static_cast<std::size_t>(std::ceil(max_range / step));
  double t_prev = 0.0;
  auto c_prev = cell_at(0.0);
  emit(c_prev);
  for (std::size_t k = 1; k <= n; ++k) {
    const double t = std::min(max_range, static_cast<double>(k) * step);
    const auto c = cell_at(t);
    refine(t_prev, c_prev, t, c);
    t_prev = t;
    c_prev = c;
  }
  return out;
}

/// Index of the nearest point by exhaustive scan (first on ties).
inline std::size_t linear_nearest(const std::vector<Vec3>& pts, const Vec3& q) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const double dx = pts[i][0] - q[0], dy = pts[i][1] - q[1], dz = pts[i][2] - q[2];
    const double d = dx * dx + dy * dy + dz * dz;
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

inline double linear_chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  auto directed = [](const std::vector<Vec3>& from, const std::vector<Vec3>& to) {
    double s = 0.0;
    for (const Vec3& p : from) {
      const Vec3& q = to[linear_nearest(to, p)];
      s += std::sqrt((p[0] - q[0]) * (p[0] - q[0]) + (p[1] - q[1]) * (p[1] - q[1]) + (p[2] - q[2]) * (p[2] - q[2]));
    }
    return s / static_cast<double>(from.size());
  };
  return directed(a, b) + directed(b, a);
}

/// Scalar Adam, written out independently of the library optimizer.
struct ScalarAdam {
  double m = 0.0, v = 0.0;
  int t = 0;
  double step(double w, double g, double lr) {
    ++t;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    return w - lr * mhat / (std::sqrt(vhat) + 1e-8);
  }
};

/// 16 x 16 x 4 grid of 1 m cells, small enough for exhaustive gradient checks.
inline PipelineConfig tiny_pipeline(std::size_t num_past = 2, std::size_t num_future = 2, std::size_t channels = 4) {
  PipelineConfig cfg;
  cfg.num_past = num_past;
  cfg.num_future = num_future;
  cfg.channels = channels;
  cfg.encode_grid = GridSpec::from_counts({-8.0, -8.0, -2.0}, 16, 16, 4, {1.0, 1.0, 1.0});
  cfg.output_grid = cfg.encode_grid;
  return cfg;
}

inline std::vector<PointCloud> random_clouds(const PipelineConfig& cfg, std::size_t points, std::mt19937_64& rng) {
  const Vec3 lo = cfg.encode_grid.min_corner(), hi = cfg.encode_grid.max_corner();
  std::vector<PointCloud> out(cfg.input_frames());
  for (PointCloud& c : out)
    for (std::size_t i = 0; i < points; ++i) {
      Vec3 p;
      for (int a = 0; a < 3; ++a) p[a] = std::uniform_real_distribution<double>(lo[a], hi[a])(rng);
      c.points.push_back(p);
    }
  return out;
}

/// Randomizes the zero-initialized last UNet layer so every parameter
/// influences the output.
inline void wake_unet(ForecasterParams& params, std::mt19937_64& rng, double scale = 0.2) {
  std::uniform_real_distribution<double> u(-scale, scale);
  for (double& v : params.unet_out.weights.mutable_data()) v = u(rng);
  for (double& v : params.unet_out.bias.mutable_data()) v = u(rng);
}

/// Finite-difference check of every forecaster parameter through the full
/// pipeline: clouds -> forecast -> rendered depth -> L1 loss on `ray_count` rays.
inline GradCheck pipeline_gradient_check(std::uint64_t seed, std::size_t ray_count = 64) {
  std::mt19937_64 rng(seed);
  const PipelineConfig cfg = tiny_pipeline();
  ForecasterParams params = init_params(cfg, seed);
  wake_unet(params, rng);
  const auto clouds = random_clouds(cfg, 150, rng);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> depth(2.0, 12.0);
  std::vector<FrameRay> rays;
  std::vector<double> gt;
  for (std::size_t i = 0; i < ray_count; ++i) {
    Vec3 d{n(rng), n(rng), 0.3 * n(rng)};
    d = (1.0 / norm(d)) * d;
    rays.push_back({i % cfg.num_future, {{0.0, 0.0, 0.5}, d, depth(rng)}});
    gt.push_back(rays.back().ray.gt_depth);
  }
  std::vector<Tensor> leaves;
  for (const auto& p : params.named()) leaves.push_back(p.tensor);
  return check_gradients(leaves, [&] {
    return depth_l1_loss(render_batch(forecast_from_clouds(clouds, cfg, params), rays, 20.0), gt);
  });
}

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

/// Every regular file under `root`, relative path -> contents.
inline std::vector<std::pair<std::string, std::string>> snapshot_tree(const std::filesystem::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.emplace_back(std::filesystem::relative(e.path(), root).string(), read_bytes(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("occ4d_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace occ4d::testing
