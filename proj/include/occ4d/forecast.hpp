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

// The learnable forecaster.
//
//   clouds -> voxelize -> BEV (height as channels) -> max-pool downsample
//          -> temporal fusion (conv, leaky, conv over chronologically stacked frames)
//          -> T recurrent steps h_t = block(h_{t-1} ++ fused), one shared block
//          -> per-step head conv + 2x upsample = occupancy logits per future frame
//          -> residual UNet refinement per frame (final conv starts at zero)

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "occ4d/checkpoint.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/geometry.hpp"
#include "occ4d/ops.hpp"
#include "occ4d/tensor.hpp"
#include "occ4d/voxel.hpp"

namespace occ4d {

/// 64 x 64 x 8 cells of 1 m around the sensor, 3 m below to 5 m above it.
inline GridSpec desk_grid() { return GridSpec::from_counts({-32.0, -32.0, -3.0}, 64, 64, 8, {1.0, 1.0, 1.0}); }

struct PipelineConfig {
  std::size_t num_past = 5;
  std::size_t num_future = 5;
  double frame_period = 0.6;
  std::size_t channels = 16;
  GridSpec encode_grid = desk_grid();
  GridSpec output_grid = desk_grid();
  std::size_t bev_downsample = 2;
  double leaky_slope = 0.1;

  std::size_t input_frames() const { return num_past + 1; }
  std::size_t bev_height() const { return encode_grid.ny() / bev_downsample; }
  std::size_t bev_width() const { return encode_grid.nx() / bev_downsample; }
};

inline void validate_pipeline(const PipelineConfig& cfg) {
  detail::require(cfg.num_future >= 1, "pipeline: num_future must be >= 1");
  detail::require(cfg.frame_period > 0.0, "pipeline: frame_period must be positive");
  detail::require(cfg.channels >= 1, "pipeline: channels must be >= 1");
  detail::require(cfg.bev_downsample >= 1, "pipeline: bev_downsample must be >= 1");
  detail::require(cfg.encode_grid.nx() % cfg.bev_downsample == 0 && cfg.encode_grid.ny() % cfg.bev_downsample == 0,
                  "pipeline: encode grid x/y counts must be divisible by bev_downsample");
  detail::require(cfg.output_grid.nx() == 2 * cfg.bev_width() && cfg.output_grid.ny() == 2 * cfg.bev_height(),
                  "pipeline: output grid x/y counts must be twice the downsampled BEV size (" +
                      std::to_string(2 * cfg.bev_width()) + " x " + std::to_string(2 * cfg.bev_height()) + ")");
  detail::require(cfg.output_grid.nx() % 2 == 0 && cfg.output_grid.ny() % 2 == 0,
                  "pipeline: output grid x/y counts must be even for the UNet pooling level");
}

struct ConvLayer {
  Tensor weights;  // [C_out, C_in, k, k]
  Tensor bias;     // [C_out]

  Tensor operator()(const Tensor& x) const { return conv2d(x, weights, bias, weights.dim(2) / 2); }
};

struct ForecasterParams {
  ConvLayer fuse_in;     // stacked input frames -> C
  ConvLayer fuse_out;    // C -> C
  ConvLayer step;        // 2C -> C, shared by all rollout steps
  ConvLayer head;        // C -> output height slices
  ConvLayer unet_enc1;   // Z -> C
  ConvLayer unet_enc2;   // C -> 2C at half resolution
  ConvLayer unet_dec;    // 3C (upsampled ++ skip) -> C
  ConvLayer unet_out;    // C -> Z, zero-initialized

  std::vector<NamedTensor> named() const {
    std::vector<NamedTensor> out;
    auto add = [&out](const char* name, const ConvLayer& l) {
      out.push_back({std::string(name) + ".weight", l.weights});
      out.push_back({std::string(name) + ".bias", l.bias});
    };
    add("fuse_in", fuse_in);
    add("fuse_out", fuse_out);
    add("step", step);
    add("head", head);
    add("unet_enc1", unet_enc1);
    add("unet_enc2", unet_enc2);
    add("unet_dec", unet_dec);
    add("unet_out", unet_out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : named()) n += p.tensor.numel();
    return n;
  }
};

namespace detail {

inline ConvLayer make_conv(std::size_t cout, std::size_t cin, std::size_t k, std::mt19937_64& rng, bool zero) {
  ConvLayer layer{Tensor(Shape{cout, cin, k, k}), Tensor(Shape{cout})};
  if (!zero) {
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
    for (double& w : layer.weights.mutable_data()) {
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      w = (2.0 * u - 1.0) * bound;
    }
  }
  layer.weights.set_requires_grad();
  layer.bias.set_requires_grad();
  return layer;
}

}  // namespace detail

/// He-uniform weights, zero biases, zero final UNet conv. Deterministic per seed.
inline ForecasterParams init_params(const PipelineConfig& cfg, std::uint64_t seed) {
  validate_pipeline(cfg);
  std::mt19937_64 rng(seed);
  const std::size_t c = cfg.channels, k = 3;
  const std::size_t zin = cfg.encode_grid.nz(), zout = cfg.output_grid.nz();
  ForecasterParams p;
  p.fuse_in = detail::make_conv(c, cfg.input_frames() * zin, k, rng, false);
  p.fuse_out = detail::make_conv(c, c, k, rng, false);
  p.step = detail::make_conv(c, 2 * c, k, rng, false);
  p.head = detail::make_conv(zout, c, k, rng, false);
  p.unet_enc1 = detail::make_conv(c, zout, k, rng, false);
  p.unet_enc2 = detail::make_conv(2 * c, c, k, rng, false);
  p.unet_dec = detail::make_conv(c, 3 * c, k, rng, false);
  p.unet_out = detail::make_conv(zout, c, k, rng, true);
  return p;
}

/// Copies checkpointed tensors into a freshly shaped parameter set.
inline ForecasterParams params_from_checkpoint(const PipelineConfig& cfg, const Checkpoint& ckpt) {
  ForecasterParams p = init_params(cfg, 0);
  auto slots = p.named();
  detail::require(slots.size() == ckpt.params.size(),
                  "checkpoint: expected " + std::to_string(slots.size()) + " tensors, found " +
                      std::to_string(ckpt.params.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& src = ckpt.params[i];
    detail::require(src.name == slots[i].name, "checkpoint: tensor " + std::to_string(i) + " is '" + src.name +
                                                   "', expected '" + slots[i].name + "'");
    detail::require(src.tensor.shape() == slots[i].tensor.shape(),
                    "checkpoint: '" + src.name + "' has shape " + shape_string(src.tensor.shape()) +
                        ", configuration expects " + shape_string(slots[i].tensor.shape()));
    auto dst = slots[i].tensor.mutable_data();
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.begin());
  }
  return p;
}

/// Chronologically stacked BEV frames -> conv -> leaky_relu -> conv.
inline Tensor temporal_fuse(std::span<const Tensor> bev_frames, const ForecasterParams& params,
                            double leaky_slope = 0.1) {
  detail::require(!bev_frames.empty(), "temporal_fuse: no frames");
  for (std::size_t i = 1; i < bev_frames.size(); ++i)
    detail::require(bev_frames[i].shape() == bev_frames[0].shape(),
                    "temporal_fuse: frame " + std::to_string(i) + " has shape " +
                        shape_string(bev_frames[i].shape()) + ", expected " + shape_string(bev_frames[0].shape()));
  const Tensor stacked = bev_frames.size() == 1 ? bev_frames[0] : concat_channels(bev_frames);
  return params.fuse_out(leaky_relu(params.fuse_in(stacked), leaky_slope));
}

/// One recurrent decoder step: the new hidden state from the previous one and
/// the fused scene feature.
inline Tensor sequential_block(const Tensor& hidden, const Tensor& fused, const ForecasterParams& params,
                               double leaky_slope) {
  return leaky_relu(params.step(concat_channels({hidden, fused})), leaky_slope);
}

/// T future logit grids from the fused BEV feature.
inline OccupancyForecast rollout(const Tensor& fused_bev, const ForecasterParams& params, std::size_t horizon,
                                 const GridSpec& output_grid, double frame_period = 0.6, double leaky_slope = 0.1) {
  detail::require(horizon >= 1, "rollout: horizon must be >= 1");
  OccupancyForecast out;
  out.frame_period = frame_period;
  Tensor hidden = fused_bev;
  for (std::size_t t = 0; t < horizon; ++t) {
    hidden = sequential_block(hidden, fused_bev, params, leaky_slope);
    Tensor logits = upsample_nearest2x(params.head(hidden));
    detail::require(logits.shape() == output_grid.shape(), "rollout: head output " + shape_string(logits.shape()) +
                                                               " does not match output grid " +
                                                               shape_string(output_grid.shape()));
    out.frames.push_back({output_grid, std::move(logits), GridKind::kLogit});
  }
  return out;
}

/// Residual two-level UNet applied to one [Z,Y,X] logit grid.
inline Tensor unet_residual(const Tensor& logits, const ForecasterParams& params, double leaky_slope) {
  const Tensor e1 = leaky_relu(params.unet_enc1(logits), leaky_slope);
  const Tensor e2 = leaky_relu(params.unet_enc2(max_pool(e1, 2)), leaky_slope);
  const Tensor d = leaky_relu(params.unet_dec(concat_channels({upsample_nearest2x(e2), e1})), leaky_slope);
  return params.unet_out(d);
}

inline OccupancyForecast unet_refine(const OccupancyForecast& logits, const ForecasterParams& params,
                                     double leaky_slope = 0.1) {
  OccupancyForecast out;
  out.frame_period = logits.frame_period;
  for (const OccupancyGrid& g : logits.frames) {
    detail::require(g.kind == GridKind::kLogit, "unet_refine: expects logit grids");
    out.frames.push_back({g.spec, add(g.values, unet_residual(g.values, params, leaky_slope)), GridKind::kLogit});
  }
  return out;
}

/// BEV features of already-aligned clouds, before temporal fusion.
inline std::vector<Tensor> encode_clouds(std::span<const PointCloud> aligned_clouds, const PipelineConfig& cfg) {
  std::vector<Tensor> bev;
  bev.reserve(aligned_clouds.size());
  for (const PointCloud& cloud : aligned_clouds)
    bev.push_back(downsample_bev(bev_encode(voxelize(cloud, cfg.encode_grid).grid), cfg.bev_downsample));
  return bev;
}

/// End-to-end forecast from num_past + 1 chronological clouds in the current frame.
inline OccupancyForecast forecast_from_clouds(std::span<const PointCloud> aligned_clouds, const PipelineConfig& cfg,
                                              const ForecasterParams& params) {
  validate_pipeline(cfg);
  detail::require(aligned_clouds.size() == cfg.input_frames(),
                  "forecast_from_clouds: expected " + std::to_string(cfg.input_frames()) + " clouds, got " +
                      std::to_string(aligned_clouds.size()));
  const std::vector<Tensor> bev = encode_clouds(aligned_clouds, cfg);
  const Tensor fused = temporal_fuse(bev, params, cfg.leaky_slope);
  const OccupancyForecast coarse =
      rollout(fused, params, cfg.num_future, cfg.output_grid, cfg.frame_period, cfg.leaky_slope);
  return unet_refine(coarse, params, cfg.leaky_slope);
}

}  // namespace occ4d
