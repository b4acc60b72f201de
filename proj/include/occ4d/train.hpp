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

// Self-supervised training: rendered depth vs. future LiDAR range, L1 loss,
// Adam, cosine-annealed learning rate.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occ4d/checkpoint.hpp"
#include "occ4d/data.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/forecast.hpp"
#include "occ4d/geometry.hpp"
#include "occ4d/metrics.hpp"
#include "occ4d/render.hpp"
#include "occ4d/tensor.hpp"

namespace occ4d {

/// mean |rendered - gt|, differentiable in `rendered` (subgradient 0 at ties).
inline Tensor depth_l1_loss(const Tensor& rendered, std::span<const double> gt) {
  detail::require(rendered.defined() && rendered.numel() == gt.size(),
                  "depth_l1_loss: rendered/ground-truth length mismatch");
  detail::require(!gt.empty(), "depth_l1_loss: empty batch");
  const auto r = rendered.data();
  const double inv_n = 1.0 / static_cast<double>(gt.size());
  double s = 0.0;
  std::vector<double> sign(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const double diff = r[i] - gt[i];
    s += std::abs(diff);
    sign[i] = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  }
  Tensor out = Tensor::scalar(s * inv_n);
  detail::record_op({&rendered}, out, [rendered, sign = std::move(sign), inv_n](std::span<const double> g,
                                                                              Adjoints& adj) {
    auto gr = adj.of(rendered);
    for (std::size_t i = 0; i < sign.size(); ++i) gr[i] += g[0] * sign[i] * inv_n;
  });
  return out;
}

struct ScheduleConfig {
  double lr_max = 0.001;
  double lr_min = 0.0;
  std::size_t total_steps = 200;
};

inline double cosine_lr(const ScheduleConfig& sched, std::size_t step) {
  detail::require(sched.total_steps >= 1, "cosine_lr: total_steps must be >= 1");
  detail::require(sched.lr_min >= 0.0 && sched.lr_min <= sched.lr_max, "cosine_lr: need 0 <= lr_min <= lr_max");
  detail::require(step <= sched.total_steps, "cosine_lr: step " + std::to_string(step) + " beyond total_steps " +
                                                 std::to_string(sched.total_steps));
  const double phase = std::numbers::pi * static_cast<double>(step) / static_cast<double>(sched.total_steps);
  return sched.lr_min + 0.5 * (sched.lr_max - sched.lr_min) * (1.0 + std::cos(phase));
}

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update of every parameter from its grad buffer.
inline void adam_step(std::span<Tensor> params, OptimizerState& state, double lr) {
  if (state.first_moment.empty()) {
    for (const Tensor& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  detail::require(state.first_moment.size() == params.size(), "adam_step: parameter list changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    detail::require(params[i].has_grad(), "adam_step: parameter " + std::to_string(i) + " has no gradient");
    detail::require(state.first_moment[i].size() == params[i].numel(),
                    "adam_step: moment buffer " + std::to_string(i) + " does not match its parameter");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    const auto g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.eps);
    }
  }
}

/// Past and current clouds expressed in the current sensor frame.
inline std::vector<PointCloud> aligned_inputs(const SequenceRecord& rec) {
  std::vector<PointCloud> out;
  for (std::size_t k = 0; k <= rec.current_index(); ++k)
    out.push_back(align_to_current(rec.clouds[k], rec.poses[k], rec.current_pose()));
  return out;
}

/// Ground truth for each future frame in the current sensor frame. Ray origins
/// are the future sensor positions; only returns inside `grid` and closer than
/// `max_range` are kept.
inline std::vector<EvalFrame> future_frames(const SequenceRecord& rec, const GridSpec& grid, double max_range) {
  std::vector<EvalFrame> out;
  const Pose to_current = invert(rec.current_pose());
  for (std::size_t f = 0; f < rec.num_future; ++f) {
    const std::size_t k = rec.current_index() + 1 + f;
    EvalFrame frame;
    frame.sensor_origin = transform_point(compose(to_current, rec.poses[k]), Vec3{0, 0, 0});
    const PointCloud aligned = align_to_current(rec.clouds[k], rec.poses[k], rec.current_pose());
    for (const QueryRay& ray : rays_from_future_cloud(aligned, frame.sensor_origin).rays) {
      if (ray.gt_depth >= max_range || !voxel_index(grid, ray.endpoint())) continue;
      frame.rays.push_back(ray);
      frame.gt_cloud.points.push_back(ray.endpoint());
    }
    frame.gt_cloud.timestamp = aligned.timestamp;
    out.push_back(std::move(frame));
  }
  return out;
}

struct TrainConfig {
  ScheduleConfig schedule;
  std::size_t rays_per_frame = 1024;  // 0 = all rays
  std::size_t grad_accum = 1;         // sequences per optimizer step
  double max_range = 50.0;
};

struct LossLogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  ForecasterParams params;
  std::vector<LossLogEntry> log;
};

/// Up to `count` rays per frame, sampled without replacement.
inline std::vector<FrameRay> sample_rays(std::span<const EvalFrame> frames, std::size_t count, std::mt19937_64& rng) {
  std::vector<FrameRay> out;
  for (std::size_t f = 0; f < frames.size(); ++f) {
    std::vector<std::size_t> idx(frames[f].rays.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t take = count == 0 ? idx.size() : std::min(count, idx.size());
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
      out.push_back({f, frames[f].rays[idx[i]]});
    }
  }
  return out;
}

/// Loss of one sequence under the current parameters; records on the active tape.
inline Tensor sequence_loss(const SequenceRecord& rec, const PipelineConfig& cfg, const ForecasterParams& params,
                            const TrainConfig& tc, std::mt19937_64& rng) {
  std::vector<PointCloud> inputs = aligned_inputs(rec);
  for (PointCloud& c : inputs) c = point_shuffle(c, rng());
  const auto frames = future_frames(rec, cfg.output_grid, tc.max_range);
  const auto rays = sample_rays(frames, tc.rays_per_frame, rng);
  detail::require(!rays.empty(), "training: sequence has no usable future rays");
  std::vector<double> gt;
  gt.reserve(rays.size());
  for (const auto& r : rays) gt.push_back(r.ray.gt_depth);
  const OccupancyForecast forecast = forecast_from_clouds(inputs, cfg, params);
  return depth_l1_loss(render_batch(forecast, rays, tc.max_range), gt);
}

/// Trains on in-memory sequences, visiting them in a seed-shuffled cycle.
inline TrainResult train_on(std::span<const SequenceRecord> sequences, const PipelineConfig& cfg,
                            const TrainConfig& tc, std::uint64_t seed) {
  detail::require(!sequences.empty(), "training: no sequences");
  detail::require(tc.grad_accum >= 1, "training: grad_accum must be >= 1");
  for (const auto& rec : sequences)
    detail::require(rec.num_past == cfg.num_past && rec.num_future == cfg.num_future,
                    "training: sequence frame layout does not match the pipeline configuration");
  TrainResult result{init_params(cfg, seed), {}};
  std::vector<NamedTensor> named = result.params.named();
  std::vector<Tensor> params;
  for (auto& n : named) params.push_back(n.tensor);

  std::mt19937_64 rng(seed ^ 0x9E3779B97F4A7C15ULL);
  std::vector<std::size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  OptimizerState opt;
  std::size_t cursor = 0;
  for (std::size_t step = 0; step < tc.schedule.total_steps; ++step) {
    for (Tensor& p : params) {
      p.grad_buffer();
      p.zero_grad();
    }
    double loss_sum = 0.0;
    for (std::size_t a = 0; a < tc.grad_accum; ++a) {
      const SequenceRecord& rec = sequences[order[cursor++ % order.size()]];
      Tape tape;
      TapeScope scope(tape);
      const Tensor loss = scale(sequence_loss(rec, cfg, result.params, tc, rng), 1.0 / tc.grad_accum);
      tape.backward(loss);
      loss_sum += loss.item();
    }
    if (!std::isfinite(loss_sum)) throw NumericError("training: non-finite loss at step " + std::to_string(step));
    const double lr = cosine_lr(tc.schedule, step);
    adam_step(params, opt, lr);
    result.log.push_back({step, lr, loss_sum});
  }
  return result;
}

// Pipeline configuration <-> checkpoint metadata.

inline nlohmann::json grid_to_json(const GridSpec& g) {
  return {{"min", g.min_corner()}, {"max", g.max_corner()}, {"voxel", g.voxel_size()}};
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  return GridSpec(j.at("min").get<Vec3>(), j.at("max").get<Vec3>(), j.at("voxel").get<Vec3>());
}

inline nlohmann::json pipeline_to_json(const PipelineConfig& c) {
  return {{"num_past", c.num_past},
          {"num_future", c.num_future},
          {"frame_period", c.frame_period},
          {"channels", c.channels},
          {"encode_grid", grid_to_json(c.encode_grid)},
          {"output_grid", grid_to_json(c.output_grid)},
          {"bev_downsample", c.bev_downsample},
          {"leaky_slope", c.leaky_slope}};
}

inline PipelineConfig pipeline_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.num_past = j.at("num_past").get<std::size_t>();
  c.num_future = j.at("num_future").get<std::size_t>();
  c.frame_period = j.at("frame_period").get<double>();
  c.channels = j.at("channels").get<std::size_t>();
  c.encode_grid = grid_from_json(j.at("encode_grid"));
  c.output_grid = grid_from_json(j.at("output_grid"));
  c.bev_downsample = j.at("bev_downsample").get<std::size_t>();
  c.leaky_slope = j.at("leaky_slope").get<double>();
  return c;
}

inline void save_model(const std::filesystem::path& manifest_path, const PipelineConfig& cfg,
                       const ForecasterParams& params) {
  Checkpoint ckpt;
  ckpt.params = params.named();
  ckpt.metadata = {{"pipeline", pipeline_to_json(cfg)}};
  save_checkpoint(manifest_path, ckpt);
}

/// Loads parameters and rejects checkpoints trained under a different pipeline.
inline ForecasterParams load_model(const std::filesystem::path& manifest_path, const PipelineConfig& cfg) {
  const Checkpoint ckpt = load_checkpoint(manifest_path);
  if (ckpt.metadata.contains("pipeline")) {
    PipelineConfig stored;
    try {
      stored = pipeline_from_json(ckpt.metadata.at("pipeline"));
    } catch (const std::exception& e) {
      throw ParseError(manifest_path.string(), std::string("bad pipeline metadata: ") + e.what());
    }
    if (pipeline_to_json(stored) != pipeline_to_json(cfg))
      throw ParseError(manifest_path.string(), "checkpoint was trained with a different pipeline configuration");
  }
  try {
    return params_from_checkpoint(cfg, ckpt);
  } catch (const ContractViolation& e) {
    throw ParseError(manifest_path.string(), e.what());
  }
}

/// Sequence directories of a dataset: either the listing in dataset.json or
/// `dir` itself when it holds a single sequence.
inline std::vector<std::filesystem::path> dataset_sequences(const std::filesystem::path& dir) {
  if (std::filesystem::exists(dir / "manifest.json")) return {dir};
  const auto listing = dir / "dataset.json";
  std::ifstream in(listing);
  if (!in) throw IoError(listing.string(), "missing file");
  std::vector<std::filesystem::path> out;
  try {
    nlohmann::json j;
    in >> j;
    for (const auto& name : j.at("sequences")) out.push_back(dir / name.get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(listing.string(), std::string("malformed dataset listing: ") + e.what());
  }
  return out;
}

inline std::vector<SequenceRecord> load_dataset(const std::filesystem::path& dir) {
  std::vector<SequenceRecord> out;
  for (const auto& seq : dataset_sequences(dir)) out.push_back(read_sequence(seq));
  return out;
}

inline void write_loss_log(const std::filesystem::path& path, std::span<const LossLogEntry> log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << "step,lr,loss\n";
  for (const auto& e : log)
    out << e.step << "," << detail::format_double(e.lr) << "," << detail::format_double(e.loss) << "\n";
  if (!out) throw IoError(path.string(), "write failed");
}

/// Reads the dataset, trains, and writes `checkpoint.json`/`.bin` and `loss.csv` to out_dir.
inline TrainResult train_loop(const std::filesystem::path& dataset_dir, const PipelineConfig& cfg,
                              const TrainConfig& tc, std::uint64_t seed, const std::filesystem::path& out_dir) {
  const std::vector<SequenceRecord> data = load_dataset(dataset_dir);
  detail::require(!data.empty(), "training: dataset " + dataset_dir.string() + " has no sequences");
  TrainResult result = train_on(data, cfg, tc, seed);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());
  save_model(out_dir / "checkpoint.json", cfg, result.params);
  write_loss_log(out_dir / "loss.csv", result.log);
  return result;
}

}  // namespace occ4d
