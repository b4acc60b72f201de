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

// Implementations behind the `occ4d` subcommands. Each returns its primary
// result so it can be driven from tests as well as from tools/occ4d.cpp.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occ4d/config.hpp"
#include "occ4d/data.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/forecast.hpp"
#include "occ4d/metrics.hpp"
#include "occ4d/render.hpp"
#include "occ4d/train.hpp"
#include "occ4d/voxel.hpp"

namespace occ4d {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitConfig = 2, kExitIo = 3, kExitNumeric = 4 };

/// splitmix64; derives independent per-sequence seeds from the run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string sequence_dir_name(std::size_t i) {
  std::ostringstream s;
  s << "seq_" << std::setw(4) << std::setfill('0') << i;
  return s.str();
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path.string(), "cannot open for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError(path.string(), "write failed");
}

/// Writes cfg.num_sequences random sequences and a dataset.json listing.
inline std::vector<std::filesystem::path> cmd_gen(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  validate_config(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec || !std::filesystem::is_directory(out_dir)) throw IoError(out_dir.string(), "cannot create directory");
  const GeneratorConfig gen = cfg.generator();
  std::vector<std::filesystem::path> written;
  nlohmann::json listing = {{"format", "occ4d-dataset"}, {"version", 1}, {"seed", cfg.seed}};
  listing["sequences"] = nlohmann::json::array();
  for (std::size_t i = 0; i < cfg.num_sequences; ++i) {
    const std::uint64_t seq_seed = derive_seed(cfg.seed, i);
    const Scene scene = random_scene(gen, seq_seed);
    const SequenceRecord rec = generate_sequence(scene, gen, seq_seed);
    const auto dir = out_dir / sequence_dir_name(i);
    write_sequence(rec, dir);
    listing["sequences"].push_back(sequence_dir_name(i));
    written.push_back(dir);
  }
  write_json_file(out_dir / "dataset.json", listing);
  return written;
}

inline TrainResult cmd_train(const RunConfig& cfg, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_dir) {
  validate_config(cfg);
  return train_loop(data_dir, cfg.pipeline(), cfg.train(), cfg.seed, out_dir);
}

/// What produces the occupancy being scored.
enum class EvalMode {
  kModel,   // the checkpointed forecaster
  kOracle,  // voxelized ground-truth future clouds
  kEmpty,   // all-empty grids: every ray renders the background depth
};

/// Forecast for one sequence under `mode`.
inline OccupancyForecast forecast_for(const SequenceRecord& rec, const RunConfig& cfg, EvalMode mode,
                                      const ForecasterParams* params) {
  const PipelineConfig pc = cfg.pipeline();
  if (mode == EvalMode::kModel) {
    detail::require(params != nullptr, "eval: model mode needs parameters");
    NoGradScope no_grad;
    const auto inputs = aligned_inputs(rec);
    return forecast_from_clouds(inputs, pc, *params);
  }
  OccupancyForecast f;
  f.frame_period = rec.frame_period;
  for (std::size_t t = 0; t < rec.num_future; ++t) {
    const std::size_t k = rec.current_index() + 1 + t;
    if (mode == EvalMode::kOracle) {
      f.frames.push_back(voxelize(align_to_current(rec.clouds[k], rec.poses[k], rec.current_pose()), pc.output_grid).grid);
    } else {
      f.frames.push_back({pc.output_grid, Tensor(pc.output_grid.shape()), GridKind::kProbability});
    }
  }
  return f;
}

/// Scores every sequence of the dataset. L1 and AbsRel are ray-weighted
/// across sequences; CD is averaged over sequences and NFCD over the
/// sequences where it is defined.
inline MetricsReport cmd_eval(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                              const std::filesystem::path& data_dir, EvalMode mode = EvalMode::kModel) {
  validate_config(cfg);
  const PipelineConfig pc = cfg.pipeline();
  ForecasterParams params;
  if (mode == EvalMode::kModel) params = load_model(checkpoint, pc);
  const auto sequences = dataset_sequences(data_dir);
  detail::require(!sequences.empty(), "eval: dataset has no sequences");
  MetricsReport total;
  double l1_sum = 0.0, absrel_sum = 0.0;
  std::size_t nfcd_sequences = 0;
  for (const auto& dir : sequences) {
    const SequenceRecord rec = read_sequence(dir);
    const OccupancyForecast forecast = forecast_for(rec, cfg, mode, &params);
    const auto frames = future_frames(rec, pc.output_grid, cfg.max_range);
    const MetricsReport r = evaluate(forecast, frames, cfg.eval());
    l1_sum += r.l1 * static_cast<double>(r.ray_count);
    absrel_sum += r.absrel * static_cast<double>(r.ray_count);
    total.cd += r.cd;
    if (r.has_nfcd()) {
      total.nfcd += r.nfcd;
      total.nfcd_frames += r.nfcd_frames;
      ++nfcd_sequences;
    }
    total.ray_count += r.ray_count;
    total.predicted_points += r.predicted_points;
    total.gt_points += r.gt_points;
  }
  const double n = static_cast<double>(sequences.size());
  total.l1 = l1_sum / static_cast<double>(total.ray_count);
  total.absrel = absrel_sum / static_cast<double>(total.ray_count);
  total.cd /= n;
  if (nfcd_sequences > 0) total.nfcd /= static_cast<double>(nfcd_sequences);
  validate_report(total);
  return total;
}

/// Appends `report` as a CSV row, writing the header when the file is new.
inline void append_metrics_csv(const std::filesystem::path& path, const MetricsReport& report) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError(path.string(), "cannot open for appending");
  if (fresh) out << MetricsReport::kCsvHeader << "\n";
  out << report.csv_row() << "\n";
  if (!out) throw IoError(path.string(), "write failed");
}

struct RenderSummary {
  std::vector<std::size_t> rays_per_frame;
  std::vector<std::size_t> points_per_frame;
};

/// Per future frame: frame_<t>.csv (ray, ground truth, predicted depth and
/// point), frame_<t>.o4dp (predicted points) and optionally frame_<t>.o4dg
/// (occupancy probabilities).
inline RenderSummary cmd_render(const RunConfig& cfg, const std::filesystem::path& checkpoint,
                                const std::filesystem::path& sequence_dir, const std::filesystem::path& out_dir,
                                bool dump_grids = false, EvalMode mode = EvalMode::kModel) {
  validate_config(cfg);
  const PipelineConfig pc = cfg.pipeline();
  ForecasterParams params;
  if (mode == EvalMode::kModel) params = load_model(checkpoint, pc);
  const SequenceRecord rec = read_sequence(sequence_dir);
  const OccupancyForecast forecast = forecast_for(rec, cfg, mode, &params);
  const auto frames = future_frames(rec, pc.output_grid, cfg.max_range);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());

  NoGradScope no_grad;
  RenderSummary summary;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    std::vector<FrameRay> batch;
    for (const auto& r : frames[t].rays) batch.push_back({t, r});
    const Tensor depths = batch.empty() ? Tensor(Shape{0}) : render_batch(forecast, batch, cfg.max_range);
    const std::string stem = "frame_" + std::to_string(t);
    std::ofstream csv(out_dir / (stem + ".csv"), std::ios::trunc);
    if (!csv) throw IoError((out_dir / (stem + ".csv")).string(), "cannot open for writing");
    csv << "ox,oy,oz,dx,dy,dz,gt_depth,pred_depth,px,py,pz\n";
    PointCloud predicted;
    predicted.timestamp = frames[t].gt_cloud.timestamp;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const QueryRay& r = batch[i].ray;
      const double d = depths.data()[i];
      const Vec3 p = r.at(d);
      predicted.points.push_back(p);
      for (double v : {r.origin[0], r.origin[1], r.origin[2], r.direction[0], r.direction[1], r.direction[2],
                       r.gt_depth, d, p[0], p[1]})
        csv << detail::format_double(v) << ",";
      csv << detail::format_double(p[2]) << "\n";
    }
    if (!csv) throw IoError((out_dir / (stem + ".csv")).string(), "write failed");
    write_points(out_dir / (stem + ".o4dp"), predicted);
    if (dump_grids) {
      const OccupancyGrid& g = forecast.frames[t];
      OccupancyGrid probs = g.kind == GridKind::kLogit ? OccupancyGrid{g.spec, sigmoid(g.values), GridKind::kProbability} : g;
      write_grid(out_dir / (stem + ".o4dg"), probs);
    }
    summary.rays_per_frame.push_back(batch.size());
    summary.points_per_frame.push_back(predicted.size());
  }
  return summary;
}

}  // namespace occ4d
