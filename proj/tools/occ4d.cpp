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

// occ4d: generate synthetic sequences, train the forecaster, evaluate and
// render forecasts.
//
// Failures print one JSON line on stderr, {"error": <kind>, "message": ...},
// and exit with 2 (config), 3 (IO), 4 (numeric) or 1 (anything else).

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "occ4d/cli.hpp"
#include "occ4d/parallel.hpp"

namespace {

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

void add_common(CLI::App* cmd, CommonOptions& opts) {
  cmd->add_option("-c,--config", opts.config_path, "TOML run configuration");
  cmd->add_option("--set", opts.overrides, "override a config key: section.key=value (repeatable)");
  cmd->add_option("--seed", opts.seed, "override the config seed");
  cmd->add_option("--threads", opts.threads, "worker thread cap (default: OCC4D_THREADS or 1)");
  cmd->footer("Config keys (defaults):\n" + occ4d::describe_config_keys());
}

occ4d::RunConfig resolve(const CommonOptions& opts) {
  occ4d::RunConfig cfg;
  if (const char* env = std::getenv("OCC4D_THREADS")) occ4d::apply_override(cfg, std::string("threads=") + env);
  if (!opts.config_path.empty()) cfg = occ4d::load_config(opts.config_path, cfg);
  for (const auto& o : opts.overrides) occ4d::apply_override(cfg, o);
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.threads) cfg.threads = *opts.threads;
  occ4d::validate_config(cfg);
  occ4d::set_max_threads(cfg.threads);
  return cfg;
}

int fail(const char* kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

occ4d::EvalMode parse_mode(const std::string& mode) {
  if (mode == "model") return occ4d::EvalMode::kModel;
  if (mode == "oracle") return occ4d::EvalMode::kOracle;
  return occ4d::EvalMode::kEmpty;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occ4d: 4D occupancy forecasting from LiDAR sequences"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, render_opts;

  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen", "Generate synthetic LiDAR sequences");
  add_common(gen, gen_opts);
  gen->add_option("-o,--out", gen_out, "output dataset directory")->capture_default_str();

  std::string train_data = "data", train_out = "run";
  auto* train = app.add_subcommand("train", "Train the forecaster on a dataset");
  add_common(train, train_opts);
  train->add_option("-d,--data", train_data, "dataset directory")->capture_default_str();
  train->add_option("-o,--out", train_out, "output directory for checkpoint.json and loss.csv")
      ->capture_default_str();

  std::string eval_ckpt = "run/checkpoint.json", eval_data = "data", eval_json, eval_csv, eval_mode = "model";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint: L1, AbsRel, NFCD, CD");
  add_common(eval, eval_opts);
  eval->add_option("-k,--checkpoint", eval_ckpt, "checkpoint manifest")->capture_default_str();
  eval->add_option("-d,--data", eval_data, "dataset directory")->capture_default_str();
  eval->add_option("--json", eval_json, "also write the report JSON here")->capture_default_str();
  eval->add_option("--csv", eval_csv, "append a metrics row (l1,absrel,nfcd,cd,ray_count) here")
      ->capture_default_str();
  eval->add_option("--mode", eval_mode, "occupancy source: model, oracle (GT voxelization) or empty")
      ->check(CLI::IsMember({"model", "oracle", "empty"}))
      ->capture_default_str();

  std::string render_ckpt = "run/checkpoint.json", render_seq, render_out = "render", render_mode = "model";
  bool render_grids = false;
  auto* render = app.add_subcommand("render", "Render predicted depth and points for one sequence");
  add_common(render, render_opts);
  render->add_option("-k,--checkpoint", render_ckpt, "checkpoint manifest")->capture_default_str();
  render->add_option("-s,--sequence", render_seq, "sequence directory")->required();
  render->add_option("-o,--out", render_out, "output directory")->capture_default_str();
  render->add_flag("--dump-grids", render_grids, "also write occupancy probabilities as .o4dg");
  render->add_option("--mode", render_mode, "occupancy source: model, oracle or empty")
      ->check(CLI::IsMember({"model", "oracle", "empty"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return fail("usage", e.what(), occ4d::kExitConfig);
  }

  try {
    if (*gen) {
      const auto cfg = resolve(gen_opts);
      const auto dirs = occ4d::cmd_gen(cfg, gen_out);
      std::cout << "wrote " << dirs.size() << " sequence(s) to " << gen_out << "\n";
    } else if (*train) {
      const auto cfg = resolve(train_opts);
      const auto result = occ4d::cmd_train(cfg, train_data, train_out);
      if (!result.log.empty())
        std::cout << "steps " << result.log.size() << "  loss " << result.log.front().loss << " -> "
                  << result.log.back().loss << "\n";
      std::cout << "checkpoint " << (std::filesystem::path(train_out) / "checkpoint.json").string() << "\n";
    } else if (*eval) {
      const auto cfg = resolve(eval_opts);
      const auto report = occ4d::cmd_eval(cfg, eval_ckpt, eval_data, parse_mode(eval_mode));
      const std::string text = report.to_json().dump(2);
      std::cout << text << "\n";
      if (!eval_json.empty()) occ4d::write_json_file(eval_json, report.to_json());
      if (!eval_csv.empty()) occ4d::append_metrics_csv(eval_csv, report);
    } else if (*render) {
      const auto cfg = resolve(render_opts);
      const auto summary =
          occ4d::cmd_render(cfg, render_ckpt, render_seq, render_out, render_grids, parse_mode(render_mode));
      for (std::size_t t = 0; t < summary.rays_per_frame.size(); ++t)
        std::cout << "frame " << t << ": " << summary.rays_per_frame[t] << " rays, "
                  << summary.points_per_frame[t] << " points\n";
    }
  } catch (const occ4d::ConfigError& e) {
    return fail("config", e.what(), occ4d::kExitConfig);
  } catch (const occ4d::IoError& e) {
    return fail("io", e.what(), occ4d::kExitIo);
  } catch (const occ4d::NumericError& e) {
    return fail("numeric", e.what(), occ4d::kExitNumeric);
  } catch (const std::exception& e) {
    return fail("internal", e.what(), occ4d::kExitFailure);
  }
  return occ4d::kExitOk;
}
