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

// Run configuration. One flat TOML file:
//
//   seed = 7
//   [pipeline]
//   channels = 8
//   [encode_grid]
//   min = [-32.0, -32.0, -3.0]
//
// Supported syntax is the subset the fields need: [section] headers,
// `key = value` with integers, floats, booleans and one-line numeric arrays,
// and `#` comments. Unknown sections or keys are errors.

#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <variant>
#include <vector>

#include "occ4d/data.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/forecast.hpp"
#include "occ4d/metrics.hpp"
#include "occ4d/train.hpp"

namespace occ4d {

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  // pipeline
  std::size_t num_past = 5;
  std::size_t num_future = 5;
  double frame_period = 0.6;
  std::size_t channels = 16;
  std::size_t bev_downsample = 2;
  double leaky_slope = 0.1;

  Vec3 encode_min{-32.0, -32.0, -3.0};
  Vec3 encode_max{32.0, 32.0, 5.0};
  Vec3 encode_voxel{1.0, 1.0, 1.0};
  Vec3 output_min{-32.0, -32.0, -3.0};
  Vec3 output_max{32.0, 32.0, 5.0};
  Vec3 output_voxel{1.0, 1.0, 1.0};

  // render
  double max_range = 50.0;

  // train
  std::size_t steps = 200;
  double lr_max = 0.001;
  double lr_min = 0.0;
  std::size_t rays_per_frame = 1024;
  std::size_t grad_accum = 1;

  // metrics
  double nfcd_radius = 35.0;

  // gen
  std::size_t num_sequences = 1;
  std::size_t num_boxes = 8;
  double scene_extent = 28.0;
  double max_box_speed = 3.0;
  double dynamic_fraction = 0.5;
  double ego_speed = 2.0;
  double sensor_height = 1.8;
  bool azimuth_jitter = false;

  // lidar
  std::size_t azimuth_count = 360;
  double elevation_min_deg = -15.0;
  double elevation_max_deg = 5.0;
  std::size_t elevation_count = 16;
  double lidar_range = 50.0;

  bool operator==(const RunConfig&) const = default;

  PipelineConfig pipeline() const {
    PipelineConfig p;
    p.num_past = num_past;
    p.num_future = num_future;
    p.frame_period = frame_period;
    p.channels = channels;
    p.encode_grid = GridSpec(encode_min, encode_max, encode_voxel);
    p.output_grid = GridSpec(output_min, output_max, output_voxel);
    p.bev_downsample = bev_downsample;
    p.leaky_slope = leaky_slope;
    return p;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.schedule = {lr_max, lr_min, steps};
    t.rays_per_frame = rays_per_frame;
    t.grad_accum = grad_accum;
    t.max_range = max_range;
    return t;
  }

  EvalConfig eval() const { return {max_range, nfcd_radius}; }

  GeneratorConfig generator() const {
    GeneratorConfig g;
    g.num_past = num_past;
    g.num_future = num_future;
    g.frame_period = frame_period;
    g.lidar.azimuth_count = azimuth_count;
    g.lidar.max_range = lidar_range;
    g.lidar.elevation_deg.clear();
    for (std::size_t i = 0; i < elevation_count; ++i) {
      const double f = elevation_count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(elevation_count - 1);
      g.lidar.elevation_deg.push_back(elevation_min_deg + f * (elevation_max_deg - elevation_min_deg));
    }
    g.azimuth_jitter = azimuth_jitter;
    g.num_boxes = num_boxes;
    g.scene_extent = scene_extent;
    g.max_box_speed = max_box_speed;
    g.dynamic_fraction = dynamic_fraction;
    g.ego_speed = ego_speed;
    g.sensor_height = sensor_height;
    return g;
  }
};

namespace config_detail {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed is stored through the size_t member path");
using Member = std::variant<std::size_t RunConfig::*, double RunConfig::*,
                            bool RunConfig::*, Vec3 RunConfig::*>;

struct Field {
  std::string section;  // empty for top-level keys
  std::string key;
  Member member;
  std::string doc;

  std::string path() const { return section.empty() ? key : section + "." + key; }
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"", "seed", &RunConfig::seed, "seed for generation, initialization and ray sampling"},
      {"", "threads", &RunConfig::threads, "worker thread cap (OCC4D_THREADS, --threads)"},
      {"pipeline", "num_past", &RunConfig::num_past, "past frames observed besides the current one"},
      {"pipeline", "num_future", &RunConfig::num_future, "future frames forecast"},
      {"pipeline", "frame_period", &RunConfig::frame_period, "seconds between frames"},
      {"pipeline", "channels", &RunConfig::channels, "feature width of the forecaster"},
      {"pipeline", "bev_downsample", &RunConfig::bev_downsample, "max-pool factor applied to the input BEV"},
      {"pipeline", "leaky_slope", &RunConfig::leaky_slope, "negative slope of leaky ReLU"},
      {"encode_grid", "min", &RunConfig::encode_min, "input voxel grid lower corner (m)"},
      {"encode_grid", "max", &RunConfig::encode_max, "input voxel grid upper corner (m)"},
      {"encode_grid", "voxel", &RunConfig::encode_voxel, "input voxel size (m)"},
      {"output_grid", "min", &RunConfig::output_min, "forecast grid lower corner (m)"},
      {"output_grid", "max", &RunConfig::output_max, "forecast grid upper corner (m)"},
      {"output_grid", "voxel", &RunConfig::output_voxel, "forecast voxel size (m)"},
      {"render", "max_range", &RunConfig::max_range, "ray length and background depth (m)"},
      {"train", "steps", &RunConfig::steps, "optimizer steps"},
      {"train", "lr_max", &RunConfig::lr_max, "peak learning rate"},
      {"train", "lr_min", &RunConfig::lr_min, "final learning rate"},
      {"train", "rays_per_frame", &RunConfig::rays_per_frame, "rays sampled per future frame (0 = all)"},
      {"train", "grad_accum", &RunConfig::grad_accum, "sequences per optimizer step"},
      {"metrics", "nfcd_radius", &RunConfig::nfcd_radius, "horizontal radius of the near-field crop (m)"},
      {"gen", "num_sequences", &RunConfig::num_sequences, "sequences written by gen"},
      {"gen", "num_boxes", &RunConfig::num_boxes, "boxes per scene"},
      {"gen", "scene_extent", &RunConfig::scene_extent, "boxes are placed within +-extent in x and y (m)"},
      {"gen", "max_box_speed", &RunConfig::max_box_speed, "upper bound of box speed (m/s)"},
      {"gen", "dynamic_fraction", &RunConfig::dynamic_fraction, "probability that a box moves"},
      {"gen", "ego_speed", &RunConfig::ego_speed, "ego speed along +x (m/s)"},
      {"gen", "sensor_height", &RunConfig::sensor_height, "sensor height above ground (m)"},
      {"gen", "azimuth_jitter", &RunConfig::azimuth_jitter, "random azimuth phase per frame"},
      {"lidar", "azimuth_count", &RunConfig::azimuth_count, "beams per revolution"},
      {"lidar", "elevation_min_deg", &RunConfig::elevation_min_deg, "lowest beam elevation"},
      {"lidar", "elevation_max_deg", &RunConfig::elevation_max_deg, "highest beam elevation"},
      {"lidar", "elevation_count", &RunConfig::elevation_count, "number of beams"},
      {"lidar", "range", &RunConfig::lidar_range, "maximum return range (m)"},
  };
  return table;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_number(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";  // keep floats recognizable as floats
  return s;
}

struct Scalar {
  bool is_integer = false;
  bool is_bool = false;
  double number = 0.0;
  std::uint64_t integer = 0;
  bool boolean = false;
};

inline Scalar parse_scalar(const std::string& text, const std::string& key, std::size_t line) {
  Scalar s;
  if (text == "true" || text == "false") {
    s.is_bool = true;
    s.boolean = text == "true";
    return s;
  }
  std::string digits;
  for (char c : text)
    if (c != '_') digits += c;
  if (digits.empty()) throw ConfigError(key, line, "missing value");
  const bool looks_integer = digits.find_first_of(".eE") == std::string::npos;
  if (looks_integer && digits[0] != '-') {
    const char* first = digits.data() + (digits[0] == '+' ? 1 : 0);
    auto [ptr, ec] = std::from_chars(first, digits.data() + digits.size(), s.integer);
    if (ec == std::errc() && ptr == digits.data() + digits.size()) {
      s.is_integer = true;
      s.number = static_cast<double>(s.integer);
      return s;
    }
  }
  const char* first = digits.data() + (digits[0] == '+' ? 1 : 0);
  auto [ptr, ec] = std::from_chars(first, digits.data() + digits.size(), s.number);
  if (ec != std::errc() || ptr != digits.data() + digits.size() || !std::isfinite(s.number))
    throw ConfigError(key, line, "cannot parse '" + text + "' as a number");
  return s;
}

inline void assign(RunConfig& cfg, const Field& field, const std::string& raw, std::size_t line) {
  const std::string key = field.path();
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, Vec3>) {
          if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']')
            throw ConfigError(key, line, "expected an array of 3 numbers");
          std::vector<std::string> parts;
          std::stringstream ss(raw.substr(1, raw.size() - 2));
          for (std::string item; std::getline(ss, item, ',');) parts.push_back(trim(item));
          if (!parts.empty() && parts.back().empty()) parts.pop_back();  // trailing comma
          if (parts.size() != 3) throw ConfigError(key, line, "expected an array of 3 numbers");
          Vec3 v{};
          for (std::size_t i = 0; i < 3; ++i) {
            const Scalar s = parse_scalar(parts[i], key, line);
            if (s.is_bool) throw ConfigError(key, line, "expected numbers, got a boolean");
            v[i] = s.number;
          }
          cfg.*member = v;
        } else {
          const Scalar s = parse_scalar(raw, key, line);
          if constexpr (std::is_same_v<T, bool>) {
            if (!s.is_bool) throw ConfigError(key, line, "expected true or false");
            cfg.*member = s.boolean;
          } else if constexpr (std::is_same_v<T, double>) {
            if (s.is_bool) throw ConfigError(key, line, "expected a number, got a boolean");
            cfg.*member = s.number;
          } else {
            if (!s.is_integer) throw ConfigError(key, line, "expected a non-negative integer");
            cfg.*member = static_cast<T>(s.integer);
          }
        }
      },
      field.member);
}

inline std::string value_string(const RunConfig& cfg, const Field& field) {
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        const auto& v = cfg.*member;
        if constexpr (std::is_same_v<T, Vec3>) {
          return "[" + format_number(v[0]) + ", " + format_number(v[1]) + ", " + format_number(v[2]) + "]";
        } else if constexpr (std::is_same_v<T, bool>) {
          return v ? "true" : "false";
        } else if constexpr (std::is_same_v<T, double>) {
          return format_number(v);
        } else {
          return std::to_string(v);
        }
      },
      field.member);
}

inline const Field* find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields())
    if (f.section == section && f.key == key) return &f;
  return nullptr;
}

}  // namespace config_detail

/// Throws ConfigError when the fields do not form a usable configuration.
inline void validate_config(const RunConfig& cfg) {
  try {
    validate_pipeline(cfg.pipeline());
    const TrainConfig t = cfg.train();
    cosine_lr(t.schedule, 0);
  } catch (const ContractViolation& e) {
    throw ConfigError("", 0, e.what());
  }
  if (cfg.threads < 1) throw ConfigError("threads", 0, "must be >= 1");
  if (cfg.grad_accum < 1) throw ConfigError("train.grad_accum", 0, "must be >= 1");
  if (!(cfg.max_range > 0.0)) throw ConfigError("render.max_range", 0, "must be positive");
  if (!(cfg.nfcd_radius > 0.0)) throw ConfigError("metrics.nfcd_radius", 0, "must be positive");
  if (cfg.azimuth_count < 1) throw ConfigError("lidar.azimuth_count", 0, "must be >= 1");
  if (cfg.elevation_count < 1) throw ConfigError("lidar.elevation_count", 0, "must be >= 1");
}

/// Applies `text` (TOML subset) on top of `base`.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::string section;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::size_t line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = config_detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("", line_no, "unterminated section header");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      bool known = false;
      for (const auto& f : config_detail::fields()) known = known || f.section == section;
      if (!known) throw ConfigError(section, line_no, "unknown section");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("", line_no, "expected 'key = value'");
    const std::string key = config_detail::trim(line.substr(0, eq));
    const std::string value = config_detail::trim(line.substr(eq + 1));
    const std::string path = section.empty() ? key : section + "." + key;
    const auto* field = config_detail::find_field(section, key);
    if (field == nullptr) throw ConfigError(path, line_no, "unknown key");
    if (!seen.insert(path).second) throw ConfigError(path, line_no, "duplicate key");
    config_detail::assign(base, *field, value, line_no);
  }
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string(), "missing or unreadable config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), base);
}

/// Applies a `section.key=value` override (flags win over the file).
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(assignment, 0, "override must look like section.key=value");
  const std::string path = config_detail::trim(assignment.substr(0, eq));
  const auto dot = path.rfind('.');
  const std::string section = dot == std::string::npos ? "" : path.substr(0, dot);
  const std::string key = dot == std::string::npos ? path : path.substr(dot + 1);
  const auto* field = config_detail::find_field(section, key);
  if (field == nullptr) throw ConfigError(path, 0, "unknown key");
  config_detail::assign(cfg, *field, config_detail::trim(assignment.substr(eq + 1)), 0);
}

/// Full configuration as TOML; parse_config(serialize_config(c)) reproduces c.
inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : config_detail::fields()) {
    if (f.section != section) {
      section = f.section;
      out += "\n[" + section + "]\n";
    }
    out += f.key + " = " + config_detail::value_string(cfg, f) + "\n";
  }
  return out;
}

/// One line per key: `section.key = default  # description`.
inline std::string describe_config_keys() {
  const RunConfig defaults;
  std::string out;
  for (const auto& f : config_detail::fields())
    out += "  " + f.path() + " = " + config_detail::value_string(defaults, f) + "  # " + f.doc + "\n";
  return out;
}

}  // namespace occ4d
