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

// Parameter checkpoints: a JSON manifest (names, shapes, blob file) next to a
// raw blob holding each parameter as little-endian float64, in manifest order.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occ4d/binio.hpp"
#include "occ4d/errors.hpp"
#include "occ4d/tensor.hpp"

namespace occ4d {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointFormat = "occ4d-checkpoint";

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Checkpoint {
  std::vector<NamedTensor> params;
  nlohmann::json metadata = nlohmann::json::object();
};

/// Writes `<manifest_path>` and its blob `<manifest_path stem>.bin`.
inline void save_checkpoint(const std::filesystem::path& manifest_path, const Checkpoint& ckpt) {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");

  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["version"] = kCheckpointVersion;
  manifest["blob"] = blob_path.filename().string();
  manifest["metadata"] = ckpt.metadata;
  manifest["params"] = nlohmann::json::array();
  binio::Writer blob;
  for (const auto& [name, t] : ckpt.params) {
    manifest["params"].push_back({{"name", name}, {"shape", t.shape()}});
    for (double v : t.data()) blob.f64(v);
  }
  blob.save(blob_path);
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError(manifest_path.string(), "cannot open for writing");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError(manifest_path.string(), "write failed");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw IoError(manifest_path.string(), "missing or unreadable file");
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string(), std::string("invalid JSON: ") + e.what());
  }
  try {
    if (manifest.at("format").get<std::string>() != kCheckpointFormat)
      throw ParseError(manifest_path.string(), "not a checkpoint manifest");
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion)
      throw ParseError(manifest_path.string(), "checkpoint version " + std::to_string(version) +
                                                   " unsupported (expected " +
                                                   std::to_string(kCheckpointVersion) + ")");
    auto reader = binio::Reader::open(manifest_path.parent_path() / manifest.at("blob").get<std::string>());
    Checkpoint ckpt;
    ckpt.metadata = manifest.value("metadata", nlohmann::json::object());
    for (const auto& entry : manifest.at("params")) {
      Shape shape = entry.at("shape").get<Shape>();
      std::vector<double> values(shape_numel(shape));
      for (double& v : values) v = reader.f64();
      ckpt.params.push_back({entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values))});
    }
    reader.expect_end();
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string(), std::string("malformed manifest: ") + e.what());
  }
}

}  // namespace occ4d
