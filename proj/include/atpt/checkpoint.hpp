// Copyright 2026 The atpt Authors
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

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "atpt/model.hpp"
#include "atpt/tensor.hpp"

namespace atpt {

using Json = nlohmann::json;

/// Named tensors plus an opaque JSON config block.
///
/// Layout, little-endian:
///   "ATPTCKPT" | u32 config bytes | config JSON | u32 tensor count |
///   per tensor: u32 name bytes | name | u32 rank | u64 extents... | f64 data...
struct TensorArchive {
  Json config = Json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(const std::string& name) const;
};

void write_archive(const std::string& path, const TensorArchive& archive);
TensorArchive read_archive(const std::string& path);

/// FNV-1a over a file's bytes, as 16 hex digits.
std::string file_hash(const std::string& path);
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);

Json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const Json& j);

/// Writes `path` and `path + ".json"` (manifest: config, tau, extra fields).
void save_model(const std::string& path, const Model& model, const Json& manifest_extra = {});
Model load_model(const std::string& path);

Json read_json(const std::string& path);
void write_json(const std::string& path, const Json& j);

}  // namespace atpt
