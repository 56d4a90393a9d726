// Copyright 2026 The MergeBarrier Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// MBWT: a minimal little-endian container for named f64 tensors plus JSON
// metadata. Layout:
//   "MBWT" | u32 version | u32 flags | u32 tensor_count | u32 metadata_len
//   | metadata (UTF-8 JSON)
//   | per tensor: u16 name_len | name | u8 dtype (0 = f64) | u8 ndim
//                 | u64 dims[ndim] | row-major f64 payload
// Flag bit 0 marks a bundle that contains protected layers.

#ifndef MERGEBARRIER_WEIGHTS_IO_HPP
#define MERGEBARRIER_WEIGHTS_IO_HPP

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "mergebarrier/model.hpp"
#include "mergebarrier/protect.hpp"

namespace mb {

inline constexpr std::uint32_t kMbwtVersion = 1;
inline constexpr std::uint32_t kFlagProtected = 1u;

struct TensorFile {
  std::uint32_t flags = 0;
  nlohmann::json metadata = nlohmann::json::object();
  NamedTensors tensors;
};

/// Serializes in canonical (lexicographic) tensor order; metadata is dumped
/// compactly with sorted keys, so equal inputs give equal bytes.
std::string encode_mbwt(const TensorFile& f);
/// FormatError on bad magic/version/dtype, CorruptionError (with byte
/// offset) on truncation or trailing bytes.
TensorFile decode_mbwt(const std::string& bytes);

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ProtectionManifest& m);
ProtectionManifest manifest_from_json(const nlohmann::json& j);

struct ModelFile {
  ModelConfig config;
  ProtectedBundle bundle;
};

/// Metadata carries {"config", "manifest", "kind": "model"}.
void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ProtectedBundle& bundle);
void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const NamedTensors& w);
/// Re-validates tensors against the stored config; SchemaError on mismatch.
ModelFile load_model(const std::filesystem::path& path);

/// Projection plans as tensors "plan.{l}.{g}" with group metadata.
TensorFile plan_to_file(const ProjectionPlan& plan);
ProjectionPlan plan_from_file(const TensorFile& f);

}  // namespace mb

#endif  // MERGEBARRIER_WEIGHTS_IO_HPP
