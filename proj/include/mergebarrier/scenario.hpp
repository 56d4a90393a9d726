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


// End-to-end desk-scale scenario: base, two experts, protection of expert A,
// merges and attacks, LMC diagnostics and a canonical JSON report.

#ifndef MERGEBARRIER_SCENARIO_HPP
#define MERGEBARRIER_SCENARIO_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergebarrier/model.hpp"

namespace mb {

/// Flat, documented knobs. Every key is reachable through set().
struct ScenarioConfig {
  std::uint64_t seed = 7;

  ModelConfig model{};

  // Base pretraining mixture: REVERSE over all values, plus optional COPY on
  // task A's value range and MOD_ADD on task B's value range.
  int base_steps = 3000;
  double base_lr = 3e-3;
  double base_weight_decay = 1.0;
  int pretrain_reverse_alphabet = 15;
  int pretrain_copy_alphabet = 7;  // 0 disables
  int pretrain_add_modulus = 8;    // 0 disables

  int expert_steps = 800;
  double expert_lr = 1e-3;
  double expert_weight_decay = 1.0;
  /// Experts also rehearse the pretraining mixture (round robin with their task).
  bool expert_replay = false;
  /// Expert weight decay pulls toward the base instead of zero.
  bool expert_decay_to_base = false;
  Optimizer expert_optimizer = Optimizer::ADAM;
  /// Comma-separated tensor name prefixes held fixed while training experts.
  std::string expert_frozen;
  int batch_size = 32;

  // Expert A: MOD_ADD on values [0, a_modulus). Expert B: COPY on values
  // [b_offset, b_offset + b_alphabet).
  int a_modulus = 7;
  int b_alphabet = 8;
  int b_offset = 7;

  double rho = 0.5;
  int taylor_order = 8;
  int rsvd_rank = 0;
  int calibration_samples = 256;
  bool project_attention = true;
  bool reparameterize_ffn = true;

  double trim = 0.2;
  double drop = 0.5;
  std::vector<double> lambdas{0.3, 0.5, 0.7, 0.9, 1.0};

  int curve_steps = 21;
  int landscape_steps = 25;
  double landscape_margin = 0.2;
  bool landscape_embeddings = false;

  double epsilon = 0.05;
  int sharpness_samples = 8;
  int ascent_steps = 3;

  int attack_steps = 500;
  double attack_lr = 1e-3;
  int attack_pool = 64;

  /// Throws ParameterError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  /// Every key with its current value, in canonical order.
  std::map<std::string, std::string> entries() const;
  void validate() const;
};

/// `key = value` lines, `#` comments, blank lines ignored.
std::map<std::string, std::string> parse_kv_config(const std::string& text);

/// Task definitions derived from the config.
TaskSpec scenario_task_a(const ScenarioConfig& sc);
TaskSpec scenario_task_b(const ScenarioConfig& sc);

/// Artifact names written by the training stage.
inline constexpr const char* kBaseArtifact = "base.mbwt";
inline constexpr const char* kExpertAArtifact = "expert_a.mbwt";
inline constexpr const char* kExpertBArtifact = "expert_b.mbwt";

/// Trains base and experts and writes them to `dir`.
void scenario_train(const ScenarioConfig& sc, const std::filesystem::path& dir);

/// Runs everything after training on the artifacts in `dir`, writes the
/// protected bundle, curves, landscape and report.json, and returns the
/// report. Throws StagingError naming the first missing artifact.
nlohmann::json scenario_evaluate(const ScenarioConfig& sc, const std::filesystem::path& dir);

/// scenario_train followed by scenario_evaluate.
nlohmann::json scenario_run(const ScenarioConfig& sc, const std::filesystem::path& dir);

/// Canonical serialization: sorted keys, two-space indent, trailing newline.
std::string canonical_json(const nlohmann::json& j);

}  // namespace mb

#endif  // MERGEBARRIER_SCENARIO_HPP
