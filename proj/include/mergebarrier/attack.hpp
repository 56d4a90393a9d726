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


// Adversary toolbox: the permutation/scaling protection used as a foil, its
// decode attack, layer reversion, and fine-tuning of merged models.

#ifndef MERGEBARRIER_ATTACK_HPP
#define MERGEBARRIER_ATTACK_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mergebarrier/model.hpp"
#include "mergebarrier/protect.hpp"

namespace mb {

/// Attention scales, one vector of length head_dim per (layer, kv head).
/// Query heads sharing a kv head share its scales, otherwise the score
/// product would not cancel.
struct AttentionScales {
  std::vector<std::vector<RowVector>> a;  // query/key
  std::vector<std::vector<RowVector>> b;  // value/output
};

struct ParamsKeys {
  /// perms[l][i] = index of the original hidden unit now stored at slot i.
  std::vector<std::vector<int>> perms;
  AttentionScales scales;
};

/// Permutes FFN hidden units and rescales attention heads. Function
/// preserving. Throws ParameterError unless 0 < s_min <= s_max.
std::pair<NamedTensors, ParamsKeys> params_transform(const ModelConfig& cfg, const NamedTensors& w,
                                                     std::uint64_t seed, double s_min, double s_max);

/// Greedy nearest row: result[i] = argmin_j ||protected.row(i) - base.row(j)||,
/// ties to the lowest j. Callers pass hidden units as rows.
std::vector<int> recover_permutation(const Matrix& w1_protected, const Matrix& w1_base);

/// Median over entries with |base| > tau of protected / base, per feature
/// column of each (layer, kv head). Throws InputError naming (layer, head,
/// row) when a feature has no usable entry.
AttentionScales recover_scaling(const ModelConfig& cfg, const NamedTensors& attn_protected,
                                const NamedTensors& attn_base, double tau = 1e-8);

/// Inverts params_transform given (possibly recovered) keys.
NamedTensors undo_params(const ModelConfig& cfg, const NamedTensors& w, const ParamsKeys& keys);

struct DecodeResult {
  NamedTensors weights;
  ParamsKeys keys;
};

/// Full decode against a reference model (the base, or in the noiseless
/// setting the pre-protection weights).
DecodeResult params_decode(const ModelConfig& cfg, const NamedTensors& w_protected, const NamedTensors& reference,
                           double tau = 1e-8);

struct AttackReport {
  double recovered_fraction = 0.0;
  double max_scale_error = 0.0;
  double post_attack_accuracy = 0.0;
};
nlohmann::json to_json(const AttackReport& r);

/// Fraction of correctly recovered permutation slots and the largest
/// absolute scale error.
AttackReport score_keys(const ParamsKeys& truth, const ParamsKeys& recovered);

enum class RevertScope { ALL, FFN_ONLY };

/// Replaces every Taylor FFN (and, for ALL, every projected attention
/// layer's wq/wk) with the base model's tensors. The result carries the
/// manifest of what is still protected.
ProtectedBundle revert_modified_layers(const ModelConfig& cfg, const ProtectedBundle& bundle,
                                       const NamedTensors& base, RevertScope scope = RevertScope::ALL);

struct FinetuneAttackResult {
  NamedTensors weights;
  std::vector<std::pair<int, double>> accuracy_curve;  // (step, accuracy)
};

inline constexpr int kAttackEvalInterval = 50;

/// Resumes training from merged weights; accuracy on `eval` every 50 steps
/// and at the end.
FinetuneAttackResult finetune_attack(const ModelConfig& cfg, const NamedTensors& w_merged, const TaskSpec& task,
                                     const TrainConfig& budget, const Batch& eval);

}  // namespace mb

#endif  // MERGEBARRIER_ATTACK_HPP
