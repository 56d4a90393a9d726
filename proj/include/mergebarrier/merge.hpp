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


// Task-vector merging: Task Arithmetic, TIES and DARE over NamedTensors.

#ifndef MERGEBARRIER_MERGE_HPP
#define MERGEBARRIER_MERGE_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mergebarrier/model.hpp"

namespace mb {

enum class MergeMethod { TASK_ARITHMETIC, TIES, DARE_TASK, DARE_TIES };
std::string to_string(MergeMethod m);
MergeMethod parse_merge_method(const std::string& name);
inline constexpr MergeMethod kAllMergeMethods[] = {MergeMethod::TASK_ARITHMETIC, MergeMethod::TIES,
                                                   MergeMethod::DARE_TASK, MergeMethod::DARE_TIES};

struct MergeConfig {
  MergeMethod method = MergeMethod::TASK_ARITHMETIC;
  double lambda = 1.0;
  double trim_keep_fraction = 0.2;  // TIES, in (0, 1]
  double drop_rate = 0.5;           // DARE, in [0, 1)
  std::uint64_t seed = 0;

  /// Throws ParameterError.
  void validate() const;
};

struct TaskVectorSet {
  NamedTensors base;
  std::vector<NamedTensors> deltas;
};

/// expert - base. Throws SchemaError naming every tensor that is missing,
/// extra or misshapen.
NamedTensors task_vector(const NamedTensors& base, const NamedTensors& expert);
TaskVectorSet make_task_vectors(const NamedTensors& base, const std::vector<NamedTensors>& experts);

/// base + lambda * sum(deltas).
NamedTensors merge_task_arithmetic(const TaskVectorSet& tv, const MergeConfig& mc);

/// Trim each delta per tensor to its top-k magnitudes, elect a sign per
/// coordinate (zero sum elects +), average the survivors that agree.
NamedTensors ties_merge(const TaskVectorSet& tv, const MergeConfig& mc);

/// Drops each entry with probability p and rescales survivors by 1/(1-p).
/// The mask bit of entry (r, c) of tensor `name` depends only on
/// (seed, name, r * cols + c).
NamedTensors dare_preprocess(const NamedTensors& delta, const MergeConfig& mc);

struct MergeReport {
  MergeConfig config;
  std::map<std::string, double> sparsity;  // zero fraction of the merged delta
};
nlohmann::json to_json(const MergeReport& r);

struct MergeResult {
  NamedTensors merged;
  MergeReport report;
};

/// Dispatches on mc.method. DARE variants drop with an independent stream
/// per delta, keyed by rng_word(seed, delta index).
MergeResult merge(const TaskVectorSet& tv, const MergeConfig& mc);

}  // namespace mb

#endif  // MERGEBARRIER_MERGE_HPP
