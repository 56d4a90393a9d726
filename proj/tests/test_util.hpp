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


// Shared fixtures for the unit tests.

#ifndef MERGEBARRIER_TESTS_UTIL_HPP
#define MERGEBARRIER_TESTS_UTIL_HPP

#include "mergebarrier/model.hpp"

namespace mb::testing {

/// Small GQA config that keeps finite-difference checks fast.
inline ModelConfig tiny_config(int heads = 2, int kv_heads = 1) {
  ModelConfig cfg;
  cfg.vocab = 20;
  cfg.dim = 8;
  cfg.n_layers = 2;
  cfg.n_heads = heads;
  cfg.n_kv_heads = kv_heads;
  cfg.ffn_dim = 6;
  cfg.seq_len = 8;
  return cfg;
}

/// Weights with O(1) entries, unlike the small training init, so gradients
/// and projections act on well-conditioned values.
inline NamedTensors random_weights(const ModelConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  NamedTensors w = init_model(cfg, seed);
  RngState rng{seed ^ 0x5eedULL, 0};
  for (auto& [name, m] : w) m = scale * gaussian(rng, m.rows(), m.cols());
  for (int l = 0; l < cfg.n_layers; ++l) w[layer_tensor(l, "norm.g")].array() += 1.0;
  return w;
}

inline Batch sample_batch(const ModelConfig& cfg, TaskKind kind, std::uint64_t seed, int n) {
  return gen_task(make_task(kind, cfg, seed), n);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace mb::testing

#endif  // MERGEBARRIER_TESTS_UTIL_HPP
