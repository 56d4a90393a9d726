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


#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "mergebarrier/attack.hpp"
#include "mergebarrier/errors.hpp"
#include "test_util.hpp"

using namespace mb;
using namespace mb::testing;

namespace {

// Minimum-cost assignment by enumerating every permutation.
std::vector<int> brute_force_assignment(const Matrix& a, const Matrix& b) {
  std::vector<int> perm(static_cast<std::size_t>(a.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i)
      cost += (a.row(static_cast<Eigen::Index>(i)) - b.row(perm[i])).squaredNorm();
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("params transform preserves the function") {
  for (auto [heads, kv] : {std::pair{2, 1}, std::pair{2, 2}, std::pair{4, 2}}) {
    ModelConfig cfg = tiny_config(heads, kv);
    cfg.dim = 16;
    const NamedTensors w = random_weights(cfg, 11);
    const auto [pw, keys] = params_transform(cfg, w, 5, 0.5, 2.0);
    CHECK(pw.at("layer.0.ffn.w1") != w.at("layer.0.ffn.w1"));
    CHECK(keys.perms.size() == 2);
    CHECK(keys.scales.a[0].size() == static_cast<std::size_t>(kv));
    const Batch b = sample_batch(cfg, TaskKind::COPY, 3, 8);
    CHECK(max_abs_diff(forward(cfg, w, b).logits, forward(cfg, pw, b).logits) < 1e-9);
    for (const auto& layer : keys.scales.a)
      for (const auto& s : layer) CHECK((s.minCoeff() >= 0.5 && s.maxCoeff() <= 2.0));
  }
}

TEST_CASE("noiseless decode recovers keys and weights") {
  const ModelConfig cfg = tiny_config(2, 1);
  const NamedTensors w = random_weights(cfg, 4);
  const auto [pw, keys] = params_transform(cfg, w, 9, 0.25, 4.0);
  const DecodeResult d = params_decode(cfg, pw, w);
  const AttackReport rep = score_keys(keys, d.keys);
  CHECK(rep.recovered_fraction == 1.0);
  CHECK(rep.max_scale_error < 1e-12);
  for (const auto& [name, m] : w) CHECK(max_abs_diff(d.weights.at(name), m) < 1e-12);
  CHECK(max_abs_diff(undo_params(cfg, pw, keys).at("layer.1.attn.wo"), w.at("layer.1.attn.wo")) < 1e-12);
}

TEST_CASE("decode against a nearby base still finds the permutation") {
  const ModelConfig cfg = tiny_config(2, 1);
  const NamedTensors w = random_weights(cfg, 4);
  NamedTensors base = w;
  RngState rng{77, 0};
  for (auto& [name, m] : base) m += 0.01 * gaussian(rng, m.rows(), m.cols());
  const auto [pw, keys] = params_transform(cfg, w, 9, 0.5, 2.0);
  const AttackReport rep = score_keys(keys, params_decode(cfg, pw, base).keys);
  CHECK(rep.recovered_fraction == 1.0);
  CHECK(rep.max_scale_error < 0.1);
}

TEST_CASE("greedy matching agrees with the optimal assignment on separated rows") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngState rng{seed, 0};
    const Matrix base = gaussian(rng, 6, 5);
    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[next_u64(rng) % i]);
    Matrix prot(6, 5);
    for (int i = 0; i < 6; ++i) prot.row(i) = base.row(perm[static_cast<std::size_t>(i)]);
    prot += 0.05 * gaussian(rng, 6, 5);
    const std::vector<int> got = recover_permutation(prot, base);
    CHECK(got == brute_force_assignment(prot, base));
    CHECK(got == perm);
  }
  CHECK_THROWS_AS(recover_permutation(Matrix::Zero(3, 2), Matrix::Zero(2, 3)), DimensionError);
}

TEST_CASE("greedy ties resolve to the lowest index") {
  Matrix base(3, 1), prot(2, 1);
  base << 1.0, -1.0, 1.0;
  prot << 0.0, 1.0;
  prot.conservativeResize(3, 1);
  prot(2, 0) = 5.0;
  CHECK(recover_permutation(prot, base) == std::vector<int>{0, 0, 0});
}

TEST_CASE("scale recovery uses the median of usable ratios") {
  const ModelConfig cfg = tiny_config(2, 1);
  NamedTensors w = random_weights(cfg, 3);
  // Zero one feature column of every query head in layer 0 so only the
  // value path remains estimable there.
  const int hd = cfg.head_dim();
  Matrix& wq = w.at("layer.0.attn.wq");
  for (int h = 0; h < cfg.n_heads; ++h) wq.col(h * hd + 1).setZero();
  const auto [pw, keys] = params_transform(cfg, w, 2, 0.5, 2.0);
  CHECK_THROWS_WITH_AS(recover_scaling(cfg, pw, w), "unrecoverable query scale at (layer 0, head 0, row 1)",
                       InputError);
  CHECK_THROWS_AS(recover_scaling(cfg, pw, w, -1.0), ParameterError);
}

TEST_CASE("transform parameter errors") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = random_weights(cfg, 3);
  CHECK_THROWS_AS(params_transform(cfg, w, 1, 0.0, 1.0), ParameterError);
  CHECK_THROWS_AS(params_transform(cfg, w, 1, 2.0, 1.0), ParameterError);
  const auto [pw, keys] = params_transform(cfg, w, 1, 1.0, 1.0);
  for (const auto& layer : keys.scales.b)
    for (const auto& s : layer) CHECK(s.isOnes(0.0));
}

TEST_CASE("reverting restores base tensors and updates the manifest") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors base = random_weights(cfg, 1, 0.1);
  const NamedTensors expert = random_weights(cfg, 2, 0.1);
  const ProtectResult pr = protect_model(cfg, expert, make_task(TaskKind::COPY, cfg, 1), ProtectConfig{});

  const ProtectedBundle ffn = revert_modified_layers(cfg, pr.bundle, base, RevertScope::FFN_ONLY);
  CHECK_NOTHROW(validate_weights(cfg, ffn.tensors));
  CHECK(ffn.manifest.taylor_layers.empty());
  CHECK(ffn.manifest.projected_layers == std::vector<int>{0, 1});
  CHECK(ffn.tensors.at("layer.0.ffn.w2") == base.at("layer.0.ffn.w2"));
  CHECK(ffn.tensors.at("layer.0.attn.wq") == pr.bundle.tensors.at("layer.0.attn.wq"));
  CHECK(ffn.tensors.at("embed.tok") == expert.at("embed.tok"));

  const ProtectedBundle all = revert_modified_layers(cfg, pr.bundle, base, RevertScope::ALL);
  CHECK(all.manifest.empty());
  CHECK(all.manifest.flip_fraction == 0.0);
  CHECK(all.tensors.at("layer.1.attn.wk") == base.at("layer.1.attn.wk"));
  CHECK(all.tensors.at("layer.1.attn.wv") == expert.at("layer.1.attn.wv"));
  CHECK(all.tensors.size() == expert.size());
}

TEST_CASE("finetune attack records accuracy on its interval") {
  const ModelConfig cfg = tiny_config();
  const TaskSpec task = make_task(TaskKind::COPY, cfg, 2);
  TrainConfig tc;
  tc.steps = 120;
  tc.batch_size = 8;
  const FinetuneAttackResult r = finetune_attack(cfg, init_model(cfg, 1), task, tc, gen_task(task, 32));
  std::vector<int> steps;
  for (const auto& [s, acc] : r.accuracy_curve) {
    steps.push_back(s);
    CHECK((acc >= 0.0 && acc <= 1.0));
  }
  CHECK(steps == std::vector<int>{0, 50, 100, 120});
}
