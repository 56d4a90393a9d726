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

#include <set>

#include "mergebarrier/errors.hpp"
#include "mergebarrier/model.hpp"
#include "mergebarrier/protect.hpp"
#include "test_util.hpp"

using namespace mb;
using namespace mb::testing;

namespace {

// Central-difference check of every entry of every tensor in `names`.
void check_gradients(const ModelConfig& cfg, NamedTensors w, const Batch& batch,
                     const std::vector<std::string>& names) {
  const LossAndGrad lg = loss_and_grad(cfg, w, batch);
  CHECK(lg.loss == doctest::Approx(loss(cfg, w, batch)).epsilon(1e-14));
  const double h = 1e-5;
  for (const auto& name : names) {
    CAPTURE(name);
    Matrix& m = w.at(name);
    const Matrix& g = lg.grads.at(name);
    REQUIRE(g.rows() == m.rows());
    REQUIRE(g.cols() == m.cols());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double keep = m.data()[i];
      m.data()[i] = keep + h;
      const double up = loss(cfg, w, batch);
      m.data()[i] = keep - h;
      const double down = loss(cfg, w, batch);
      m.data()[i] = keep;
      const double fd = (up - down) / (2 * h);
      worst = std::max(worst, std::abs(fd - g.data()[i]) / std::max(1.0, std::abs(fd)));
    }
    CHECK(worst < 1e-6);
  }
}

}  // namespace

TEST_CASE("schema and validation") {
  const ModelConfig cfg = tiny_config();
  NamedTensors w = init_model(cfg, 1);
  CHECK_NOTHROW(validate_weights(cfg, w));
  CHECK(w.at("layer.0.attn.wq").cols() == 8);
  CHECK(w.at("layer.0.attn.wk").cols() == 4);
  CHECK(parameter_count(w) == 20 * 8 + 8 * 8 + 8 * 20 + 2 * (8 * 8 + 8 * 4 * 2 + 8 * 8 + 8 + 8 * 6 + 6 + 6 * 8 + 8));

  NamedTensors missing = w;
  missing.erase("head.w");
  CHECK_THROWS_AS(validate_weights(cfg, missing), SchemaError);
  NamedTensors extra = w;
  extra["bogus"] = Matrix::Zero(1, 1);
  CHECK_THROWS_AS(validate_weights(cfg, extra), SchemaError);
  NamedTensors wrong = w;
  wrong["embed.pos"] = Matrix::Zero(3, 3);
  CHECK_THROWS_AS(validate_weights(cfg, wrong), SchemaError);

  ModelConfig bad = cfg;
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = cfg;
  bad.n_kv_heads = 2;
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("init is deterministic per seed") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors a = init_model(cfg, 5), b = init_model(cfg, 5), c = init_model(cfg, 6);
  for (const auto& [name, m] : a) CHECK(m == b.at(name));
  CHECK(a.at("head.w") != c.at("head.w"));
}

TEST_CASE("mod_add sequences are correct and respect the value offset") {
  const ModelConfig cfg = tiny_config();
  TaskSpec t = make_task(TaskKind::MOD_ADD, cfg, 3);
  t.modulus = 5;
  t.value_offset = 4;
  const Batch b = gen_task(t, 200);
  const TokenLayout layout{cfg.vocab};
  std::set<int> answers;
  for (Eigen::Index i = 0; i < b.size(); ++i) {
    const int x = b.tokens(i, 0) - 4, y = b.tokens(i, 1) - 4;
    REQUIRE(x >= 0);
    REQUIRE(x < 5);
    REQUIRE(y >= 0);
    REQUIRE(y < 5);
    CHECK(b.tokens(i, 2) == layout.eq());
    CHECK(b.tokens(i, 3) == (x + y) % 5 + 4);
    CHECK(b.targets(i, 2) == b.tokens(i, 3));
    for (Eigen::Index s = 0; s < b.seq_len(); ++s) CHECK(b.loss_mask(i, s) == (s == 2));
    for (Eigen::Index s = 4; s < b.seq_len(); ++s) CHECK(b.tokens(i, s) == layout.pad());
    answers.insert(b.tokens(i, 3));
  }
  CHECK(answers.size() == 5);
  CHECK(t.chance() == doctest::Approx(0.2));
}

TEST_CASE("copy and reverse sequences") {
  const ModelConfig cfg = tiny_config();
  const TokenLayout layout{cfg.vocab};
  for (TaskKind kind : {TaskKind::COPY, TaskKind::REVERSE}) {
    TaskSpec t = make_task(kind, cfg, 9);
    t.alphabet = 6;
    t.value_offset = 2;
    const Batch b = gen_task(t, 50);
    for (Eigen::Index i = 0; i < b.size(); ++i) {
      CHECK(b.tokens(i, 0) == (kind == TaskKind::COPY ? layout.copy_marker() : layout.reverse_marker()));
      CHECK(b.tokens(i, 4) == layout.sep());
      for (int k = 0; k < 3; ++k) {
        const int src = b.tokens(i, 1 + k);
        CHECK(src >= 2);
        CHECK(src < 8);
        const int dst = b.tokens(i, kind == TaskKind::COPY ? 5 + k : 7 - k);
        CHECK(dst == src);
      }
      for (Eigen::Index s = 0; s < b.seq_len(); ++s) CHECK(b.loss_mask(i, s) == (s >= 4 && s < 7));
    }
  }
}

TEST_CASE("task generation is seeded and validates its ranges") {
  const ModelConfig cfg = tiny_config();
  const TaskSpec t = make_task(TaskKind::REVERSE, cfg, 4);
  CHECK((gen_task(t, 30).tokens == gen_task(t, 30).tokens).all());
  TaskSpec other = t;
  other.seed = 5;
  CHECK(!(gen_task(other, 30).tokens == gen_task(t, 30).tokens).all());

  TaskSpec bad = make_task(TaskKind::MOD_ADD, cfg, 1);
  bad.modulus = 14;
  bad.value_offset = 2;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad = make_task(TaskKind::COPY, cfg, 1);
  bad.span = 4;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  bad.span = 3;
  bad.value_offset = -1;
  CHECK_THROWS_AS(bad.validate(), ParameterError);
  CHECK_THROWS_AS(gen_task(t, 0), ParameterError);
  CHECK_THROWS_AS(parse_task("sub"), ParameterError);
}

TEST_CASE("analytic gradients match finite differences (plain FFN)") {
  for (auto [heads, kv] : {std::pair{2, 1}, std::pair{2, 2}, std::pair{1, 1}}) {
    CAPTURE(heads);
    CAPTURE(kv);
    const ModelConfig cfg = tiny_config(heads, kv);
    const NamedTensors w = random_weights(cfg, 11);
    const Batch b = sample_batch(cfg, TaskKind::REVERSE, 2, 3);
    std::vector<std::string> names;
    for (const auto& [name, m] : w) names.push_back(name);
    check_gradients(cfg, w, b, names);
  }
}

TEST_CASE("analytic gradients match finite differences (Taylor FFN)") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = random_weights(cfg, 12, 0.3);
  ProtectConfig pc;
  pc.taylor_order = 4;
  const TaskSpec task = make_task(TaskKind::MOD_ADD, cfg, 3);
  const NamedTensors prot = protect_model(cfg, w, task, pc).bundle.tensors;
  const Batch b = sample_batch(cfg, TaskKind::MOD_ADD, 3, 4);
  std::vector<std::string> names;
  for (const auto& [name, m] : prot)
    if (name.find("tffn") != std::string::npos && !name.ends_with("b1")) names.push_back(name);
  REQUIRE(!names.empty());
  check_gradients(cfg, prot, b, names);
}

TEST_CASE("attention is causal") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = random_weights(cfg, 13);
  Batch b = sample_batch(cfg, TaskKind::COPY, 5, 4);
  const Matrix before = forward(cfg, w, b).logits;
  b.tokens(0, 6) = (b.tokens(0, 6) + 1) % cfg.vocab;
  const Matrix after = forward(cfg, w, b).logits;
  for (Eigen::Index t = 0; t < 6; ++t) CHECK(max_abs_diff(before.row(t), after.row(t)) == 0.0);
  CHECK(max_abs_diff(before.row(6), after.row(6)) > 0.0);
  // Rows of other sequences are untouched.
  CHECK(max_abs_diff(before.bottomRows(3 * 8), after.bottomRows(3 * 8)) == 0.0);
}

TEST_CASE("accuracy breaks logit ties toward the lowest token id") {
  const ModelConfig cfg = tiny_config();
  NamedTensors w = init_model(cfg, 1);
  for (auto& [name, m] : w) m.setZero();
  TaskSpec t = make_task(TaskKind::MOD_ADD, cfg, 8);
  t.modulus = 4;
  const Batch b = gen_task(t, 400);
  double zero_answers = 0;
  for (Eigen::Index i = 0; i < b.size(); ++i) zero_answers += b.tokens(i, 3) == 0;
  CHECK(accuracy(cfg, w, b) == doctest::Approx(zero_answers / 400.0));
}

TEST_CASE("ffn inputs have one block per layer") {
  const ModelConfig cfg = tiny_config();
  const auto xs = ffn_inputs(cfg, random_weights(cfg, 2), sample_batch(cfg, TaskKind::COPY, 1, 3));
  REQUIRE(xs.size() == 2);
  CHECK(xs[0].rows() == 24);
  CHECK(xs[0].cols() == 8);
}

TEST_CASE("training lowers the loss and is reproducible") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = init_model(cfg, 3);
  const TaskSpec task = make_task(TaskKind::COPY, cfg, 7);
  TrainConfig tc;
  tc.steps = 150;
  tc.lr = 1e-2;
  tc.seed = 4;
  int calls = 0;
  const TrainResult r = train(cfg, w, task, tc, [&](int, const NamedTensors&) { ++calls; });
  CHECK(calls == 151);
  REQUIRE(r.loss_curve.size() == 150);
  CHECK(r.loss_curve.back() < 0.8 * r.loss_curve.front());
  const TrainResult again = train(cfg, w, task, tc);
  for (const auto& [name, m] : r.weights) CHECK(m == again.weights.at(name));
}

TEST_CASE("frozen tensors and decay toward the start") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = random_weights(cfg, 3, 0.2);
  const TaskSpec task = make_task(TaskKind::MOD_ADD, cfg, 7);
  TrainConfig tc;
  tc.steps = 20;
  tc.weight_decay = 5.0;
  tc.frozen_prefixes = {"embed.", "head."};
  const NamedTensors r = train(cfg, w, task, tc).weights;
  CHECK(r.at("embed.tok") == w.at("embed.tok"));
  CHECK(r.at("head.w") == w.at("head.w"));
  CHECK(r.at("layer.0.attn.wq") != w.at("layer.0.attn.wq"));

  // Rows of tokens the task never uses get no gradient: decay toward the
  // start keeps them, decay toward zero shrinks them.
  TrainConfig none = tc;
  none.frozen_prefixes = {};
  none.decay_to_start = true;
  TaskSpec add = task;
  add.modulus = 3;
  const NamedTensors anchored = train(cfg, w, add, none).weights;
  // Value rows never seen by this task keep their starting embedding.
  CHECK(anchored.at("embed.tok").row(10) == w.at("embed.tok").row(10));
  none.decay_to_start = false;
  const NamedTensors shrunk = train(cfg, w, add, none).weights;
  CHECK(shrunk.at("embed.tok").row(10).norm() < w.at("embed.tok").row(10).norm());
}

TEST_CASE("limited pool training draws from a fixed set") {
  const ModelConfig cfg = tiny_config();
  TrainConfig tc;
  tc.steps = 30;
  tc.pool_size = 8;
  const TaskSpec task = make_task(TaskKind::COPY, cfg, 1);
  const TrainResult a = train(cfg, init_model(cfg, 1), task, tc);
  const TrainResult b = train(cfg, init_model(cfg, 1), task, tc);
  CHECK(a.loss_curve == b.loss_curve);
}

TEST_CASE("training parameter errors") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = init_model(cfg, 1);
  const TaskSpec task = make_task(TaskKind::COPY, cfg, 1);
  TrainConfig tc;
  tc.lr = 0.0;
  CHECK_THROWS_AS(train(cfg, w, task, tc), ParameterError);
  tc = TrainConfig{};
  tc.batch_size = 0;
  CHECK_THROWS_AS(train(cfg, w, task, tc), ParameterError);
  CHECK_THROWS_AS(train(cfg, w, std::vector<TaskSpec>{}, TrainConfig{}), ParameterError);
  TaskSpec mismatched = task;
  mismatched.vocab = 30;
  CHECK_THROWS_AS(train(cfg, w, mismatched, TrainConfig{}), ParameterError);
}
