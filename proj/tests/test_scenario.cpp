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

#include <filesystem>

#include "mergebarrier/errors.hpp"
#include "mergebarrier/scenario.hpp"
#include "mergebarrier/weights_io.hpp"

using namespace mb;

namespace {

// Smallest run that still exercises every stage.
ScenarioConfig quick_config() {
  ScenarioConfig sc;
  const char* const kv[][2] = {{"model.dim", "8"},      {"model.ffn_dim", "8"},     {"model.heads", "2"},
                               {"model.kv_heads", "1"}, {"base_steps", "20"},       {"expert_steps", "10"},
                               {"attack_steps", "10"},  {"batch_size", "4"},        {"calibration_samples", "16"},
                               {"curve_steps", "3"},    {"landscape_steps", "3"},   {"sharpness_samples", "1"},
                               {"ascent_steps", "1"},   {"lambdas", "0.5, 1.0"},    {"taylor_order", "4"}};
  for (const auto& [k, v] : kv) sc.set(k, v);
  return sc;
}

std::filesystem::path fresh_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mergebarrier_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("key value config parsing") {
  const auto kv = parse_kv_config("# comment\nseed = 9\n\n  rho=0.25   # trailing\nlambdas = 0.5,1\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("seed") == "9");
  CHECK(kv.at("rho") == "0.25");
  CHECK(kv.at("lambdas") == "0.5,1");
  CHECK_THROWS_WITH_AS(parse_kv_config("seed 9\n"), "config line 1: expected key = value", ParameterError);
  CHECK_THROWS_AS(parse_kv_config("\n = 3\n"), ParameterError);
}

TEST_CASE("scenario keys are typed and complete") {
  ScenarioConfig sc;
  sc.set("seed", "11");
  sc.set("model.activation", "silu");
  sc.set("expert_replay", "true");
  sc.set("lambdas", "0.25, 0.75");
  CHECK(sc.seed == 11);
  CHECK(sc.model.activation == ActivationKind::SILU);
  CHECK(sc.expert_replay);
  CHECK(sc.lambdas == std::vector<double>{0.25, 0.75});

  // Every listed entry can be fed back through set() unchanged.
  ScenarioConfig copy;
  for (const auto& [k, v] : sc.entries()) copy.set(k, v);
  CHECK(copy.entries() == sc.entries());

  CHECK_THROWS_WITH_AS(sc.set("sed", "1"), "unknown config key 'sed'", ParameterError);
  CHECK_THROWS_AS(sc.set("seed", "x"), ParameterError);
  CHECK_THROWS_AS(sc.set("base_steps", "1.5"), ParameterError);
  CHECK_THROWS_AS(sc.set("expert_replay", "maybe"), ParameterError);
  CHECK_THROWS_AS(sc.set("expert_optimizer", "rmsprop"), ParameterError);
  CHECK_THROWS_AS(sc.set("lambdas", ""), ParameterError);
  sc.batch_size = 0;
  CHECK_THROWS_AS(sc.validate(), ParameterError);
}

TEST_CASE("task definitions") {
  const ScenarioConfig sc;
  const TaskSpec a = scenario_task_a(sc), b = scenario_task_b(sc);
  CHECK(a.task == TaskKind::MOD_ADD);
  CHECK(a.modulus == sc.a_modulus);
  CHECK(b.task == TaskKind::COPY);
  CHECK(b.value_offset == sc.b_offset);
  CHECK(a.seed != b.seed);
}

TEST_CASE("evaluation requires staged artifacts") {
  const auto dir = fresh_dir("staging");
  CHECK_THROWS_WITH_AS(scenario_evaluate(quick_config(), dir), doctest::Contains("missing artifact:"), StagingError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("end to end run is reproducible") {
  const ScenarioConfig sc = quick_config();
  const auto dir = fresh_dir("e2e");
  const nlohmann::json first = scenario_run(sc, dir);
  for (const char* key : {"config", "tasks", "protection", "solo", "merges", "curves", "landscape", "sharpness",
                          "finetune_attack", "artifacts"})
    CHECK(first.contains(key));
  for (const char* variant : {"unprotected", "revert_ffn", "revert_all"}) CHECK(first.at("merges").contains(variant));
  for (const auto& name : first.at("artifacts")) CHECK(std::filesystem::exists(dir / name.get<std::string>()));
  CHECK(canonical_json(first) == read_file(dir / "report.json"));

  // Evaluating the same artifacts again reproduces the report byte for byte.
  CHECK(canonical_json(scenario_evaluate(sc, dir)) == canonical_json(first));

  // A config that disagrees with the stored artifacts is rejected.
  ScenarioConfig other = sc;
  other.set("model.dim", "16");
  CHECK_THROWS_AS(scenario_evaluate(other, dir), SchemaError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("canonical json") {
  const nlohmann::json j = {{"b", 1}, {"a", {1, 2}}};
  CHECK(canonical_json(j) == "{\n  \"a\": [\n    1,\n    2\n  ],\n  \"b\": 1\n}\n");
}
