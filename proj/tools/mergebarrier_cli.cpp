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


// Command-line driver. Exit status: 0 success, 1 domain error, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mergebarrier/attack.hpp"
#include "mergebarrier/errors.hpp"
#include "mergebarrier/eval.hpp"
#include "mergebarrier/merge.hpp"
#include "mergebarrier/protect.hpp"
#include "mergebarrier/scenario.hpp"
#include "mergebarrier/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Args {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  std::vector<std::string> models;
  std::string base;
  std::string task = "a";
  std::optional<double> rho, lambda, trim, p, epsilon;
  std::optional<int> taylor_order, rsvd_rank, samples, steps;
  std::string method = "task_arithmetic";
  std::string scope = "all";
  bool no_ffn = false;
};

mb::ScenarioConfig effective_config(const Args& a) {
  mb::ScenarioConfig sc;
  if (!a.config.empty()) {
    std::string text;
    try {
      text = mb::read_file(a.config);
    } catch (const mb::Error& e) {
      throw UsageError(std::string("cannot read --config: ") + e.what());
    }
    try {
      for (const auto& [k, v] : mb::parse_kv_config(text)) sc.set(k, v);
    } catch (const mb::ParameterError& e) {
      throw UsageError(std::string("--config: ") + e.what());
    }
  }
  if (a.seed) sc.seed = *a.seed;
  if (a.rho) sc.rho = *a.rho;
  if (a.taylor_order) sc.taylor_order = *a.taylor_order;
  if (a.rsvd_rank) sc.rsvd_rank = *a.rsvd_rank;
  if (a.trim) sc.trim = *a.trim;
  if (a.p) sc.drop = *a.p;
  if (a.epsilon) sc.epsilon = *a.epsilon;
  if (a.samples) sc.sharpness_samples = *a.samples;
  if (a.no_ffn) sc.reparameterize_ffn = false;
  return sc;
}

json config_json(const mb::ScenarioConfig& sc) {
  json j;
  for (const auto& [k, v] : sc.entries()) j[k] = v;
  return j;
}

fs::path out_dir(const Args& a) {
  if (a.out.empty()) throw UsageError("--out is required");
  fs::create_directories(a.out);
  return a.out;
}

const std::string& need(const std::string& v, const char* flag) {
  if (v.empty()) throw UsageError(std::string(flag) + " is required");
  return v;
}

mb::ModelFile load(const std::string& path) {
  if (!fs::exists(path)) throw mb::StagingError("missing artifact: " + path);
  return mb::load_model(path);
}

mb::TaskSpec resolve_task(const std::string& name, const mb::ScenarioConfig& sc, const mb::ModelConfig& cfg) {
  mb::TaskSpec t;
  if (name == "a") {
    t = mb::scenario_task_a(sc);
  } else if (name == "b") {
    t = mb::scenario_task_b(sc);
  } else {
    t = mb::make_task(mb::parse_task(name), cfg, mb::rng_word(sc.seed, 0x7a5c));
  }
  t.vocab = cfg.vocab;
  t.seq_len = cfg.seq_len;
  t.validate();
  return t;
}

mb::Batch eval_batch_for(const mb::TaskSpec& t, const mb::ScenarioConfig& sc) {
  mb::TaskSpec e = t;
  e.seed = mb::rng_word(sc.seed, 0xe7a1);
  return mb::gen_task(e, mb::kEvalSamples);
}

void write_report(const fs::path& dir, const std::string& command, const mb::ScenarioConfig& sc, json body) {
  body["command"] = command;
  body["config"] = config_json(sc);
  mb::write_file(dir / "report.json", mb::canonical_json(body));
}

mb::ProtectConfig protect_config(const mb::ScenarioConfig& sc) {
  mb::ProtectConfig pc;
  pc.flip_fraction = sc.rho;
  pc.taylor_order = sc.taylor_order;
  pc.rsvd_rank = sc.rsvd_rank;
  pc.calibration_samples = sc.calibration_samples;
  pc.seed = sc.seed;
  pc.project_attention = sc.project_attention;
  pc.reparameterize_ffn = sc.reparameterize_ffn;
  return pc;
}

void cmd_train(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  const fs::path dir = out_dir(a);
  mb::ModelConfig cfg = sc.model;
  mb::NamedTensors start;
  mb::TrainConfig tc;
  tc.batch_size = sc.batch_size;
  tc.seed = sc.seed;
  if (!a.base.empty()) {
    mb::ModelFile base = load(a.base);
    if (!base.bundle.manifest.empty()) throw mb::SchemaError("--base must be an unprotected model");
    cfg = base.config;
    start = base.bundle.tensors;
    tc.steps = sc.expert_steps;
    tc.lr = sc.expert_lr;
    tc.weight_decay = sc.expert_weight_decay;
  } else {
    cfg.validate();
    start = mb::init_model(cfg, sc.seed);
    tc.steps = sc.base_steps;
    tc.lr = sc.base_lr;
    tc.weight_decay = sc.base_weight_decay;
  }
  if (a.steps) tc.steps = *a.steps;
  const mb::TaskSpec task = resolve_task(a.task, sc, cfg);
  const mb::TrainResult r = mb::train(cfg, start, task, tc);
  mb::save_model(dir / "model.mbwt", cfg, r.weights);
  write_report(dir, "train", sc,
               {{"task", a.task},
                {"steps", tc.steps},
                {"final_loss", r.loss_curve.empty() ? 0.0 : r.loss_curve.back()},
                {"accuracy", mb::accuracy(cfg, r.weights, eval_batch_for(task, sc))},
                {"artifact", "model.mbwt"}});
}

void cmd_protect(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  const mb::ProtectConfig pc = protect_config(sc);
  pc.validate();
  const fs::path dir = out_dir(a);
  if (a.models.size() != 1) throw UsageError("protect takes exactly one --model");
  mb::ModelFile in = load(a.models[0]);
  if (!in.bundle.manifest.empty()) throw mb::SchemaError("model is already protected");
  const mb::TaskSpec task = resolve_task(a.task, sc, in.config);
  const mb::ProtectResult r = mb::protect_model(in.config, in.bundle.tensors, task, pc);
  mb::save_model(dir / "protected.mbwt", in.config, r.bundle);
  mb::write_file(dir / "plan.mbwt", mb::encode_mbwt(mb::plan_to_file(r.plan)));
  const mb::Batch ev = eval_batch_for(task, sc);
  const mb::Matrix before = mb::forward(in.config, in.bundle.tensors, ev).logits;
  const mb::Matrix after = mb::protected_forward(in.config, r.bundle.tensors, ev);
  write_report(dir, "protect", sc,
               {{"manifest", mb::to_json(r.bundle.manifest)},
                {"accuracy_original", mb::accuracy(in.config, in.bundle.tensors, ev)},
                {"accuracy_protected", mb::accuracy(in.config, r.bundle.tensors, ev)},
                {"max_logit_difference", (before - after).cwiseAbs().maxCoeff()},
                {"artifacts", {"protected.mbwt", "plan.mbwt"}}});
}

void cmd_merge(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  mb::MergeConfig mc;
  mc.method = mb::parse_merge_method(a.method);
  mc.lambda = a.lambda.value_or(1.0);
  mc.trim_keep_fraction = sc.trim;
  mc.drop_rate = sc.drop;
  mc.seed = sc.seed;
  mc.validate();
  need(a.base, "--base");
  if (a.models.empty()) throw UsageError("merge needs at least one --model");
  const fs::path dir = out_dir(a);
  mb::ModelFile base = load(a.base);
  std::vector<mb::NamedTensors> experts;
  for (const auto& m : a.models) {
    mb::ModelFile f = load(m);
    if (!(f.config == base.config)) throw mb::SchemaError(m + ": model config differs from --base");
    experts.push_back(f.bundle.tensors);
  }
  const mb::MergeResult r = mb::merge(mb::make_task_vectors(base.bundle.tensors, experts), mc);
  mb::save_model(dir / "merged.mbwt", base.config, r.merged);
  write_report(dir, "merge", sc, {{"merge", mb::to_json(r.report)}, {"artifact", "merged.mbwt"}});
}

void cmd_attack(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  mb::RevertScope scope;
  if (a.scope == "all") {
    scope = mb::RevertScope::ALL;
  } else if (a.scope == "ffn") {
    scope = mb::RevertScope::FFN_ONLY;
  } else {
    throw UsageError("--scope must be 'all' or 'ffn'");
  }
  need(a.base, "--base");
  if (a.models.size() != 1) throw UsageError("attack takes exactly one --model");
  const fs::path dir = out_dir(a);
  mb::ModelFile prot = load(a.models[0]);
  mb::ModelFile base = load(a.base);
  if (!(prot.config == base.config)) throw mb::SchemaError("model config differs from --base");
  const mb::ProtectedBundle reverted = mb::revert_modified_layers(prot.config, prot.bundle, base.bundle.tensors, scope);
  mb::save_model(dir / "reverted.mbwt", prot.config, reverted);
  json body{{"scope", a.scope}, {"manifest_after_revert", mb::to_json(reverted.manifest)}};
  const int steps = a.steps.value_or(0);
  const mb::TaskSpec task = resolve_task(a.task, sc, prot.config);
  const mb::Batch ev = eval_batch_for(task, sc);
  body["accuracy_reverted"] = mb::accuracy(prot.config, reverted.tensors, ev);
  if (steps > 0) {
    if (!reverted.manifest.empty()) throw mb::SchemaError("fine-tuning needs a fully reverted model (--scope all)");
    mb::TrainConfig budget;
    budget.steps = steps;
    budget.lr = sc.attack_lr;
    budget.batch_size = sc.batch_size;
    budget.pool_size = sc.attack_pool;
    budget.seed = sc.seed;
    const auto r = mb::finetune_attack(prot.config, reverted.tensors, task, budget, ev);
    json curve = json::array();
    for (const auto& [s, acc] : r.accuracy_curve) curve.push_back({{"step", s}, {"accuracy", acc}});
    body["finetune"] = curve;
    mb::save_model(dir / "finetuned.mbwt", prot.config, r.weights);
  }
  write_report(dir, "attack", sc, body);
}

void cmd_curve(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  if (a.models.size() != 2) throw UsageError("curve takes exactly two --model");
  const fs::path dir = out_dir(a);
  mb::ModelFile wa = load(a.models[0]);
  mb::ModelFile wb = load(a.models[1]);
  if (!(wa.config == wb.config)) throw mb::SchemaError("models have different configs");
  const mb::TaskSpec task = resolve_task(a.task, sc, wa.config);
  const auto c = mb::interpolation_curve(wa.config, wa.bundle.tensors, wb.bundle.tensors, eval_batch_for(task, sc),
                                         a.steps.value_or(sc.curve_steps));
  mb::write_file(dir / "curve.csv", mb::curve_csv(c));
  write_report(dir, "curve", sc,
               {{"interior_max", mb::interior_max(c)}, {"endpoint_max", mb::endpoint_max(c)}, {"artifact", "curve.csv"}});
}

void cmd_landscape(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  if (a.models.size() < 2) throw UsageError("landscape needs at least two --model");
  const fs::path dir = out_dir(a);
  std::vector<mb::NamedTensors> anchors;
  mb::ModelConfig cfg;
  for (std::size_t i = 0; i < a.models.size(); ++i) {
    mb::ModelFile f = load(a.models[i]);
    if (i == 0) cfg = f.config;
    if (!(f.config == cfg)) throw mb::SchemaError(a.models[i] + ": model config differs");
    anchors.push_back(f.bundle.tensors);
  }
  mb::LandscapeOptions lo;
  lo.steps = a.steps.value_or(sc.landscape_steps);
  lo.margin = sc.landscape_margin;
  lo.include_embeddings = sc.landscape_embeddings;
  lo.seed = sc.seed;
  const mb::TaskSpec task = resolve_task(a.task, sc, cfg);
  const mb::LandscapeGrid g = mb::loss_landscape(cfg, anchors, eval_batch_for(task, sc), lo);
  mb::write_file(dir / "landscape.csv", mb::grid_csv(g, a.models));
  write_report(dir, "landscape", sc, {{"anchors", a.models}, {"artifact", "landscape.csv"}});
}

void cmd_sharpness(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  const mb::SharpnessConfig shc{sc.epsilon, sc.sharpness_samples, sc.ascent_steps, sc.seed};
  shc.validate();
  if (a.models.size() != 1) throw UsageError("sharpness takes exactly one --model");
  const fs::path dir = out_dir(a);
  mb::ModelFile f = load(a.models[0]);
  const mb::TaskSpec task = resolve_task(a.task, sc, f.config);
  write_report(dir, "sharpness", sc,
               {{"sharpness", mb::sharpness(f.config, f.bundle.tensors, eval_batch_for(task, sc), shc)}});
}

void cmd_scenario(const Args& a) {
  mb::ScenarioConfig sc = effective_config(a);
  sc.validate();
  const fs::path dir = out_dir(a);
  mb::scenario_run(sc, dir);
  std::cout << (dir / "report.json").string() << "\n";
}

void cmd_inspect(const Args& a) {
  if (a.models.size() != 1) throw UsageError("inspect takes exactly one --model");
  const mb::TensorFile f = mb::decode_mbwt(mb::read_file(a.models[0]));
  json tensors = json::object();
  for (const auto& [name, m] : f.tensors) tensors[name] = {m.rows(), m.cols()};
  std::cout << mb::canonical_json({{"flags", f.flags}, {"metadata", f.metadata}, {"tensors", tensors}});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MergeBarrier defense lab"};
  app.require_subcommand(1);
  Args a;

  auto common = [&](CLI::App* s) {
    s->add_option("--seed", a.seed, "Seed for every random choice");
    s->add_option("--out", a.out, "Output directory");
    s->add_option("--config", a.config, "key = value config file");
    s->add_option("--task", a.task, "a, b (scenario tasks) or mod_add/copy/reverse");
  };
  auto models = [&](CLI::App* s) { s->add_option("--model", a.models, "Model file (repeatable)"); };

  CLI::App* train = app.add_subcommand("train", "Train a model on a task");
  common(train);
  train->add_option("--base", a.base, "Start from this model");
  train->add_option("--steps", a.steps, "Training steps");

  CLI::App* protect = app.add_subcommand("protect", "Protect a model");
  common(protect);
  models(protect);
  protect->add_option("--rho", a.rho, "Flip fraction");
  protect->add_option("--taylor-order", a.taylor_order, "Taylor order N");
  protect->add_option("--rsvd-rank", a.rsvd_rank, "RSVD rank, 0 = auto");
  protect->add_flag("--no-ffn", a.no_ffn, "Skip the FFN reparameterization");

  CLI::App* merge = app.add_subcommand("merge", "Merge experts into a base");
  common(merge);
  models(merge);
  merge->add_option("--base", a.base, "Base model");
  merge->add_option("--method", a.method, "task_arithmetic, ties, dare_task or dare_ties");
  merge->add_option("--lambda", a.lambda, "Task vector scale");
  merge->add_option("--trim", a.trim, "TIES keep fraction");
  merge->add_option("--p", a.p, "DARE drop rate");

  CLI::App* attack = app.add_subcommand("attack", "Revert modified layers, optionally fine-tune");
  common(attack);
  models(attack);
  attack->add_option("--base", a.base, "Base model");
  attack->add_option("--scope", a.scope, "all or ffn");
  attack->add_option("--steps", a.steps, "Fine-tune steps after the revert");

  CLI::App* curve = app.add_subcommand("curve", "Linear interpolation loss curve");
  common(curve);
  models(curve);
  curve->add_option("--steps", a.steps, "Points on the path");

  CLI::App* landscape = app.add_subcommand("landscape", "PCA loss landscape");
  common(landscape);
  models(landscape);
  landscape->add_option("--steps", a.steps, "Grid points per axis");

  CLI::App* sharp = app.add_subcommand("sharpness", "Normalized epsilon sharpness");
  common(sharp);
  models(sharp);
  sharp->add_option("--epsilon", a.epsilon, "Perturbation radius");
  sharp->add_option("--samples", a.samples, "Random directions");

  CLI::App* scenario = app.add_subcommand("scenario", "Full desk-scale scenario");
  common(scenario);

  CLI::App* inspect = app.add_subcommand("inspect", "Print an MBWT file summary");
  models(inspect);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) cmd_train(a);
    if (protect->parsed()) cmd_protect(a);
    if (merge->parsed()) cmd_merge(a);
    if (attack->parsed()) cmd_attack(a);
    if (curve->parsed()) cmd_curve(a);
    if (landscape->parsed()) cmd_landscape(a);
    if (sharp->parsed()) cmd_sharpness(a);
    if (scenario->parsed()) cmd_scenario(a);
    if (inspect->parsed()) cmd_inspect(a);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
