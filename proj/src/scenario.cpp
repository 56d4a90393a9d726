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


#include "mergebarrier/scenario.hpp"

#include <algorithm>
#include <charconv>
#include <functional>
#include <sstream>

#include "mergebarrier/attack.hpp"
#include "mergebarrier/errors.hpp"
#include "mergebarrier/eval.hpp"
#include "mergebarrier/merge.hpp"
#include "mergebarrier/protect.hpp"
#include "mergebarrier/weights_io.hpp"

namespace mb {

namespace {

// Stream ids under the scenario seed.
enum Stream : std::uint64_t {
  kInit = 1,
  kBaseTrain,
  kExpertATrain,
  kExpertBTrain,
  kProtect,
  kEvalA,
  kEvalB,
  kMerge,
  kSharpness,
  kLandscape,
  kAttack,
  kTaskSeeds = 100,
};

std::uint64_t stream(const ScenarioConfig& sc, Stream s) { return rng_word(sc.seed, s); }

std::string strip(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ParameterError("config key '" + key + "': not a number: '" + v + "'");
  return out;
}

template <class Int>
Int parse_int(const std::string& key, const std::string& v) {
  Int out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size())
    throw ParameterError("config key '" + key + "': not an integer: '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ParameterError("config key '" + key + "': not a boolean: '" + v + "'");
}

struct Field {
  std::function<void(const std::string&, const std::string&)> set;
  std::function<std::string()> get;
};

std::map<std::string, Field> fields(ScenarioConfig& c) {
  std::map<std::string, Field> f;
  auto num = [&](const char* key, double& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_double(k, v); },
              [&ref] { return fmt_double(ref); }};
  };
  auto integer = [&](const char* key, int& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_int<int>(k, v); },
              [&ref] { return std::to_string(ref); }};
  };
  auto flag = [&](const char* key, bool& ref) {
    f[key] = {[&ref](const std::string& k, const std::string& v) { ref = parse_bool(k, v); },
              [&ref] { return std::string(ref ? "true" : "false"); }};
  };
  f["seed"] = {[&c](const std::string& k, const std::string& v) { c.seed = parse_int<std::uint64_t>(k, v); },
               [&c] { return std::to_string(c.seed); }};
  integer("model.vocab", c.model.vocab);
  integer("model.dim", c.model.dim);
  integer("model.layers", c.model.n_layers);
  integer("model.heads", c.model.n_heads);
  integer("model.kv_heads", c.model.n_kv_heads);
  integer("model.ffn_dim", c.model.ffn_dim);
  integer("model.seq_len", c.model.seq_len);
  f["model.activation"] = {[&c](const std::string&, const std::string& v) { c.model.activation = parse_activation(v); },
                           [&c] { return to_string(c.model.activation); }};
  integer("base_steps", c.base_steps);
  num("base_lr", c.base_lr);
  num("base_weight_decay", c.base_weight_decay);
  integer("pretrain_reverse_alphabet", c.pretrain_reverse_alphabet);
  integer("pretrain_copy_alphabet", c.pretrain_copy_alphabet);
  integer("pretrain_add_modulus", c.pretrain_add_modulus);
  integer("expert_steps", c.expert_steps);
  num("expert_lr", c.expert_lr);
  num("expert_weight_decay", c.expert_weight_decay);
  flag("expert_replay", c.expert_replay);
  flag("expert_decay_to_base", c.expert_decay_to_base);
  f["expert_optimizer"] = {[&c](const std::string& k, const std::string& v) {
                             if (v == "adam") {
                               c.expert_optimizer = Optimizer::ADAM;
                             } else if (v == "sgd") {
                               c.expert_optimizer = Optimizer::SGD;
                             } else {
                               throw ParameterError("config key '" + k + "': expected adam or sgd");
                             }
                           },
                           [&c] { return std::string(c.expert_optimizer == Optimizer::SGD ? "sgd" : "adam"); }};
  f["expert_frozen"] = {[&c](const std::string&, const std::string& v) { c.expert_frozen = v; },
                        [&c] { return c.expert_frozen; }};
  integer("batch_size", c.batch_size);
  integer("a_modulus", c.a_modulus);
  integer("b_alphabet", c.b_alphabet);
  integer("b_offset", c.b_offset);
  num("rho", c.rho);
  integer("taylor_order", c.taylor_order);
  integer("rsvd_rank", c.rsvd_rank);
  integer("calibration_samples", c.calibration_samples);
  flag("project_attention", c.project_attention);
  flag("reparameterize_ffn", c.reparameterize_ffn);
  num("trim", c.trim);
  num("drop", c.drop);
  f["lambdas"] = {[&c](const std::string& k, const std::string& v) {
                    std::vector<double> out;
                    std::stringstream ss(v);
                    std::string item;
                    while (std::getline(ss, item, ',')) out.push_back(parse_double(k, strip(item)));
                    if (out.empty()) throw ParameterError("config key 'lambdas': empty list");
                    c.lambdas = out;
                  },
                  [&c] {
                    std::string s;
                    for (std::size_t i = 0; i < c.lambdas.size(); ++i) s += (i ? "," : "") + fmt_double(c.lambdas[i]);
                    return s;
                  }};
  integer("curve_steps", c.curve_steps);
  integer("landscape_steps", c.landscape_steps);
  num("landscape_margin", c.landscape_margin);
  flag("landscape_embeddings", c.landscape_embeddings);
  num("epsilon", c.epsilon);
  integer("sharpness_samples", c.sharpness_samples);
  integer("ascent_steps", c.ascent_steps);
  integer("attack_steps", c.attack_steps);
  num("attack_lr", c.attack_lr);
  integer("attack_pool", c.attack_pool);
  return f;
}

TaskSpec task_for(const ScenarioConfig& sc, TaskKind kind, std::uint64_t id) {
  return make_task(kind, sc.model, rng_word(stream(sc, kTaskSeeds), id));
}

std::vector<TaskSpec> pretrain_mixture(const ScenarioConfig& sc) {
  std::vector<TaskSpec> tasks;
  TaskSpec rev = task_for(sc, TaskKind::REVERSE, 0);
  rev.alphabet = sc.pretrain_reverse_alphabet;
  tasks.push_back(rev);
  if (sc.pretrain_copy_alphabet > 0) {
    TaskSpec t = task_for(sc, TaskKind::COPY, 1);
    t.alphabet = sc.pretrain_copy_alphabet;
    tasks.push_back(t);
  }
  if (sc.pretrain_add_modulus > 0) {
    TaskSpec t = task_for(sc, TaskKind::MOD_ADD, 2);
    t.modulus = sc.pretrain_add_modulus;
    t.value_offset = sc.b_offset;
    tasks.push_back(t);
  }
  for (const auto& t : tasks) t.validate();
  return tasks;
}

Batch eval_batch(const TaskSpec& task, std::uint64_t seed) {
  TaskSpec t = task;
  t.seed = seed;
  return gen_task(t, kEvalSamples);
}

NamedTensors load_stage(const std::filesystem::path& dir, const char* name, const ModelConfig& cfg) {
  const auto path = dir / name;
  if (!std::filesystem::exists(path)) throw StagingError("missing artifact: " + path.string());
  ModelFile f = load_model(path);
  if (!(f.config == cfg)) throw SchemaError("artifact " + path.string() + " was built for a different model config");
  if (!f.bundle.manifest.empty()) throw SchemaError("artifact " + path.string() + " is protected; expected plain weights");
  return f.bundle.tensors;
}

std::vector<CurvePoint> mean_curve(const ModelConfig& cfg, const NamedTensors& wa, const NamedTensors& wb,
                                   const std::vector<const Batch*>& batches, int steps) {
  std::vector<CurvePoint> out;
  for (const Batch* b : batches) {
    auto c = interpolation_curve(cfg, wa, wb, *b, steps);
    if (out.empty()) {
      out = c;
    } else {
      for (std::size_t i = 0; i < c.size(); ++i) out[i].loss += c[i].loss;
    }
  }
  for (auto& p : out) p.loss /= static_cast<double>(batches.size());
  return out;
}

nlohmann::json curve_summary(const std::vector<CurvePoint>& c, const std::string& file) {
  return {{"file", file},
          {"loss_t0", c.front().loss},
          {"loss_t1", c.back().loss},
          {"interior_max", interior_max(c)},
          {"endpoint_max", endpoint_max(c)}};
}

}  // namespace

void ScenarioConfig::set(const std::string& key, const std::string& value) {
  auto f = fields(*this);
  auto it = f.find(key);
  if (it == f.end()) throw ParameterError("unknown config key '" + key + "'");
  it->second.set(key, strip(value));
}

std::map<std::string, std::string> ScenarioConfig::entries() const {
  std::map<std::string, std::string> out;
  for (const auto& [k, field] : fields(const_cast<ScenarioConfig&>(*this))) out[k] = field.get();
  return out;
}

void ScenarioConfig::validate() const {
  model.validate();
  if (base_steps < 0 || expert_steps < 1 || attack_steps < 0) throw ParameterError("step counts must be non-negative");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (attack_pool < 0) throw ParameterError("attack_pool must be >= 0");
  if (lambdas.empty()) throw ParameterError("lambdas must not be empty");
  ProtectConfig pc;
  pc.flip_fraction = rho;
  pc.taylor_order = taylor_order;
  pc.rsvd_rank = rsvd_rank;
  pc.calibration_samples = calibration_samples;
  pc.validate();
  MergeConfig mc;
  mc.trim_keep_fraction = trim;
  mc.drop_rate = drop;
  mc.validate();
  SharpnessConfig shc{epsilon, sharpness_samples, ascent_steps, 0};
  shc.validate();
  scenario_task_a(*this).validate();
  scenario_task_b(*this).validate();
  pretrain_mixture(*this);
}

std::map<std::string, std::string> parse_kv_config(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = strip(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = strip(line.substr(0, eq));
    if (key.empty()) throw ParameterError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = strip(line.substr(eq + 1));
  }
  return out;
}

TaskSpec scenario_task_a(const ScenarioConfig& sc) {
  TaskSpec t = task_for(sc, TaskKind::MOD_ADD, 10);
  t.modulus = sc.a_modulus;
  t.value_offset = 0;
  return t;
}

TaskSpec scenario_task_b(const ScenarioConfig& sc) {
  TaskSpec t = task_for(sc, TaskKind::COPY, 11);
  t.alphabet = sc.b_alphabet;
  t.value_offset = sc.b_offset;
  return t;
}

void scenario_train(const ScenarioConfig& sc, const std::filesystem::path& dir) {
  sc.validate();
  std::filesystem::create_directories(dir);
  const ModelConfig& cfg = sc.model;

  TrainConfig base_tc;
  base_tc.steps = sc.base_steps;
  base_tc.lr = sc.base_lr;
  base_tc.weight_decay = sc.base_weight_decay;
  base_tc.batch_size = sc.batch_size;
  base_tc.seed = stream(sc, kBaseTrain);
  const NamedTensors base = train(cfg, init_model(cfg, stream(sc, kInit)), pretrain_mixture(sc), base_tc).weights;

  TrainConfig ex_tc = base_tc;
  ex_tc.steps = sc.expert_steps;
  ex_tc.lr = sc.expert_lr;
  ex_tc.weight_decay = sc.expert_weight_decay;
  ex_tc.optimizer = sc.expert_optimizer;
  ex_tc.decay_to_start = sc.expert_decay_to_base;
  {
    std::stringstream ss(sc.expert_frozen);
    std::string item;
    while (std::getline(ss, item, ','))
      if (!strip(item).empty()) ex_tc.frozen_prefixes.push_back(strip(item));
  }
  auto expert_tasks = [&](const TaskSpec& t) {
    std::vector<TaskSpec> tasks{t};
    if (sc.expert_replay)
      for (const auto& p : pretrain_mixture(sc)) tasks.push_back(p);
    return tasks;
  };
  ex_tc.seed = stream(sc, kExpertATrain);
  const NamedTensors a = train(cfg, base, expert_tasks(scenario_task_a(sc)), ex_tc).weights;
  ex_tc.seed = stream(sc, kExpertBTrain);
  const NamedTensors b = train(cfg, base, expert_tasks(scenario_task_b(sc)), ex_tc).weights;

  save_model(dir / kBaseArtifact, cfg, base);
  save_model(dir / kExpertAArtifact, cfg, a);
  save_model(dir / kExpertBArtifact, cfg, b);
}

nlohmann::json scenario_evaluate(const ScenarioConfig& sc, const std::filesystem::path& dir) {
  sc.validate();
  const ModelConfig& cfg = sc.model;
  const NamedTensors base = load_stage(dir, kBaseArtifact, cfg);
  const NamedTensors a = load_stage(dir, kExpertAArtifact, cfg);
  const NamedTensors b = load_stage(dir, kExpertBArtifact, cfg);

  const TaskSpec task_a = scenario_task_a(sc);
  const TaskSpec task_b = scenario_task_b(sc);
  const Batch eval_a = eval_batch(task_a, stream(sc, kEvalA));
  const Batch eval_b = eval_batch(task_b, stream(sc, kEvalB));
  auto accs = [&](const NamedTensors& w) {
    return nlohmann::json{{"task_a", accuracy(cfg, w, eval_a)}, {"task_b", accuracy(cfg, w, eval_b)}};
  };

  nlohmann::json report;
  nlohmann::json config;
  for (const auto& [k, v] : sc.entries()) config[k] = v;
  report["config"] = config;
  report["tasks"] = {{"task_a", {{"kind", to_string(task_a.task)}, {"chance", task_a.chance()}}},
                     {"task_b", {{"kind", to_string(task_b.task)}, {"chance", task_b.chance()}}}};

  // Protection of expert A.
  ProtectConfig pc;
  pc.flip_fraction = sc.rho;
  pc.taylor_order = sc.taylor_order;
  pc.rsvd_rank = sc.rsvd_rank;
  pc.calibration_samples = sc.calibration_samples;
  pc.seed = stream(sc, kProtect);
  pc.project_attention = sc.project_attention;
  pc.reparameterize_ffn = sc.reparameterize_ffn;
  const ProtectResult prot = protect_model(cfg, a, task_a, pc);
  ProtectConfig pc_attn = pc;
  pc_attn.reparameterize_ffn = false;
  const NamedTensors a_projected = protect_model(cfg, a, task_a, pc_attn).bundle.tensors;
  save_model(dir / "expert_a_protected.mbwt", cfg, prot.bundle);

  nlohmann::json remainder = nlohmann::json::array();
  for (const auto& r : remainder_stats(cfg, a, prot.bundle.tensors, task_a, kEvalSamples))
    remainder.push_back({{"mean", r.mean}, {"stddev", r.stddev}, {"max", r.max}, {"count", r.count}});
  report["protection"] = {{"manifest", to_json(prot.bundle.manifest)}, {"taylor_remainder", remainder}};

  report["solo"] = {{"base", accs(base)},
                    {"expert_a", accs(a)},
                    {"expert_b", accs(b)},
                    {"expert_a_protected", accs(prot.bundle.tensors)},
                    {"expert_a_projected_only", accs(a_projected)}};

  // Merges. The structurally modified FFN cannot enter a weight-space merge
  // as is, so the protected variants are the layer-revert attacks.
  struct Variant {
    const char* name;
    NamedTensors weights;
  };
  const std::vector<Variant> variants{
      {"unprotected", a},
      {"revert_ffn", revert_modified_layers(cfg, prot.bundle, base, RevertScope::FFN_ONLY).tensors},
      {"revert_all", revert_modified_layers(cfg, prot.bundle, base, RevertScope::ALL).tensors},
  };
  const double solo_a = accuracy(cfg, a, eval_a);
  const double solo_b = accuracy(cfg, b, eval_b);
  std::map<std::string, NamedTensors> best_merged;  // "variant/method"
  nlohmann::json merges = nlohmann::json::object();
  for (const auto& v : variants) {
    const TaskVectorSet tv = make_task_vectors(base, {v.weights, b});
    nlohmann::json per_method = nlohmann::json::object();
    for (MergeMethod m : kAllMergeMethods) {
      nlohmann::json sweep = nlohmann::json::array();
      double best_score = -1.0;
      nlohmann::json best;
      for (double lambda : sc.lambdas) {
        MergeConfig mc;
        mc.method = m;
        mc.lambda = lambda;
        mc.trim_keep_fraction = sc.trim;
        mc.drop_rate = sc.drop;
        mc.seed = stream(sc, kMerge);
        MergeResult r = merge(tv, mc);
        const double acc_a = accuracy(cfg, r.merged, eval_a);
        const double acc_b = accuracy(cfg, r.merged, eval_b);
        sweep.push_back({{"lambda", lambda}, {"task_a", acc_a}, {"task_b", acc_b}});
        // The owner of an unprotected pair tunes for the weaker retention;
        // an attacker tunes for the stolen task.
        const double score = std::string(v.name) == "unprotected"
                                 ? std::min(solo_a > 0 ? acc_a / solo_a : 0.0, solo_b > 0 ? acc_b / solo_b : 0.0)
                                 : acc_a;
        if (score > best_score) {
          best_score = score;
          best = sweep.back();
          best_merged[std::string(v.name) + "/" + to_string(m)] = r.merged;
        }
      }
      per_method[to_string(m)] = {{"sweep", sweep}, {"best", best}};
    }
    merges[v.name] = per_method;
  }
  report["merges"] = merges;

  // Interpolation curves on the mean loss of both tasks.
  const std::vector<const Batch*> both{&eval_a, &eval_b};
  const auto curve_experts = mean_curve(cfg, a, b, both, sc.curve_steps);
  const auto curve_protected = mean_curve(cfg, a_projected, b, both, sc.curve_steps);
  const auto curve_base_protected = interpolation_curve(cfg, base, a_projected, eval_a, sc.curve_steps);
  write_file(dir / "curve_experts.csv", curve_csv(curve_experts));
  write_file(dir / "curve_protected_a_b.csv", curve_csv(curve_protected));
  write_file(dir / "curve_base_protected_a.csv", curve_csv(curve_base_protected));
  report["curves"] = {{"loss", "mean of task_a and task_b masked cross-entropy"},
                      {"experts", curve_summary(curve_experts, "curve_experts.csv")},
                      {"protected_a_b", curve_summary(curve_protected, "curve_protected_a_b.csv")},
                      {"base_protected_a", curve_summary(curve_base_protected, "curve_base_protected_a.csv")}};

  // Landscape over base, A, B and the attention-projected A on task A loss.
  LandscapeOptions lo;
  lo.steps = sc.landscape_steps;
  lo.margin = sc.landscape_margin;
  lo.include_embeddings = sc.landscape_embeddings;
  lo.seed = stream(sc, kLandscape);
  const std::vector<std::string> labels{"base", "expert_a", "expert_b", "expert_a_projected"};
  const LandscapeGrid grid = loss_landscape(cfg, {base, a, b, a_projected}, eval_a, lo);
  write_file(dir / "landscape.csv", grid_csv(grid, labels));
  nlohmann::json anchors = nlohmann::json::object();
  for (std::size_t i = 0; i < labels.size(); ++i)
    anchors[labels[i]] = {{"x", grid.anchor_coords[i][0]}, {"y", grid.anchor_coords[i][1]}, {"residual", grid.residuals[i]}};
  report["landscape"] = {{"file", "landscape.csv"}, {"loss", "task_a masked cross-entropy"}, {"anchors", anchors}};

  // Sharpness of the original and fully protected expert on task A.
  SharpnessConfig shc{sc.epsilon, sc.sharpness_samples, sc.ascent_steps, stream(sc, kSharpness)};
  const double sharp_a = sharpness(cfg, a, eval_a, shc);
  const double sharp_p = sharpness(cfg, prot.bundle.tensors, eval_a, shc);
  report["sharpness"] = {{"expert_a", sharp_a}, {"expert_a_protected", sharp_p}, {"epsilon", sc.epsilon}};

  // Fine-tune attack on task-arithmetic merges with a limited labeled pool.
  TrainConfig budget;
  budget.steps = sc.attack_steps;
  budget.lr = sc.attack_lr;
  budget.batch_size = sc.batch_size;
  budget.pool_size = sc.attack_pool;
  budget.seed = stream(sc, kAttack);
  nlohmann::json ft = nlohmann::json::object();
  for (const char* v : {"unprotected", "revert_ffn", "revert_all"}) {
    const auto r = finetune_attack(cfg, best_merged.at(std::string(v) + "/task_arithmetic"), task_a, budget, eval_a);
    nlohmann::json curve = nlohmann::json::array();
    for (const auto& [step, acc] : r.accuracy_curve) curve.push_back({{"step", step}, {"task_a", acc}});
    ft[v] = {{"curve", curve}, {"gain", r.accuracy_curve.back().second - r.accuracy_curve.front().second}};
  }
  report["finetune_attack"] = ft;

  report["artifacts"] = {kBaseArtifact,       kExpertAArtifact,    kExpertBArtifact,  "expert_a_protected.mbwt",
                         "curve_experts.csv", "curve_protected_a_b.csv", "curve_base_protected_a.csv",
                         "landscape.csv",     "report.json"};
  write_file(dir / "report.json", canonical_json(report));
  return report;
}

nlohmann::json scenario_run(const ScenarioConfig& sc, const std::filesystem::path& dir) {
  scenario_train(sc, dir);
  return scenario_evaluate(sc, dir);
}

std::string canonical_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

}  // namespace mb
