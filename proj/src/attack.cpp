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


#include "mergebarrier/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mergebarrier/errors.hpp"

namespace mb {

namespace {

const char* const kTaylorSuffixes[] = {"tffn.w1", "tffn.b1", "tffn.z0", "tffn.c"};
const char* const kPlainFfn[] = {"ffn.w1", "ffn.b1", "ffn.w2", "ffn.c"};

double median(std::vector<double> v) {
  const std::size_t n = v.size(), mid = n / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  const double hi = v[mid];
  if (n % 2 == 1) return hi;
  return (*std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)) + hi) / 2.0;
}

// Applies per-(layer, kv head) column scales: wq/wk by a and 1/a, wv by b and
// wo rows by 1/b. `invert` swaps the roles to undo a transform.
void scale_attention(const ModelConfig& cfg, NamedTensors& w, const AttentionScales& s, bool invert) {
  const int hd = cfg.head_dim(), group = cfg.group_size();
  for (int l = 0; l < cfg.n_layers; ++l) {
    Matrix& wq = w.at(layer_tensor(l, "attn.wq"));
    Matrix& wk = w.at(layer_tensor(l, "attn.wk"));
    Matrix& wv = w.at(layer_tensor(l, "attn.wv"));
    Matrix& wo = w.at(layer_tensor(l, "attn.wo"));
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      RowVector a = s.a[static_cast<std::size_t>(l)][static_cast<std::size_t>(g)];
      RowVector b = s.b[static_cast<std::size_t>(l)][static_cast<std::size_t>(g)];
      if (invert) {
        a = a.cwiseInverse();
        b = b.cwiseInverse();
      }
      for (int h = g * group; h < (g + 1) * group; ++h) {
        wq.middleCols(h * hd, hd) = wq.middleCols(h * hd, hd) * a.asDiagonal();
        wo.middleRows(h * hd, hd) = b.cwiseInverse().asDiagonal() * wo.middleRows(h * hd, hd);
      }
      wk.middleCols(g * hd, hd) = wk.middleCols(g * hd, hd) * a.cwiseInverse().asDiagonal();
      wv.middleCols(g * hd, hd) = wv.middleCols(g * hd, hd) * b.asDiagonal();
    }
  }
}

// Moves hidden unit perm[i] of the source into slot i (forward) or slot i
// back into perm[i] (inverse).
void permute_ffn(NamedTensors& w, int layer, const std::vector<int>& perm, bool inverse) {
  Matrix& w1 = w.at(layer_tensor(layer, "ffn.w1"));
  Matrix& b1 = w.at(layer_tensor(layer, "ffn.b1"));
  Matrix& w2 = w.at(layer_tensor(layer, "ffn.w2"));
  const Matrix w1s = w1, b1s = b1, w2s = w2;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto dst = static_cast<Eigen::Index>(inverse ? perm[i] : static_cast<int>(i));
    const auto src = static_cast<Eigen::Index>(inverse ? static_cast<int>(i) : perm[i]);
    w1.col(dst) = w1s.col(src);
    b1(0, dst) = b1s(0, src);
    w2.row(dst) = w2s.row(src);
  }
}

}  // namespace

std::pair<NamedTensors, ParamsKeys> params_transform(const ModelConfig& cfg, const NamedTensors& w,
                                                     std::uint64_t seed, double s_min, double s_max) {
  if (!(s_min > 0.0) || !(s_max >= s_min)) throw ParameterError("scale bounds must satisfy 0 < s_min <= s_max");
  validate_weights(cfg, w);
  const int hd = cfg.head_dim();
  ParamsKeys keys;
  NamedTensors out = w;
  for (int l = 0; l < cfg.n_layers; ++l) {
    RngState rng{rng_word(seed, static_cast<std::uint64_t>(l)), 0};
    std::vector<int> perm(static_cast<std::size_t>(cfg.ffn_dim));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(next_u64(rng) % i);
      std::swap(perm[i - 1], perm[j]);
    }
    permute_ffn(out, l, perm, false);
    keys.perms.push_back(std::move(perm));

    std::vector<RowVector> a, b;
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      RowVector ag(hd), bg(hd);
      for (int c = 0; c < hd; ++c) ag(c) = s_min + (s_max - s_min) * next_uniform(rng);
      for (int c = 0; c < hd; ++c) bg(c) = s_min + (s_max - s_min) * next_uniform(rng);
      a.push_back(ag);
      b.push_back(bg);
    }
    keys.scales.a.push_back(std::move(a));
    keys.scales.b.push_back(std::move(b));
  }
  scale_attention(cfg, out, keys.scales, false);
  return {std::move(out), std::move(keys)};
}

std::vector<int> recover_permutation(const Matrix& w1_protected, const Matrix& w1_base) {
  if (w1_protected.rows() != w1_base.rows() || w1_protected.cols() != w1_base.cols())
    throw DimensionError("recover_permutation: shapes " + shape_of(w1_protected) + " and " + shape_of(w1_base) +
                         " differ");
  std::vector<int> out(static_cast<std::size_t>(w1_protected.rows()));
  for (Eigen::Index i = 0; i < w1_protected.rows(); ++i) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < w1_base.rows(); ++j) {
      const double d = (w1_protected.row(i) - w1_base.row(j)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

AttentionScales recover_scaling(const ModelConfig& cfg, const NamedTensors& attn_protected,
                                const NamedTensors& attn_base, double tau) {
  if (!(tau >= 0.0)) throw ParameterError("tau must be >= 0");
  const int hd = cfg.head_dim(), group = cfg.group_size();
  AttentionScales s;
  auto estimate = [&](const Matrix& wp, const Matrix& wb, const std::vector<int>& heads, int l, int g,
                      const char* which) {
    if (wp.rows() != wb.rows() || wp.cols() != wb.cols())
      throw DimensionError("recover_scaling: protected and base attention shapes differ");
    RowVector out(hd);
    for (int c = 0; c < hd; ++c) {
      std::vector<double> ratios;
      for (int h : heads)
        for (Eigen::Index r = 0; r < wb.rows(); ++r) {
          const double base = wb(r, h * hd + c);
          if (std::abs(base) > tau) ratios.push_back(wp(r, h * hd + c) / base);
        }
      if (ratios.empty())
        throw InputError(std::string("unrecoverable ") + which + " scale at (layer " + std::to_string(l) +
                         ", head " + std::to_string(g) + ", row " + std::to_string(c) + ")");
      out(c) = median(std::move(ratios));
    }
    return out;
  };
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Matrix& qp = attn_protected.at(layer_tensor(l, "attn.wq"));
    const Matrix& qb = attn_base.at(layer_tensor(l, "attn.wq"));
    const Matrix& vp = attn_protected.at(layer_tensor(l, "attn.wv"));
    const Matrix& vb = attn_base.at(layer_tensor(l, "attn.wv"));
    std::vector<RowVector> a, b;
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      std::vector<int> heads;
      for (int h = g * group; h < (g + 1) * group; ++h) heads.push_back(h);
      a.push_back(estimate(qp, qb, heads, l, g, "query"));
      b.push_back(estimate(vp, vb, {g}, l, g, "value"));
    }
    s.a.push_back(std::move(a));
    s.b.push_back(std::move(b));
  }
  return s;
}

NamedTensors undo_params(const ModelConfig& cfg, const NamedTensors& w, const ParamsKeys& keys) {
  if (keys.perms.size() != static_cast<std::size_t>(cfg.n_layers) ||
      keys.scales.a.size() != static_cast<std::size_t>(cfg.n_layers))
    throw DimensionError("undo_params: keys do not match the model config");
  NamedTensors out = w;
  scale_attention(cfg, out, keys.scales, true);
  for (int l = 0; l < cfg.n_layers; ++l) permute_ffn(out, l, keys.perms[static_cast<std::size_t>(l)], true);
  return out;
}

DecodeResult params_decode(const ModelConfig& cfg, const NamedTensors& w_protected, const NamedTensors& reference,
                           double tau) {
  validate_weights(cfg, w_protected);
  validate_weights(cfg, reference);
  DecodeResult r;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string name = layer_tensor(l, "ffn.w1");
    // Hidden units are columns of w1 here; the matcher wants them as rows.
    r.keys.perms.push_back(recover_permutation(w_protected.at(name).transpose(), reference.at(name).transpose()));
  }
  r.keys.scales = recover_scaling(cfg, w_protected, reference, tau);
  r.weights = undo_params(cfg, w_protected, r.keys);
  return r;
}

nlohmann::json to_json(const AttackReport& r) {
  return {{"recovered_fraction", r.recovered_fraction},
          {"max_scale_error", r.max_scale_error},
          {"post_attack_accuracy", r.post_attack_accuracy}};
}

AttackReport score_keys(const ParamsKeys& truth, const ParamsKeys& recovered) {
  if (truth.perms.size() != recovered.perms.size() || truth.scales.a.size() != recovered.scales.a.size())
    throw DimensionError("score_keys: key sets differ in layer count");
  AttackReport r;
  std::size_t hits = 0, total = 0;
  for (std::size_t l = 0; l < truth.perms.size(); ++l) {
    if (truth.perms[l].size() != recovered.perms[l].size()) throw DimensionError("score_keys: permutation sizes differ");
    for (std::size_t i = 0; i < truth.perms[l].size(); ++i) hits += truth.perms[l][i] == recovered.perms[l][i];
    total += truth.perms[l].size();
    for (std::size_t g = 0; g < truth.scales.a[l].size(); ++g) {
      r.max_scale_error = std::max(r.max_scale_error, (truth.scales.a[l][g] - recovered.scales.a[l][g]).cwiseAbs().maxCoeff());
      r.max_scale_error = std::max(r.max_scale_error, (truth.scales.b[l][g] - recovered.scales.b[l][g]).cwiseAbs().maxCoeff());
    }
  }
  r.recovered_fraction = total ? static_cast<double>(hits) / static_cast<double>(total) : 1.0;
  return r;
}

ProtectedBundle revert_modified_layers(const ModelConfig& cfg, const ProtectedBundle& bundle,
                                       const NamedTensors& base, RevertScope scope) {
  validate_weights(cfg, base);
  validate_bundle(cfg, bundle.tensors);
  ProtectedBundle out = bundle;
  for (int l : bundle.manifest.taylor_layers) {
    for (const char* s : kTaylorSuffixes) out.tensors.erase(layer_tensor(l, s));
    for (int n = 0; out.tensors.erase(layer_tensor(l, "tffn.coef" + std::to_string(n))) > 0; ++n) {
    }
    for (const char* s : kPlainFfn) out.tensors[layer_tensor(l, s)] = base.at(layer_tensor(l, s));
  }
  out.manifest.taylor_layers.clear();
  out.manifest.taylor_order = 0;
  if (scope == RevertScope::ALL) {
    for (int l : bundle.manifest.projected_layers)
      for (const char* s : {"attn.wq", "attn.wk"}) out.tensors[layer_tensor(l, s)] = base.at(layer_tensor(l, s));
    out.manifest.projected_layers.clear();
  }
  if (out.manifest.empty()) out.manifest.flip_fraction = 0.0;
  return out;
}

FinetuneAttackResult finetune_attack(const ModelConfig& cfg, const NamedTensors& w_merged, const TaskSpec& task,
                                     const TrainConfig& budget, const Batch& eval) {
  FinetuneAttackResult r;
  auto observe = [&](int step, const NamedTensors& w) {
    if (step % kAttackEvalInterval == 0 || step == budget.steps) r.accuracy_curve.emplace_back(step, accuracy(cfg, w, eval));
  };
  r.weights = train(cfg, w_merged, task, budget, observe).weights;
  return r;
}

}  // namespace mb
