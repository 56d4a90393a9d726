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


#include "mergebarrier/protect.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mergebarrier/errors.hpp"

namespace mb {

namespace {

const Matrix& get(const NamedTensors& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw SchemaError("missing tensor '" + name + "'");
  return it->second;
}

const char* const kPlainFfn[] = {"ffn.w1", "ffn.b1", "ffn.w2", "ffn.c"};

std::string coef_name(int layer, int n) { return layer_tensor(layer, "tffn.coef" + std::to_string(n)); }

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

}  // namespace

void ProtectConfig::validate() const {
  if (!(flip_fraction >= 0.0 && flip_fraction <= 1.0))
    throw ParameterError("flip fraction must lie in [0, 1]");
  if (taylor_order < 0 || taylor_order > kMaxDerivativeOrder)
    throw ParameterError("taylor order must lie in [0, " + std::to_string(kMaxDerivativeOrder) + "]");
  if (rsvd_rank < 0) throw ParameterError("rsvd rank must be >= 0 (0 = auto)");
  if (calibration_samples < 1) throw ParameterError("calibration samples must be >= 1");
}

int flip_count(double rho, int head_dim) {
  const double raw = std::ceil(rho * head_dim - 1e-12);
  return std::clamp(static_cast<int>(raw), 0, head_dim);
}

double flip_objective(const std::vector<Matrix>& wq_slices, const Matrix& wk_slice, const Matrix& p) {
  const Matrix d = p - Matrix::Identity(p.rows(), p.cols());
  double total = (wk_slice * d).squaredNorm();
  for (const auto& q : wq_slices) total += (q * d).squaredNorm();
  return total;
}

double merge_displacement(const Matrix& wq, const Matrix& wk, const Matrix& p) {
  const Matrix merged = (wq * p + wq) * (wk * p + wk).transpose();
  const Matrix original = (2.0 * wq) * (2.0 * wk).transpose();
  return (merged - original).squaredNorm() / 16.0;
}

const ProjectionBlock& ProjectionPlan::block(int layer, int kv_head) const {
  if (layer < 0 || layer >= n_layers || kv_head < 0 || kv_head >= n_kv_heads)
    throw DimensionError("projection plan has no block (" + std::to_string(layer) + ", " +
                         std::to_string(kv_head) + ")");
  return blocks[static_cast<std::size_t>(layer * n_kv_heads + kv_head)];
}

Matrix ProjectionPlan::assembled(int layer) const {
  Matrix out = Matrix::Zero(n_kv_heads * head_dim, n_kv_heads * head_dim);
  for (int g = 0; g < n_kv_heads; ++g) out.block(g * head_dim, g * head_dim, head_dim, head_dim) = block(layer, g).p;
  return out;
}

ProjectionBlock build_block(const Matrix& s, int flips, bool use_rsvd, int rsvd_rank, RngState rng) {
  if (s.rows() != s.cols()) throw DimensionError("build_block: Gram matrix " + shape_of(s) + " is not square");
  const Eigen::Index d = s.rows();
  if (flips < 0 || flips > d) throw ParameterError("build_block: flip count out of range");

  ProjectionBlock out;
  out.flips = flips;
  Matrix basis;
  if (use_rsvd) {
    const Eigen::Index auto_rank = std::min<Eigen::Index>(d, kRsvdAutoRankCap);
    Eigen::Index k = rsvd_rank > 0 ? std::min<Eigen::Index>(rsvd_rank, d) : auto_rank;
    k = std::max<Eigen::Index>(k, flips);
    if (k == 0) k = 1;
    // S is symmetric PSD, so its singular pairs are its eigenpairs.
    SvdResult<double> svd = rsvd(s, k, rng);
    basis = svd.u;
    out.eigenvalues = svd.sigma;
  } else {
    EigenDecomposition<double> ed = jacobi_eigh(s);
    basis = ed.eigenvectors;
    out.eigenvalues = ed.eigenvalues;
  }
  const Matrix uf = basis.leftCols(flips);
  out.p = Matrix::Identity(d, d) - 2.0 * uf * uf.transpose();
  return out;
}

ProjectionPlan build_projection(const ModelConfig& cfg, const NamedTensors& w, const ProtectConfig& pc) {
  cfg.validate();
  pc.validate();
  const int hd = cfg.head_dim(), group = cfg.group_size();
  const int flips = flip_count(pc.flip_fraction, hd);
  const bool use_rsvd = pc.rsvd_enabled && hd > kRsvdHeadDimThreshold;

  ProjectionPlan plan;
  plan.n_layers = cfg.n_layers;
  plan.n_kv_heads = cfg.n_kv_heads;
  plan.head_dim = hd;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const Matrix& wq = get(w, layer_tensor(l, "attn.wq"));
    const Matrix& wk = get(w, layer_tensor(l, "attn.wk"));
    if (wq.cols() != cfg.n_heads * hd || wk.cols() != cfg.n_kv_heads * hd)
      throw DimensionError("build_projection: attention weights of layer " + std::to_string(l) +
                           " do not match the config");
    for (int g = 0; g < cfg.n_kv_heads; ++g) {
      const auto k = wk.middleCols(g * hd, hd);
      Matrix s = k.transpose() * k;
      std::vector<int> heads;
      for (int h = g * group; h < (g + 1) * group; ++h) {
        const auto q = wq.middleCols(h * hd, hd);
        s.noalias() += q.transpose() * q;
        heads.push_back(h);
      }
      RngState rng{rng_word(pc.seed, static_cast<std::uint64_t>(l * cfg.n_kv_heads + g)), 0};
      ProjectionBlock b = build_block(s, flips, use_rsvd, pc.rsvd_rank, rng);
      b.layer = l;
      b.kv_head = g;
      b.query_heads = std::move(heads);
      plan.blocks.push_back(std::move(b));
    }
  }
  return plan;
}

NamedTensors apply_projection(const ModelConfig& cfg, const NamedTensors& w, const ProjectionPlan& plan) {
  cfg.validate();
  const int hd = cfg.head_dim();
  if (plan.n_layers != cfg.n_layers || plan.n_kv_heads != cfg.n_kv_heads || plan.head_dim != hd ||
      plan.blocks.size() != static_cast<std::size_t>(cfg.n_layers * cfg.n_kv_heads))
    throw DimensionError("apply_projection: plan does not match the model config");
  NamedTensors out = w;
  for (const auto& b : plan.blocks) {
    if (b.p.rows() != hd || b.p.cols() != hd) throw DimensionError("apply_projection: block is not head_dim square");
    if (b.p.isIdentity(0.0)) continue;  // keeps identity plans bitwise exact
    Matrix& wq = out.at(layer_tensor(b.layer, "attn.wq"));
    Matrix& wk = out.at(layer_tensor(b.layer, "attn.wk"));
    for (int h : b.query_heads) wq.middleCols(h * hd, hd) = Matrix(wq.middleCols(h * hd, hd) * b.p);
    wk.middleCols(b.kv_head * hd, hd) = Matrix(wk.middleCols(b.kv_head * hd, hd) * b.p);
  }
  return out;
}

RowVector CalibrationStats::z0(int layer) const {
  const auto i = static_cast<std::size_t>(layer);
  if (layer < 0 || i >= z_min.size()) throw CalibrationError("no calibration stats for layer " + std::to_string(layer));
  return (z_min[i] + z_max[i]) / 2.0;
}

CalibrationStats calibrate_z0(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch) {
  if (batch.size() < 1 || batch.seq_len() < 1) throw CalibrationError("empty calibration set");
  const std::vector<Matrix> xs = ffn_inputs(cfg, w, batch);
  CalibrationStats stats;
  stats.sample_count = static_cast<long>(xs.front().rows());
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string plain = layer_tensor(l, "ffn.w1");
    const Matrix& w1 = w.count(plain) ? w.at(plain) : get(w, layer_tensor(l, "tffn.w1"));
    const Matrix z = xs[static_cast<std::size_t>(l)] * w1;
    stats.z_min.push_back(z.colwise().minCoeff());
    stats.z_max.push_back(z.colwise().maxCoeff());
  }
  return stats;
}

CalibrationStats calibrate_z0(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task,
                              const ProtectConfig& pc) {
  if (pc.calibration_samples < 1) throw CalibrationError("empty calibration set");
  return calibrate_z0(cfg, w, gen_task(task, pc.calibration_samples));
}

int TaylorFfn::order() const {
  if (layers.empty()) return -1;
  return static_cast<int>(layers.front().coeffs.size()) - 1;
}

TaylorFfn reparameterize_ffn(const ModelConfig& cfg, const NamedTensors& w, const CalibrationStats& stats,
                             const ProtectConfig& pc) {
  pc.validate();
  if (stats.z_min.size() != static_cast<std::size_t>(cfg.n_layers))
    throw CalibrationError("calibration stats cover " + std::to_string(stats.z_min.size()) + " layers, model has " +
                           std::to_string(cfg.n_layers));
  const int order = pc.taylor_order;
  TaylorFfn out;
  out.activation = cfg.activation;
  for (int l = 0; l < cfg.n_layers; ++l) {
    TaylorFfnLayer t;
    t.layer = l;
    t.w1 = get(w, layer_tensor(l, "ffn.w1"));
    t.b1 = get(w, layer_tensor(l, "ffn.b1")).row(0);
    t.c = get(w, layer_tensor(l, "ffn.c")).row(0);
    t.z0 = stats.z0(l);
    const Matrix& w2 = get(w, layer_tensor(l, "ffn.w2"));
    if (t.z0.size() != w2.rows()) throw CalibrationError("calibration width does not match ffn_dim");
    t.coeffs.assign(static_cast<std::size_t>(order + 1), Matrix(w2.rows(), w2.cols()));
    for (Eigen::Index j = 0; j < w2.rows(); ++j) {
      const std::vector<double> d = act_derivatives(cfg.activation, order, t.z0(j) + t.b1(j));
      for (int n = 0; n <= order; ++n)
        t.coeffs[static_cast<std::size_t>(n)].row(j) = w2.row(j) * (d[static_cast<std::size_t>(n)] / factorial(n));
    }
    out.layers.push_back(std::move(t));
  }
  return out;
}

Matrix taylor_ffn_apply(const TaylorFfnLayer& layer, const Matrix& x) {
  Matrix d = x * layer.w1;
  d.rowwise() -= layer.z0;
  Matrix power = Matrix::Ones(d.rows(), d.cols());
  Matrix y = Matrix::Zero(d.rows(), layer.c.size());
  for (std::size_t n = 0; n < layer.coeffs.size(); ++n) {
    if (n > 0) power = power.cwiseProduct(d);
    y.noalias() += power * layer.coeffs[n];
  }
  y.rowwise() += layer.c;
  return y;
}

Matrix plain_ffn_apply(const ModelConfig& cfg, const NamedTensors& w, int layer, const Matrix& x) {
  Matrix pre = x * get(w, layer_tensor(layer, "ffn.w1"));
  pre.rowwise() += get(w, layer_tensor(layer, "ffn.b1")).row(0);
  const Matrix u = pre.unaryExpr([&](double v) { return act_eval(cfg.activation, v); });
  Matrix y = u * get(w, layer_tensor(layer, "ffn.w2"));
  y.rowwise() += get(w, layer_tensor(layer, "ffn.c")).row(0);
  return y;
}

NamedTensors install_taylor(const NamedTensors& w, const TaylorFfn& t) {
  NamedTensors out = w;
  for (const auto& layer : t.layers) {
    const int l = layer.layer;
    for (const char* s : kPlainFfn) out.erase(layer_tensor(l, s));
    out[layer_tensor(l, "tffn.w1")] = layer.w1;
    out[layer_tensor(l, "tffn.b1")] = layer.b1;
    out[layer_tensor(l, "tffn.z0")] = layer.z0;
    out[layer_tensor(l, "tffn.c")] = layer.c;
    for (std::size_t n = 0; n < layer.coeffs.size(); ++n) out[coef_name(l, static_cast<int>(n))] = layer.coeffs[n];
  }
  return out;
}

void validate_bundle(const ModelConfig& cfg, const NamedTensors& bundle) {
  cfg.validate();
  const auto schema = model_schema(cfg);
  std::set<std::string> seen;
  auto expect = [&](const std::string& name, Eigen::Index r, Eigen::Index c) {
    auto it = bundle.find(name);
    if (it == bundle.end()) throw BundleError("bundle is missing tensor '" + name + "'");
    if (it->second.rows() != r || it->second.cols() != c)
      throw BundleError("bundle tensor '" + name + "' has shape " + shape_of(it->second) + ", expected " +
                        std::to_string(r) + "x" + std::to_string(c));
    seen.insert(name);
  };
  for (const auto& [name, shape] : schema)
    if (name.find(".ffn.") == std::string::npos) expect(name, shape.first, shape.second);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const bool plain = bundle.count(layer_tensor(l, "ffn.w2")) > 0;
    const bool taylor = bundle.count(layer_tensor(l, "tffn.coef0")) > 0;
    if (plain == taylor)
      throw BundleError("layer " + std::to_string(l) + " must carry exactly one of a plain or a Taylor FFN");
    if (plain) {
      for (const char* s : kPlainFfn) {
        const auto& shape = schema.at(layer_tensor(l, s));
        expect(layer_tensor(l, s), shape.first, shape.second);
      }
      continue;
    }
    expect(layer_tensor(l, "tffn.w1"), cfg.dim, cfg.ffn_dim);
    expect(layer_tensor(l, "tffn.b1"), 1, cfg.ffn_dim);
    expect(layer_tensor(l, "tffn.z0"), 1, cfg.ffn_dim);
    expect(layer_tensor(l, "tffn.c"), 1, cfg.dim);
    int n = 0;
    while (bundle.count(coef_name(l, n))) expect(coef_name(l, n++), cfg.ffn_dim, cfg.dim);
    if (n - 1 > kMaxDerivativeOrder)
      throw BundleError("layer " + std::to_string(l) + " Taylor order " + std::to_string(n - 1) + " exceeds " +
                        std::to_string(kMaxDerivativeOrder));
  }
  for (const auto& [name, m] : bundle)
    if (!seen.count(name)) throw BundleError("bundle has unexpected tensor '" + name + "'");
}

TaylorFfn extract_taylor(const ModelConfig& cfg, const NamedTensors& bundle) {
  validate_bundle(cfg, bundle);
  TaylorFfn out;
  out.activation = cfg.activation;
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (!bundle.count(coef_name(l, 0))) continue;
    TaylorFfnLayer t;
    t.layer = l;
    t.w1 = bundle.at(layer_tensor(l, "tffn.w1"));
    t.b1 = bundle.at(layer_tensor(l, "tffn.b1")).row(0);
    t.z0 = bundle.at(layer_tensor(l, "tffn.z0")).row(0);
    t.c = bundle.at(layer_tensor(l, "tffn.c")).row(0);
    for (int n = 0; bundle.count(coef_name(l, n)); ++n) t.coeffs.push_back(bundle.at(coef_name(l, n)));
    if (!out.layers.empty() && out.layers.front().coeffs.size() != t.coeffs.size())
      throw BundleError("Taylor layers disagree on the expansion order");
    out.layers.push_back(std::move(t));
  }
  return out;
}

ProtectResult protect_model(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task,
                            const ProtectConfig& pc) {
  validate_weights(cfg, w);
  pc.validate();
  ProtectResult r;
  r.bundle.manifest.flip_fraction = pc.flip_fraction;
  NamedTensors out = w;
  if (pc.project_attention) {
    r.plan = build_projection(cfg, w, pc);
    out = apply_projection(cfg, w, r.plan);
    if (flip_count(pc.flip_fraction, cfg.head_dim()) > 0)
      for (int l = 0; l < cfg.n_layers; ++l) r.bundle.manifest.projected_layers.push_back(l);
  }
  if (pc.reparameterize_ffn) {
    // Projection leaves the FFN inputs unchanged, so calibrate on the original.
    r.stats = calibrate_z0(cfg, w, task, pc);
    out = install_taylor(out, reparameterize_ffn(cfg, w, r.stats, pc));
    for (int l = 0; l < cfg.n_layers; ++l) r.bundle.manifest.taylor_layers.push_back(l);
    r.bundle.manifest.taylor_order = pc.taylor_order;
  }
  r.bundle.tensors = std::move(out);
  return r;
}

Matrix protected_forward(const ModelConfig& cfg, const NamedTensors& bundle, const Batch& batch) {
  validate_bundle(cfg, bundle);
  return forward(cfg, bundle, batch).logits;
}

std::vector<RemainderSummary> remainder_stats(const ModelConfig& cfg, const NamedTensors& w,
                                              const NamedTensors& bundle, const TaskSpec& task, int n) {
  if (n < 1) throw ParameterError("remainder_stats: n must be >= 1");
  validate_weights(cfg, w);
  const TaylorFfn taylor = extract_taylor(cfg, bundle);
  const std::vector<Matrix> xs = ffn_inputs(cfg, w, gen_task(task, n));
  std::vector<RemainderSummary> out(static_cast<std::size_t>(cfg.n_layers));
  for (const auto& t : taylor.layers) {
    const Matrix& x = xs[static_cast<std::size_t>(t.layer)];
    const Matrix err = (plain_ffn_apply(cfg, w, t.layer, x) - taylor_ffn_apply(t, x)).cwiseAbs();
    RemainderSummary& s = out[static_cast<std::size_t>(t.layer)];
    s.count = static_cast<long>(err.size());
    s.mean = err.mean();
    s.max = err.maxCoeff();
    s.stddev = std::sqrt(std::max(0.0, (err.array() - s.mean).square().mean()));
  }
  return out;
}

}  // namespace mb
