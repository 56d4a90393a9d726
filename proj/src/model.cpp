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
#include "mergebarrier/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string_view>

#include "mergebarrier/errors.hpp"

namespace mb {

namespace {

constexpr double kRmsEps = 1e-5;
constexpr double kInitScale = 0.02;

const Matrix& tensor(const NamedTensors& w, const std::string& name) {
  auto it = w.find(name);
  if (it == w.end()) throw SchemaError("missing tensor '" + name + "'");
  return it->second;
}

int taylor_order(const NamedTensors& w, int layer) {
  int n = 0;
  while (w.count(layer_tensor(layer, "tffn.coef" + std::to_string(n)))) ++n;
  if (n == 0) throw BundleError("layer " + std::to_string(layer) + " has no Taylor coefficients");
  return n - 1;
}

enum class FfnMode { Plain, Taylor };

FfnMode ffn_mode(const NamedTensors& w, int layer) {
  if (w.count(layer_tensor(layer, "ffn.w2"))) return FfnMode::Plain;
  if (w.count(layer_tensor(layer, "tffn.coef0"))) return FfnMode::Taylor;
  throw SchemaError("layer " + std::to_string(layer) + " has neither ffn.w2 nor tffn.coef0");
}

Matrix act_apply(ActivationKind kind, const Matrix& x) {
  return x.unaryExpr([kind](double v) { return act_eval(kind, v); });
}

Matrix act_grad(ActivationKind kind, const Matrix& x) {
  if (kind == ActivationKind::GELU)
    return x.unaryExpr([](double v) { return normal_cdf(v) + v * normal_pdf(v); });
  return x.unaryExpr([](double v) {
    const double s = sigmoid(v);
    return s * (1.0 + v * (1.0 - s));
  });
}

}  // namespace

std::string layer_tensor(int layer, const std::string& suffix) {
  return "layer." + std::to_string(layer) + "." + suffix;
}

void ModelConfig::validate() const {
  if (vocab < 1 || dim < 1 || n_layers < 1 || n_heads < 1 || n_kv_heads < 1 || ffn_dim < 1 || seq_len < 1)
    throw ParameterError("model config: all counts must be >= 1");
  if (dim % n_heads != 0) throw ParameterError("model config: dim must be divisible by n_heads");
  if (n_heads % n_kv_heads != 0) throw ParameterError("model config: n_heads must be divisible by n_kv_heads");
}

std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> model_schema(const ModelConfig& cfg) {
  cfg.validate();
  const Eigen::Index hd = cfg.head_dim();
  std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> s;
  s["embed.tok"] = {cfg.vocab, cfg.dim};
  s["embed.pos"] = {cfg.seq_len, cfg.dim};
  s["head.w"] = {cfg.dim, cfg.vocab};
  for (int l = 0; l < cfg.n_layers; ++l) {
    s[layer_tensor(l, "attn.wq")] = {cfg.dim, cfg.n_heads * hd};
    s[layer_tensor(l, "attn.wk")] = {cfg.dim, cfg.n_kv_heads * hd};
    s[layer_tensor(l, "attn.wv")] = {cfg.dim, cfg.n_kv_heads * hd};
    s[layer_tensor(l, "attn.wo")] = {cfg.n_heads * hd, cfg.dim};
    s[layer_tensor(l, "norm.g")] = {1, cfg.dim};
    s[layer_tensor(l, "ffn.w1")] = {cfg.dim, cfg.ffn_dim};
    s[layer_tensor(l, "ffn.b1")] = {1, cfg.ffn_dim};
    s[layer_tensor(l, "ffn.w2")] = {cfg.ffn_dim, cfg.dim};
    s[layer_tensor(l, "ffn.c")] = {1, cfg.dim};
  }
  return s;
}

void validate_weights(const ModelConfig& cfg, const NamedTensors& w) {
  const auto schema = model_schema(cfg);
  for (const auto& [name, shape] : schema) {
    auto it = w.find(name);
    if (it == w.end()) throw SchemaError("missing tensor '" + name + "'");
    if (it->second.rows() != shape.first || it->second.cols() != shape.second) {
      std::ostringstream os;
      os << "tensor '" << name << "' has shape " << shape_of(it->second) << ", expected " << shape.first << "x"
         << shape.second;
      throw SchemaError(os.str());
    }
  }
  for (const auto& [name, m] : w)
    if (!schema.count(name)) throw SchemaError("unexpected tensor '" + name + "'");
}

// ---------------------------------------------------------------------------
// Tasks

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::MOD_ADD: return "mod_add";
    case TaskKind::COPY: return "copy";
    case TaskKind::REVERSE: return "reverse";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  if (name == "mod_add" || name == "MOD_ADD") return TaskKind::MOD_ADD;
  if (name == "copy" || name == "COPY") return TaskKind::COPY;
  if (name == "reverse" || name == "REVERSE") return TaskKind::REVERSE;
  throw ParameterError("unknown task '" + name + "'");
}

void TaskSpec::validate() const {
  const TokenLayout layout{vocab};
  if (layout.num_values() < 1) throw ParameterError("task config: vocab must leave room for value tokens");
  if (value_offset < 0) throw ParameterError("task config: value_offset must be >= 0");
  if (is_arithmetic()) {
    if (modulus < 1 || value_offset + modulus > layout.num_values())
      throw ParameterError("task config: modulus " + std::to_string(modulus) + " exceeds " +
                           std::to_string(layout.num_values()) + " value tokens");
    if (seq_len < 4) throw ParameterError("task config: MOD_ADD needs seq_len >= 4");
  } else {
    if (alphabet < 1 || value_offset + alphabet > layout.num_values())
      throw ParameterError("task config: alphabet " + std::to_string(alphabet) + " exceeds " +
                           std::to_string(layout.num_values()) + " value tokens");
    if (span < 1 || 2 * span + 2 > seq_len)
      throw ParameterError("task config: span " + std::to_string(span) + " does not fit seq_len " +
                           std::to_string(seq_len));
  }
}

TaskSpec make_task(TaskKind kind, const ModelConfig& cfg, std::uint64_t seed) {
  TaskSpec t;
  t.task = kind;
  t.vocab = cfg.vocab;
  t.seq_len = cfg.seq_len;
  t.seed = seed;
  return t;
}

Batch gen_task(const TaskSpec& task, int n) {
  if (n < 1) throw ParameterError("gen_task: n must be >= 1");
  task.validate();
  const TokenLayout layout{task.vocab};
  const int T = task.seq_len;
  Batch b{TokenGrid::Constant(n, T, layout.pad()), TokenGrid::Constant(n, T, layout.pad()),
          MaskGrid::Constant(n, T, false)};
  RngState rng{task.seed, 0};
  auto draw = [&](int bound) { return static_cast<int>(next_u64(rng) % static_cast<std::uint64_t>(bound)); };

  for (int i = 0; i < n; ++i) {
    std::vector<int> seq;
    int answer_begin = 0, answer_end = 0;  // target positions [begin, end)
    if (task.is_arithmetic()) {
      const int a = draw(task.modulus), c = draw(task.modulus);
      const int answer = (a + c) % task.modulus;
      seq = {a + task.value_offset, c + task.value_offset, layout.eq(), answer + task.value_offset};
      answer_begin = 2;
      answer_end = 3;
    } else {
      std::vector<int> span(static_cast<std::size_t>(task.span));
      for (auto& v : span) v = task.value_offset + draw(task.alphabet);
      seq.push_back(task.task == TaskKind::COPY ? layout.copy_marker() : layout.reverse_marker());
      seq.insert(seq.end(), span.begin(), span.end());
      seq.push_back(layout.sep());
      if (task.task == TaskKind::COPY)
        seq.insert(seq.end(), span.begin(), span.end());
      else
        seq.insert(seq.end(), span.rbegin(), span.rend());
      answer_begin = task.span + 1;
      answer_end = 2 * task.span + 1;
    }
    for (std::size_t t = 0; t < seq.size(); ++t) b.tokens(i, static_cast<Eigen::Index>(t)) = seq[t];
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) b.targets(i, static_cast<Eigen::Index>(t)) = seq[t + 1];
    for (int t = answer_begin; t < answer_end; ++t) b.loss_mask(i, t) = true;
  }
  return b;
}

// ---------------------------------------------------------------------------
// Model

NamedTensors init_model(const ModelConfig& cfg, std::uint64_t seed) {
  NamedTensors w;
  for (const auto& [name, shape] : model_schema(cfg)) {
    const bool is_bias = name.ends_with("ffn.b1") || name.ends_with("ffn.c");
    const bool is_gain = name.ends_with("norm.g");
    if (is_bias) {
      w[name] = Matrix::Zero(shape.first, shape.second);
    } else if (is_gain) {
      w[name] = Matrix::Ones(shape.first, shape.second);
    } else {
      RngState rng{splitmix64(seed) ^ fnv1a(name), 0};
      w[name] = kInitScale * gaussian(rng, shape.first, shape.second);
    }
  }
  return w;
}

namespace {

struct LayerCache {
  Matrix h_in;
  Vector inv_rms;
  Matrix xhat;
  Matrix x;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // batch * heads, each T x T
  Matrix o;
  FfnMode mode = FfnMode::Plain;
  Matrix pre;  // plain: x w1 + b1
  Matrix u;    // plain: act(pre)
  std::vector<Matrix> powers;  // taylor: (z - z0)^n, n = 0..N
};

}  // namespace

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix h_final;
};

namespace {

void check_tokens(const ModelConfig& cfg, const Batch& batch) {
  if (batch.seq_len() > cfg.seq_len || batch.seq_len() < 1)
    throw InputError("batch seq_len " + std::to_string(batch.seq_len()) + " exceeds model seq_len " +
                     std::to_string(cfg.seq_len));
  if (batch.size() < 1) throw InputError("empty batch");
  if ((batch.tokens < 0).any() || (batch.tokens >= cfg.vocab).any())
    throw InputError("token id outside [0, " + std::to_string(cfg.vocab) + ")");
}

Matrix run_forward(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch, ForwardCache* cache) {
  cfg.validate();
  check_tokens(cfg, batch);
  const Eigen::Index B = batch.size(), T = batch.seq_len(), N = B * T;
  const int hd = cfg.head_dim(), group = cfg.group_size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  const Matrix& tok = tensor(w, "embed.tok");
  const Matrix& pos = tensor(w, "embed.pos");
  Matrix h(N, cfg.dim);
  for (Eigen::Index b = 0; b < B; ++b)
    for (Eigen::Index t = 0; t < T; ++t) h.row(b * T + t) = tok.row(batch.tokens(b, t)) + pos.row(t);

  if (cache) cache->layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerCache local;
    LayerCache& c = cache ? cache->layers[static_cast<std::size_t>(l)] : local;
    const Matrix& g = tensor(w, layer_tensor(l, "norm.g"));

    c.inv_rms = ((h.array().square().rowwise().sum() / cfg.dim) + kRmsEps).rsqrt().matrix();
    c.xhat = c.inv_rms.asDiagonal() * h;
    c.x = c.xhat * g.row(0).asDiagonal();

    const Matrix& wq = tensor(w, layer_tensor(l, "attn.wq"));
    const Matrix& wk = tensor(w, layer_tensor(l, "attn.wk"));
    const Matrix& wv = tensor(w, layer_tensor(l, "attn.wv"));
    const Matrix& wo = tensor(w, layer_tensor(l, "attn.wo"));
    c.q.noalias() = c.x * wq;
    c.k.noalias() = c.x * wk;
    c.v.noalias() = c.x * wv;
    c.o.setZero(N, cfg.n_heads * hd);
    c.probs.assign(static_cast<std::size_t>(B * cfg.n_heads), Matrix());
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int hh = 0; hh < cfg.n_heads; ++hh) {
        const int kv = hh / group;
        Matrix s = c.q.block(b * T, hh * hd, T, hd) * c.k.block(b * T, kv * hd, T, hd).transpose() * scale;
        for (Eigen::Index i = 0; i < T; ++i) {
          const double mx = s.row(i).head(i + 1).maxCoeff();
          double sum = 0.0;
          for (Eigen::Index j = 0; j <= i; ++j) {
            s(i, j) = std::exp(s(i, j) - mx);
            sum += s(i, j);
          }
          for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
          for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = 0.0;
        }
        c.o.block(b * T, hh * hd, T, hd).noalias() = s * c.v.block(b * T, kv * hd, T, hd);
        c.probs[static_cast<std::size_t>(b * cfg.n_heads + hh)] = std::move(s);
      }
    }
    Matrix delta = c.o * wo;

    c.mode = ffn_mode(w, l);
    if (c.mode == FfnMode::Plain) {
      c.pre = c.x * tensor(w, layer_tensor(l, "ffn.w1"));
      c.pre.rowwise() += tensor(w, layer_tensor(l, "ffn.b1")).row(0);
      c.u = act_apply(cfg.activation, c.pre);
      delta.noalias() += c.u * tensor(w, layer_tensor(l, "ffn.w2"));
      delta.rowwise() += tensor(w, layer_tensor(l, "ffn.c")).row(0);
    } else {
      const int order = taylor_order(w, l);
      Matrix d = c.x * tensor(w, layer_tensor(l, "tffn.w1"));
      d.rowwise() -= tensor(w, layer_tensor(l, "tffn.z0")).row(0);
      c.powers.assign(static_cast<std::size_t>(order + 1), Matrix());
      c.powers[0] = Matrix::Ones(N, d.cols());
      for (int n = 1; n <= order; ++n)
        c.powers[static_cast<std::size_t>(n)] = c.powers[static_cast<std::size_t>(n - 1)].cwiseProduct(d);
      for (int n = 0; n <= order; ++n)
        delta.noalias() += c.powers[static_cast<std::size_t>(n)] * tensor(w, layer_tensor(l, "tffn.coef" + std::to_string(n)));
      delta.rowwise() += tensor(w, layer_tensor(l, "tffn.c")).row(0);
    }
    if (cache) c.h_in = h;
    h += delta;
  }
  if (cache) cache->h_final = h;
  return h * tensor(w, "head.w");
}

// Mean masked cross-entropy and, optionally, its gradient w.r.t. the logits.
double cross_entropy(const Matrix& logits, const Batch& batch, Matrix* dlogits) {
  const Eigen::Index T = batch.seq_len();
  const Eigen::Index count = batch.loss_mask.count();
  if (count == 0) throw InputError("degenerate batch: every position is masked out");
  if (dlogits) dlogits->setZero(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Eigen::Index b = r / T, t = r % T;
    if (!batch.loss_mask(b, t)) continue;
    const double mx = logits.row(r).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp().matrix();
    const double z = e.sum();
    const int target = batch.targets(b, t);
    total += std::log(z) + mx - logits(r, target);
    if (dlogits) {
      dlogits->row(r) = e / z;
      (*dlogits)(r, target) -= 1.0;
    }
  }
  if (dlogits) *dlogits /= static_cast<double>(count);
  return total / static_cast<double>(count);
}

}  // namespace

ForwardResult forward(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch) {
  return {run_forward(cfg, w, batch, nullptr)};
}

std::vector<Matrix> ffn_inputs(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch) {
  ForwardCache cache;
  run_forward(cfg, w, batch, &cache);
  std::vector<Matrix> out;
  out.reserve(cache.layers.size());
  for (auto& c : cache.layers) out.push_back(std::move(c.x));
  return out;
}

double loss(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch) {
  return cross_entropy(run_forward(cfg, w, batch, nullptr), batch, nullptr);
}

LossAndGrad loss_and_grad(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch) {
  ForwardCache cache;
  const Matrix logits = run_forward(cfg, w, batch, &cache);
  Matrix dlogits;
  LossAndGrad out;
  out.loss = cross_entropy(logits, batch, &dlogits);
  for (const auto& [name, m] : w) out.grads[name] = Matrix::Zero(m.rows(), m.cols());
  auto grad = [&](const std::string& name) -> Matrix& { return out.grads.at(name); };

  const Eigen::Index B = batch.size(), T = batch.seq_len();
  const int hd = cfg.head_dim(), group = cfg.group_size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  grad("head.w").noalias() = cache.h_final.transpose() * dlogits;
  Matrix dh = dlogits * tensor(w, "head.w").transpose();

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerCache& c = cache.layers[static_cast<std::size_t>(l)];
    Matrix dx;

    // FFN branch.
    if (c.mode == FfnMode::Plain) {
      const Matrix& w1 = tensor(w, layer_tensor(l, "ffn.w1"));
      const Matrix& w2 = tensor(w, layer_tensor(l, "ffn.w2"));
      grad(layer_tensor(l, "ffn.w2")).noalias() = c.u.transpose() * dh;
      grad(layer_tensor(l, "ffn.c")) = dh.colwise().sum();
      const Matrix da = (dh * w2.transpose()).cwiseProduct(act_grad(cfg.activation, c.pre));
      grad(layer_tensor(l, "ffn.b1")) = da.colwise().sum();
      grad(layer_tensor(l, "ffn.w1")).noalias() = c.x.transpose() * da;
      dx = da * w1.transpose();
    } else {
      const int order = static_cast<int>(c.powers.size()) - 1;
      const Matrix& w1 = tensor(w, layer_tensor(l, "tffn.w1"));
      Matrix dd = Matrix::Zero(dh.rows(), w1.cols());
      for (int n = 0; n <= order; ++n) {
        const std::string name = layer_tensor(l, "tffn.coef" + std::to_string(n));
        grad(name).noalias() = c.powers[static_cast<std::size_t>(n)].transpose() * dh;
        if (n >= 1)
          dd += static_cast<double>(n) *
                c.powers[static_cast<std::size_t>(n - 1)].cwiseProduct(dh * tensor(w, name).transpose());
      }
      grad(layer_tensor(l, "tffn.c")) = dh.colwise().sum();
      grad(layer_tensor(l, "tffn.z0")) = -dd.colwise().sum();
      grad(layer_tensor(l, "tffn.w1")).noalias() = c.x.transpose() * dd;
      dx = dd * w1.transpose();
    }

    // Attention branch.
    const Matrix& wq = tensor(w, layer_tensor(l, "attn.wq"));
    const Matrix& wk = tensor(w, layer_tensor(l, "attn.wk"));
    const Matrix& wv = tensor(w, layer_tensor(l, "attn.wv"));
    const Matrix& wo = tensor(w, layer_tensor(l, "attn.wo"));
    grad(layer_tensor(l, "attn.wo")).noalias() = c.o.transpose() * dh;
    const Matrix d_o = dh * wo.transpose();
    Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
    Matrix dk = Matrix::Zero(c.k.rows(), c.k.cols());
    Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
    for (Eigen::Index b = 0; b < B; ++b) {
      for (int hh = 0; hh < cfg.n_heads; ++hh) {
        const int kv = hh / group;
        const Matrix& p = c.probs[static_cast<std::size_t>(b * cfg.n_heads + hh)];
        const auto dob = d_o.block(b * T, hh * hd, T, hd);
        const auto vb = c.v.block(b * T, kv * hd, T, hd);
        dv.block(b * T, kv * hd, T, hd).noalias() += p.transpose() * dob;
        const Matrix dp = dob * vb.transpose();
        const Eigen::VectorXd rowdot = dp.cwiseProduct(p).rowwise().sum();
        const Matrix ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * scale;
        dq.block(b * T, hh * hd, T, hd).noalias() += ds * c.k.block(b * T, kv * hd, T, hd);
        dk.block(b * T, kv * hd, T, hd).noalias() += ds.transpose() * c.q.block(b * T, hh * hd, T, hd);
      }
    }
    grad(layer_tensor(l, "attn.wq")).noalias() = c.x.transpose() * dq;
    grad(layer_tensor(l, "attn.wk")).noalias() = c.x.transpose() * dk;
    grad(layer_tensor(l, "attn.wv")).noalias() = c.x.transpose() * dv;
    dx.noalias() += dq * wq.transpose() + dk * wk.transpose() + dv * wv.transpose();

    // RMS norm.
    const Matrix& g = tensor(w, layer_tensor(l, "norm.g"));
    grad(layer_tensor(l, "norm.g")) = dx.cwiseProduct(c.xhat).colwise().sum();
    const Matrix dxhat = dx * g.row(0).asDiagonal();
    const Eigen::VectorXd proj = dxhat.cwiseProduct(c.xhat).rowwise().sum() / cfg.dim;
    dh += c.inv_rms.asDiagonal() * (dxhat - proj.asDiagonal() * c.xhat);
  }

  Matrix& dtok = grad("embed.tok");
  Matrix& dpos = grad("embed.pos");
  for (Eigen::Index b = 0; b < B; ++b) {
    for (Eigen::Index t = 0; t < T; ++t) {
      dtok.row(batch.tokens(b, t)) += dh.row(b * T + t);
      dpos.row(t) += dh.row(b * T + t);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task, const TrainConfig& tc,
                  const TrainObserver& observer) {
  return train(cfg, w, std::vector<TaskSpec>{task}, tc, observer);
}

TrainResult train(const ModelConfig& cfg, const NamedTensors& w, const std::vector<TaskSpec>& tasks,
                  const TrainConfig& tc, const TrainObserver& observer) {
  if (tc.steps < 0) throw ParameterError("train: steps must be >= 0");
  if (!(tc.lr > 0)) throw ParameterError("train: lr must be > 0");
  if (tc.batch_size < 1) throw ParameterError("train: batch_size must be >= 1");
  if (tasks.empty()) throw ParameterError("train: no tasks");
  for (const auto& t : tasks) {
    t.validate();
    if (t.vocab != cfg.vocab || t.seq_len != cfg.seq_len)
      throw ParameterError("train: task vocab/seq_len do not match the model");
  }

  TrainResult out{w, {}};
  out.loss_curve.reserve(static_cast<std::size_t>(tc.steps));
  NamedTensors m1, m2;
  for (const auto& [name, m] : w) {
    m1[name] = Matrix::Zero(m.rows(), m.cols());
    m2[name] = Matrix::Zero(m.rows(), m.cols());
  }

  std::vector<Batch> pools;
  if (tc.pool_size > 0) {
    for (std::size_t i = 0; i < tasks.size(); ++i) {
      TaskSpec t = tasks[i];
      t.seed = splitmix64(tc.seed ^ (0xA5A5A5A5ULL + i));
      pools.push_back(gen_task(t, tc.pool_size));
    }
  }

  for (int step = 0; step < tc.steps; ++step) {
    if (observer) observer(step, out.weights);
    const std::size_t which = static_cast<std::size_t>(step) % tasks.size();
    Batch batch;
    if (pools.empty()) {
      TaskSpec t = tasks[which];
      t.seed = rng_word(tc.seed, static_cast<std::uint64_t>(step));
      batch = gen_task(t, tc.batch_size);
    } else {
      const Batch& pool = pools[which];
      RngState pick{rng_word(tc.seed, static_cast<std::uint64_t>(step)), 0};
      const Eigen::Index n = pool.size();
      batch = Batch{TokenGrid(tc.batch_size, pool.seq_len()), TokenGrid(tc.batch_size, pool.seq_len()),
                    MaskGrid(tc.batch_size, pool.seq_len())};
      for (int i = 0; i < tc.batch_size; ++i) {
        const auto r = static_cast<Eigen::Index>(next_u64(pick) % static_cast<std::uint64_t>(n));
        batch.tokens.row(i) = pool.tokens.row(r);
        batch.targets.row(i) = pool.targets.row(r);
        batch.loss_mask.row(i) = pool.loss_mask.row(r);
      }
    }

    const LossAndGrad lg = loss_and_grad(cfg, out.weights, batch);
    if (!std::isfinite(lg.loss)) throw TrainingError("training diverged at step " + std::to_string(step));
    out.loss_curve.push_back(lg.loss);

    double clip = 1.0;
    if (tc.grad_clip > 0) {
      double sq = 0.0;
      for (const auto& [name, g] : lg.grads) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > tc.grad_clip) clip = tc.grad_clip / norm;
    }
    const double t = step + 1;
    const double bc1 = 1.0 - std::pow(tc.beta1, t), bc2 = 1.0 - std::pow(tc.beta2, t);
    for (auto& [name, param] : out.weights) {
      if (std::any_of(tc.frozen_prefixes.begin(), tc.frozen_prefixes.end(),
                      [&](const std::string& p) { return name.starts_with(p); }))
        continue;
      const Matrix g = clip * lg.grads.at(name);
      if (tc.weight_decay > 0) {
        if (tc.decay_to_start) {
          param -= (tc.lr * tc.weight_decay) * (param - w.at(name));
        } else {
          param *= (1.0 - tc.lr * tc.weight_decay);
        }
      }
      if (tc.optimizer == Optimizer::SGD) {
        param -= tc.lr * g;
        continue;
      }
      Matrix& a = m1[name];
      Matrix& v = m2[name];
      a = tc.beta1 * a + (1.0 - tc.beta1) * g;
      v = tc.beta2 * v + (1.0 - tc.beta2) * g.cwiseAbs2();
      param.array() -= tc.lr * (a.array() / bc1) / ((v.array() / bc2).sqrt() + tc.eps);
    }
  }
  if (observer) observer(tc.steps, out.weights);
  return out;
}

double accuracy(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch) {
  const Matrix logits = forward(cfg, w, batch).logits;
  const Eigen::Index T = batch.seq_len();
  Eigen::Index hits = 0, total = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Eigen::Index b = r / T, t = r % T;
    if (!batch.loss_mask(b, t)) continue;
    Eigen::Index arg = 0;
    logits.row(r).maxCoeff(&arg);  // first maximum, i.e. lowest id on ties
    hits += (arg == batch.targets(b, t));
    ++total;
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

double accuracy(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task, int n) {
  if (n < 1) throw ParameterError("accuracy: n must be >= 1");
  return accuracy(cfg, w, gen_task(task, n));
}

std::size_t parameter_count(const NamedTensors& w) {
  std::size_t n = 0;
  for (const auto& [name, m] : w) n += static_cast<std::size_t>(m.size());
  return n;
}

}  // namespace mb
