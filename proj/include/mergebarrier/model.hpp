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
// Toy decoder-only transformer with hand-written gradients, synthetic tasks
// and a small trainer. Produces the base and expert models that protection,
// merging and attacks operate on.

#ifndef MERGEBARRIER_MODEL_HPP
#define MERGEBARRIER_MODEL_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mergebarrier/activations.hpp"
#include "mergebarrier/numkit.hpp"

namespace mb {

/// Weights keyed by tensor name. std::map keeps names in lexicographic order,
/// which is the canonical flattening order everywhere in the library.
///
/// Layout uses the row-vector convention (activations are rows, y = x W):
///   embed.tok        vocab x dim         embed.pos     seq_len x dim
///   layer.i.attn.wq  dim x heads*hd      attn.wk/wv    dim x kv_heads*hd
///   layer.i.attn.wo  heads*hd x dim      layer.i.norm.g 1 x dim
///   layer.i.ffn.w1   dim x ffn           ffn.b1        1 x ffn
///   layer.i.ffn.w2   ffn x dim           ffn.c         1 x dim
///   head.w           dim x vocab
/// A Taylor-protected layer replaces ffn.* with tffn.{w1,b1,z0,c,coef0..coefN}.
using NamedTensors = std::map<std::string, Matrix>;

std::string layer_tensor(int layer, const std::string& suffix);

struct ModelConfig {
  int vocab = 20;
  int dim = 32;
  int n_layers = 2;
  int n_heads = 4;
  int n_kv_heads = 4;
  int ffn_dim = 64;
  int seq_len = 8;
  ActivationKind activation = ActivationKind::GELU;

  int head_dim() const { return dim / n_heads; }
  int group_size() const { return n_heads / n_kv_heads; }
  /// Throws ParameterError when counts are zero or not divisible.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Expected shape of every tensor of an unprotected model.
std::map<std::string, std::pair<Eigen::Index, Eigen::Index>> model_schema(const ModelConfig& cfg);

/// Throws SchemaError if w is not exactly an unprotected model of cfg.
void validate_weights(const ModelConfig& cfg, const NamedTensors& w);

using TokenGrid = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MaskGrid = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Batch {
  TokenGrid tokens;   // batch x seq_len
  TokenGrid targets;  // batch x seq_len, next token
  MaskGrid loss_mask; // answer positions only

  Eigen::Index size() const { return tokens.rows(); }
  Eigen::Index seq_len() const { return tokens.cols(); }
};

enum class TaskKind { MOD_ADD, COPY, REVERSE };
std::string to_string(TaskKind kind);
TaskKind parse_task(const std::string& name);

/// Value tokens occupy ids [0, vocab - 5); five control tokens sit at the top.
struct TokenLayout {
  int vocab;
  int num_values() const { return vocab - 5; }
  int eq() const { return vocab - 5; }
  int copy_marker() const { return vocab - 4; }
  int reverse_marker() const { return vocab - 3; }
  int sep() const { return vocab - 2; }
  int pad() const { return vocab - 1; }
};

struct TaskSpec {
  TaskKind task = TaskKind::MOD_ADD;
  int modulus = 7;    // MOD_ADD
  int span = 3;       // COPY / REVERSE
  int alphabet = 10;  // COPY / REVERSE value range
  int value_offset = 0;  // first value token id used by this task
  int vocab = 20;
  int seq_len = 8;
  std::uint64_t seed = 0;

  /// Number of distinct answer symbols; a constant guesser scores 1 / this.
  bool is_arithmetic() const { return task == TaskKind::MOD_ADD; }
  int answer_alphabet() const { return is_arithmetic() ? modulus : alphabet; }
  double chance() const { return 1.0 / answer_alphabet(); }
  void validate() const;
};

/// Task spec sized for cfg.
TaskSpec make_task(TaskKind kind, const ModelConfig& cfg, std::uint64_t seed);

/// MOD_ADD: "a b = c", COPY: "<copy> x.. <sep> x..", REVERSE: "<rev> x.. <sep> reversed".
Batch gen_task(const TaskSpec& task, int n);

enum class Optimizer { SGD, ADAM };

struct TrainConfig {
  int steps = 500;
  double lr = 3e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
  Optimizer optimizer = Optimizer::ADAM;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled
  /// Decay pulls toward the starting weights instead of zero.
  bool decay_to_start = false;
  double grad_clip = 0.0;     // global L2 norm; 0 disables
  /// When > 0, batches are drawn from a fixed pool of this many examples
  /// (limited labeled data); otherwise every step sees fresh samples.
  int pool_size = 0;
  /// Tensors whose name starts with any of these stay fixed (no update, no decay).
  std::vector<std::string> frozen_prefixes;
};

NamedTensors init_model(const ModelConfig& cfg, std::uint64_t seed);

/// Intermediate values kept for the backward pass.
struct ForwardCache;

struct ForwardResult {
  Matrix logits;  // (batch * seq_len) x vocab, row = b * seq_len + t
};

/// Runs the model. Layers whose FFN is stored as tffn.* use the Taylor
/// polynomial path; everything else is the plain network.
ForwardResult forward(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch);

/// Normalized block inputs x per layer (rows = batch * seq_len), i.e. what
/// the attention and FFN branches consume.
std::vector<Matrix> ffn_inputs(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch);

/// Mean masked cross-entropy.
double loss(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch);

struct LossAndGrad {
  double loss = 0.0;
  NamedTensors grads;
};

LossAndGrad loss_and_grad(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch);

struct TrainResult {
  NamedTensors weights;
  std::vector<double> loss_curve;
};

/// Sees (s, weights) before step s runs, and (steps, final weights) last.
using TrainObserver = std::function<void(int, const NamedTensors&)>;

TrainResult train(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task, const TrainConfig& tc,
                  const TrainObserver& observer = {});
/// Step s trains on tasks[s % tasks.size()].
TrainResult train(const ModelConfig& cfg, const NamedTensors& w, const std::vector<TaskSpec>& tasks,
                  const TrainConfig& tc, const TrainObserver& observer = {});

/// Exact-match fraction over answer positions, greedy argmax, ties to the
/// lowest token id.
double accuracy(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task, int n);
double accuracy(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch);

std::size_t parameter_count(const NamedTensors& w);

}  // namespace mb

#endif  // MERGEBARRIER_MODEL_HPP
