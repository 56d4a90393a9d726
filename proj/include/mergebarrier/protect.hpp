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


// MergeBarrier protection: a shared orthogonal projection of each attention
// layer's query/key weights and a Taylor reparameterization of each FFN.

#ifndef MERGEBARRIER_PROTECT_HPP
#define MERGEBARRIER_PROTECT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "mergebarrier/model.hpp"

namespace mb {

/// Head dimensions above this use the randomized eigensolver.
inline constexpr int kRsvdHeadDimThreshold = 48;
/// AUTO rank cap for the randomized eigensolver.
inline constexpr int kRsvdAutoRankCap = 32;

struct ProtectConfig {
  double flip_fraction = 0.5;  // rho
  int taylor_order = 8;
  int rsvd_rank = 0;  // 0 = AUTO
  bool rsvd_enabled = true;
  int calibration_samples = 256;
  std::uint64_t seed = 0;
  bool project_attention = true;
  bool reparameterize_ffn = true;

  /// Throws ParameterError.
  void validate() const;
};

/// ceil(rho * head_dim), guarded against floating overshoot.
int flip_count(double rho, int head_dim);

/// Sum of ||Wq_h (P - I)||_F^2 over the query slices plus ||Wk (P - I)||_F^2.
double flip_objective(const std::vector<Matrix>& wq_slices, const Matrix& wk_slice, const Matrix& p);

/// 1/16 ||(Wq P + Wq)(Wk P + Wk)^T - (2 Wq)(2 Wk)^T||_F^2 for one head pair:
/// how far an equal-weight average with the unprotected weights lands from
/// the original score matrix.
double merge_displacement(const Matrix& wq, const Matrix& wk, const Matrix& p);

struct ProjectionBlock {
  int layer = 0;
  int kv_head = 0;
  std::vector<int> query_heads;
  Matrix p;             // head_dim x head_dim, symmetric involution
  Vector eigenvalues;   // descending spectrum used to choose the flips
  int flips = 0;
};

struct ProjectionPlan {
  int n_layers = 0;
  int n_kv_heads = 0;
  int head_dim = 0;
  std::vector<ProjectionBlock> blocks;  // layer-major, then kv head

  const ProjectionBlock& block(int layer, int kv_head) const;
  /// Block-diagonal matrix of side n_kv_heads * head_dim for one layer.
  Matrix assembled(int layer) const;
};

/// Orthogonal involution I - 2 U_f U_f^T flipping the `flips` leading
/// eigen-directions of the symmetric PSD matrix s.
ProjectionBlock build_block(const Matrix& s, int flips, bool use_rsvd, int rsvd_rank, RngState rng);

ProjectionPlan build_projection(const ModelConfig& cfg, const NamedTensors& w, const ProtectConfig& pc);

/// Right-multiplies every query slice and its kv head's key slice by the
/// block. Leaves all other tensors untouched.
NamedTensors apply_projection(const ModelConfig& cfg, const NamedTensors& w, const ProjectionPlan& plan);

struct CalibrationStats {
  std::vector<RowVector> z_min;  // per layer, length ffn_dim
  std::vector<RowVector> z_max;
  long sample_count = 0;  // token positions seen

  RowVector z0(int layer) const;
};

/// Min/max of z = x W1 over every position of calibration_samples sequences.
CalibrationStats calibrate_z0(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task,
                              const ProtectConfig& pc);
CalibrationStats calibrate_z0(const ModelConfig& cfg, const NamedTensors& w, const Batch& batch);

struct TaylorFfnLayer {
  int layer = 0;
  Matrix w1;   // dim x ffn
  RowVector b1;
  RowVector z0;
  std::vector<Matrix> coeffs;  // order + 1 matrices, ffn x dim
  RowVector c;
};

struct TaylorFfn {
  ActivationKind activation = ActivationKind::GELU;
  std::vector<TaylorFfnLayer> layers;

  int order() const;
};

/// coef_n row j = w2 row j * Act^(n)(z0_j + b_j) / n!.
TaylorFfn reparameterize_ffn(const ModelConfig& cfg, const NamedTensors& w, const CalibrationStats& stats,
                             const ProtectConfig& pc);

/// Evaluates one Taylor layer on normalized inputs x (rows).
Matrix taylor_ffn_apply(const TaylorFfnLayer& layer, const Matrix& x);
/// Reference FFN on normalized inputs x.
Matrix plain_ffn_apply(const ModelConfig& cfg, const NamedTensors& w, int layer, const Matrix& x);

struct ProtectionManifest {
  std::vector<int> projected_layers;
  std::vector<int> taylor_layers;
  int taylor_order = 0;
  double flip_fraction = 0.0;

  bool empty() const { return projected_layers.empty() && taylor_layers.empty(); }
  bool operator==(const ProtectionManifest&) const = default;
};

/// Tensors plus the record of which layers were modified.
struct ProtectedBundle {
  NamedTensors tensors;
  ProtectionManifest manifest;
};

/// Replaces layer.i.ffn.* with layer.i.tffn.{w1,b1,z0,c,coef0..coefN}.
NamedTensors install_taylor(const NamedTensors& w, const TaylorFfn& t);
/// Reads the tffn.* tensors back; throws BundleError on missing or misshapen entries.
TaylorFfn extract_taylor(const ModelConfig& cfg, const NamedTensors& bundle);

/// Throws BundleError unless every layer has a complete plain or Taylor FFN
/// of the right shapes and all shared tensors match cfg.
void validate_bundle(const ModelConfig& cfg, const NamedTensors& bundle);

struct ProtectResult {
  ProtectedBundle bundle;
  ProjectionPlan plan;
  CalibrationStats stats;
};

/// Full pipeline: projection, calibration on `task`, reparameterization.
ProtectResult protect_model(const ModelConfig& cfg, const NamedTensors& w, const TaskSpec& task,
                            const ProtectConfig& pc);

/// Forward through a protected bundle.
Matrix protected_forward(const ModelConfig& cfg, const NamedTensors& bundle, const Batch& batch);

struct RemainderSummary {
  double mean = 0.0;
  double stddev = 0.0;
  double max = 0.0;
  long count = 0;
};

/// Per-layer |original FFN - Taylor FFN| over every coordinate of n samples.
/// Both networks see the original model's normalized FFN inputs.
std::vector<RemainderSummary> remainder_stats(const ModelConfig& cfg, const NamedTensors& w,
                                              const NamedTensors& bundle, const TaskSpec& task, int n);

}  // namespace mb

#endif  // MERGEBARRIER_PROTECT_HPP
