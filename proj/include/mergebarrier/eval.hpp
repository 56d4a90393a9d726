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


// Weight-space diagnostics: flattening, linear interpolation curves, PCA
// loss landscapes and normalized sharpness.

#ifndef MERGEBARRIER_EVAL_HPP
#define MERGEBARRIER_EVAL_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mergebarrier/model.hpp"

namespace mb {

/// Concatenates tensors in map order, each row-major.
Vector flatten_weights(const NamedTensors& w);
/// Same, restricted to `names` (in the given order).
Vector flatten_weights(const NamedTensors& w, const std::vector<std::string>& names);
/// Inverse of flatten_weights(w) using `like` for names and shapes.
NamedTensors unflatten_weights(const Vector& v, const NamedTensors& like);
/// Writes the flattened slice for `names` back into a copy of `like`.
NamedTensors unflatten_weights(const Vector& v, const NamedTensors& like, const std::vector<std::string>& names);

/// Fixed-seed evaluation batch; every curve and grid of a run uses the same one.
inline constexpr int kEvalSamples = 512;

struct CurvePoint {
  double t = 0.0;
  double loss = 0.0;
};

/// Loss of (1 - t) wA + t wB on `eval` for t on a uniform grid of `steps`
/// points including both ends. The end points are wA and wB themselves.
std::vector<CurvePoint> interpolation_curve(const ModelConfig& cfg, const NamedTensors& wa, const NamedTensors& wb,
                                            const Batch& eval, int steps);

/// Largest loss strictly inside the curve, and the larger end point.
double interior_max(const std::vector<CurvePoint>& curve);
double endpoint_max(const std::vector<CurvePoint>& curve);

struct LandscapeOptions {
  int steps = 25;
  double margin = 0.2;  // fraction of the anchor span added on each side
  bool include_embeddings = false;
  std::uint64_t seed = 0;  // completes the second axis for rank-1 anchor sets
};

struct LandscapeGrid {
  std::vector<std::string> names;  // tensors spanned by the axes
  Vector origin;                   // anchor mean over `names`
  Vector axis_x, axis_y;           // orthonormal
  Vector eigenvalues;              // centered Gram spectrum, descending
  std::vector<double> xs, ys;
  Matrix loss;  // loss(i, j) at (xs[j], ys[i])
  std::vector<std::array<double, 2>> anchor_coords;
  std::vector<double> residuals;  // out-of-plane norm per anchor
  double total_energy = 0.0;      // sum of squared centered norms
};

/// PCA plane through the anchors (eigendecomposition of the centered Gram
/// matrix) and the loss on a steps x steps grid covering their bounding box
/// plus margin. Tensors outside the plane stay at the anchor mean.
LandscapeGrid loss_landscape(const ModelConfig& cfg, const std::vector<NamedTensors>& anchors, const Batch& eval,
                             const LandscapeOptions& opts);

std::string curve_csv(const std::vector<CurvePoint>& curve);
std::string grid_csv(const LandscapeGrid& grid, const std::vector<std::string>& anchor_labels);

struct SharpnessConfig {
  double epsilon = 0.05;  // L2 radius over all flattened weights
  int samples = 8;
  int ascent_steps = 3;   // each of length epsilon / 10
  std::uint64_t seed = 0;

  void validate() const;
};

using LossFn = std::function<double(const Vector&)>;
using GradFn = std::function<Vector(const Vector&)>;

/// max over the searched perturbations d (||d|| <= epsilon, including d = 0)
/// of (L(w + d) - L(w)) / (1 + L(w)). Random start m uses the stream
/// rng_word(seed, m), so larger `samples` only adds candidates.
double sharpness(const LossFn& loss, const GradFn& grad, const Vector& w, const SharpnessConfig& sc);
double sharpness(const ModelConfig& cfg, const NamedTensors& w, const Batch& eval, const SharpnessConfig& sc);

}  // namespace mb

#endif  // MERGEBARRIER_EVAL_HPP
