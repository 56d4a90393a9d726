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


#include "mergebarrier/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "mergebarrier/errors.hpp"

namespace mb {

namespace {

std::vector<std::string> all_names(const NamedTensors& w) {
  std::vector<std::string> names;
  for (const auto& [name, m] : w) names.push_back(name);
  return names;
}

void require_same_schema(const NamedTensors& a, const NamedTensors& b, const char* what) {
  bool same = a.size() == b.size();
  for (auto ia = a.begin(), ib = b.begin(); same && ia != a.end(); ++ia, ++ib)
    same = ia->first == ib->first && ia->second.rows() == ib->second.rows() && ia->second.cols() == ib->second.cols();
  if (!same) throw SchemaError(std::string(what) + ": models do not share a schema");
}

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

Vector flatten_weights(const NamedTensors& w) { return flatten_weights(w, all_names(w)); }

Vector flatten_weights(const NamedTensors& w, const std::vector<std::string>& names) {
  Eigen::Index n = 0;
  for (const auto& name : names) {
    auto it = w.find(name);
    if (it == w.end()) throw SchemaError("flatten: missing tensor '" + name + "'");
    n += it->second.size();
  }
  Vector v(n);
  Eigen::Index at = 0;
  for (const auto& name : names) {
    const Matrix& m = w.at(name);
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v(at++) = m(r, c);
  }
  return v;
}

NamedTensors unflatten_weights(const Vector& v, const NamedTensors& like) {
  return unflatten_weights(v, like, all_names(like));
}

NamedTensors unflatten_weights(const Vector& v, const NamedTensors& like, const std::vector<std::string>& names) {
  NamedTensors out = like;
  Eigen::Index at = 0;
  for (const auto& name : names) {
    auto it = out.find(name);
    if (it == out.end()) throw SchemaError("unflatten: missing tensor '" + name + "'");
    Matrix& m = it->second;
    if (at + m.size() > v.size()) throw DimensionError("unflatten: vector too short");
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = v(at++);
  }
  if (at != v.size()) throw DimensionError("unflatten: vector has " + std::to_string(v.size() - at) + " extra entries");
  return out;
}

std::vector<CurvePoint> interpolation_curve(const ModelConfig& cfg, const NamedTensors& wa, const NamedTensors& wb,
                                            const Batch& eval, int steps) {
  if (steps < 2) throw ParameterError("interpolation curve needs steps >= 2");
  require_same_schema(wa, wb, "interpolation_curve");
  std::vector<CurvePoint> out;
  for (int i = 0; i < steps; ++i) {
    const double t = static_cast<double>(i) / (steps - 1);
    if (i == 0) {
      out.push_back({0.0, loss(cfg, wa, eval)});
    } else if (i == steps - 1) {
      out.push_back({1.0, loss(cfg, wb, eval)});
    } else {
      NamedTensors w;
      for (const auto& [name, m] : wa) w[name] = (1.0 - t) * m + t * wb.at(name);
      out.push_back({t, loss(cfg, w, eval)});
    }
  }
  return out;
}

double interior_max(const std::vector<CurvePoint>& curve) {
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i + 1 < curve.size(); ++i) m = std::max(m, curve[i].loss);
  return m;
}

double endpoint_max(const std::vector<CurvePoint>& curve) {
  if (curve.empty()) throw ParameterError("empty curve");
  return std::max(curve.front().loss, curve.back().loss);
}

LandscapeGrid loss_landscape(const ModelConfig& cfg, const std::vector<NamedTensors>& anchors, const Batch& eval,
                             const LandscapeOptions& opts) {
  if (anchors.size() < 2) throw ParameterError("loss landscape needs at least 2 anchors");
  if (opts.steps < 3) throw ParameterError("loss landscape needs steps >= 3");
  if (!(opts.margin >= 0.0)) throw ParameterError("landscape margin must be >= 0");
  for (std::size_t i = 1; i < anchors.size(); ++i) require_same_schema(anchors[0], anchors[i], "loss_landscape");

  LandscapeGrid g;
  for (const auto& [name, m] : anchors[0])
    if (opts.include_embeddings || !name.starts_with("embed.")) g.names.push_back(name);
  const auto k = static_cast<Eigen::Index>(anchors.size());
  std::vector<Vector> flat;
  for (const auto& a : anchors) flat.push_back(flatten_weights(a, g.names));
  const Eigen::Index n = flat[0].size();
  g.origin = Vector::Zero(n);
  for (const auto& f : flat) g.origin += f;
  g.origin /= static_cast<double>(k);

  Matrix centered(k, n);
  for (Eigen::Index i = 0; i < k; ++i) centered.row(i) = (flat[static_cast<std::size_t>(i)] - g.origin).transpose();
  const Matrix gram = centered * centered.transpose();
  g.total_energy = gram.trace();
  const EigenDecomposition<double> ed = jacobi_eigh(gram);
  g.eigenvalues = ed.eigenvalues;
  if (!(g.eigenvalues(0) > 0.0)) throw ParameterError("degenerate PCA: all anchors coincide");

  g.axis_x = (centered.transpose() * ed.eigenvectors.col(0)).normalized();
  if (k > 1 && g.eigenvalues(1) > 1e-12 * g.eigenvalues(0)) {
    g.axis_y = (centered.transpose() * ed.eigenvectors.col(1)).normalized();
  } else {
    // Rank-1 anchor set: any unit direction orthogonal to the first axis.
    RngState rng{opts.seed, 0};
    Vector d = gaussian(rng, n, 1);
    d -= d.dot(g.axis_x) * g.axis_x;
    g.axis_y = d.normalized();
  }
  g.axis_y -= g.axis_y.dot(g.axis_x) * g.axis_x;
  g.axis_y.normalize();

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (Eigen::Index i = 0; i < k; ++i) {
    const Vector c = centered.row(i).transpose();
    const double x = c.dot(g.axis_x), y = c.dot(g.axis_y);
    g.anchor_coords.push_back({x, y});
    g.residuals.push_back((c - x * g.axis_x - y * g.axis_y).norm());
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    ymin = std::min(ymin, y);
    ymax = std::max(ymax, y);
  }
  const double xspan = xmax - xmin;
  const double yspan = ymax - ymin > 1e-12 * xspan ? ymax - ymin : xspan;
  const double ymid = (ymin + ymax) / 2.0;
  if (ymax - ymin <= 1e-12 * xspan) {
    ymin = ymid - yspan / 2.0;
    ymax = ymid + yspan / 2.0;
  }
  xmin -= opts.margin * xspan;
  xmax += opts.margin * xspan;
  ymin -= opts.margin * yspan;
  ymax += opts.margin * yspan;
  for (int i = 0; i < opts.steps; ++i) {
    const double f = static_cast<double>(i) / (opts.steps - 1);
    g.xs.push_back(xmin + f * (xmax - xmin));
    g.ys.push_back(ymin + f * (ymax - ymin));
  }

  // Tensors outside the plane sit at the anchor mean.
  NamedTensors mean = anchors[0];
  for (auto& [name, m] : mean) {
    for (std::size_t i = 1; i < anchors.size(); ++i) m += anchors[i].at(name);
    m /= static_cast<double>(k);
  }
  g.loss.resize(opts.steps, opts.steps);
  for (int i = 0; i < opts.steps; ++i)
    for (int j = 0; j < opts.steps; ++j) {
      const Vector p = g.origin + g.xs[static_cast<std::size_t>(j)] * g.axis_x + g.ys[static_cast<std::size_t>(i)] * g.axis_y;
      g.loss(i, j) = loss(cfg, unflatten_weights(p, mean, g.names), eval);
    }
  return g;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "t,loss\n";
  for (const auto& p : curve) out += fmt(p.t) + "," + fmt(p.loss) + "\n";
  return out;
}

std::string grid_csv(const LandscapeGrid& grid, const std::vector<std::string>& anchor_labels) {
  std::string out;
  out += "# eigenvalues";
  for (Eigen::Index i = 0; i < grid.eigenvalues.size(); ++i) out += " " + fmt(grid.eigenvalues(i));
  out += "\n# total_energy " + fmt(grid.total_energy) + "\n";
  for (std::size_t i = 0; i < grid.anchor_coords.size(); ++i) {
    const std::string label = i < anchor_labels.size() ? anchor_labels[i] : "anchor" + std::to_string(i);
    out += "# anchor " + label + " " + fmt(grid.anchor_coords[i][0]) + " " + fmt(grid.anchor_coords[i][1]) +
           " residual " + fmt(grid.residuals[i]) + "\n";
  }
  out += "x,y,loss\n";
  for (std::size_t i = 0; i < grid.ys.size(); ++i)
    for (std::size_t j = 0; j < grid.xs.size(); ++j)
      out += fmt(grid.xs[j]) + "," + fmt(grid.ys[i]) + "," +
             fmt(grid.loss(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j))) + "\n";
  return out;
}

void SharpnessConfig::validate() const {
  if (!(epsilon > 0.0)) throw ParameterError("sharpness epsilon must be > 0");
  if (samples < 1) throw ParameterError("sharpness samples must be >= 1");
  if (ascent_steps < 0) throw ParameterError("sharpness ascent steps must be >= 0");
}

double sharpness(const LossFn& f, const GradFn& grad, const Vector& w, const SharpnessConfig& sc) {
  sc.validate();
  const double l0 = f(w);
  const double denom = 1.0 + l0;
  double best = 0.0;  // d = 0
  for (int m = 0; m < sc.samples; ++m) {
    RngState rng{rng_word(sc.seed, static_cast<std::uint64_t>(m)), 0};
    Vector d = gaussian(rng, w.size(), 1);
    d *= sc.epsilon / d.norm();
    best = std::max(best, (f(w + d) - l0) / denom);
    for (int s = 0; s < sc.ascent_steps; ++s) {
      const Vector g = grad(w + d);
      const double gn = g.norm();
      if (!(gn > 0.0)) break;
      d += (sc.epsilon / 10.0) * g / gn;
      const double dn = d.norm();
      if (dn > sc.epsilon) d *= sc.epsilon / dn;
      best = std::max(best, (f(w + d) - l0) / denom);
    }
  }
  return best;
}

double sharpness(const ModelConfig& cfg, const NamedTensors& w, const Batch& eval, const SharpnessConfig& sc) {
  const LossFn f = [&](const Vector& v) { return loss(cfg, unflatten_weights(v, w), eval); };
  const GradFn g = [&](const Vector& v) { return flatten_weights(loss_and_grad(cfg, unflatten_weights(v, w), eval).grads); };
  return sharpness(f, g, flatten_weights(w), sc);
}

}  // namespace mb
