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

#include "mergebarrier/errors.hpp"
#include "mergebarrier/eval.hpp"
#include "test_util.hpp"

using namespace mb;
using namespace mb::testing;

namespace {

NamedTensors lerp(const NamedTensors& a, const NamedTensors& b, double t) {
  NamedTensors out = a;
  for (auto& [name, m] : out) m = (1.0 - t) * m + t * b.at(name);
  return out;
}

Vector in_plane(const LandscapeGrid& g, const std::vector<NamedTensors>& anchors, std::size_t i) {
  return flatten_weights(anchors[i], g.names) - g.origin;
}

}  // namespace

TEST_CASE("flatten round trip") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = random_weights(cfg, 1);
  const Vector v = flatten_weights(w);
  CHECK(static_cast<std::size_t>(v.size()) == parameter_count(w));
  CHECK(unflatten_weights(v, w) == w);
  // Row-major within each tensor, tensors in map order.
  CHECK(v(1) == w.begin()->second(0, 1));

  const std::vector<std::string> names{"layer.1.ffn.c", "head.w"};
  const Vector part = flatten_weights(w, names);
  CHECK(part.size() == cfg.dim + cfg.dim * cfg.vocab);
  const NamedTensors back = unflatten_weights(Vector::Zero(part.size()), w, names);
  CHECK(back.at("head.w").isZero(0.0));
  CHECK(back.at("embed.tok") == w.at("embed.tok"));
  CHECK_THROWS_AS(unflatten_weights(Vector::Zero(3), w), DimensionError);
  CHECK_THROWS_AS(flatten_weights(w, {"nope"}), SchemaError);
}

TEST_CASE("interpolation curve end points are the models themselves") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors a = random_weights(cfg, 1, 0.3), b = random_weights(cfg, 2, 0.3);
  const Batch eval = sample_batch(cfg, TaskKind::COPY, 1, 32);
  const auto curve = interpolation_curve(cfg, a, b, eval, 11);
  REQUIRE(curve.size() == 11);
  CHECK(curve.front().t == 0.0);
  CHECK(curve.back().t == 1.0);
  CHECK(curve.front().loss == loss(cfg, a, eval));
  CHECK(curve.back().loss == loss(cfg, b, eval));
  CHECK(curve[5].t == doctest::Approx(0.5));
  CHECK(curve[5].loss == doctest::Approx(loss(cfg, lerp(a, b, 0.5), eval)).epsilon(1e-12));
  CHECK(endpoint_max(curve) == std::max(curve.front().loss, curve.back().loss));
  double inner = 0.0;
  for (std::size_t i = 1; i + 1 < curve.size(); ++i) inner = std::max(inner, curve[i].loss);
  CHECK(interior_max(curve) == inner);
}

TEST_CASE("curve between identical models is flat") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors a = random_weights(cfg, 1, 0.3);
  const Batch eval = sample_batch(cfg, TaskKind::REVERSE, 1, 16);
  for (const auto& p : interpolation_curve(cfg, a, a, eval, 5)) CHECK(p.loss == doctest::Approx(loss(cfg, a, eval)));
}

TEST_CASE("curve errors and csv") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors a = random_weights(cfg, 1, 0.3);
  const Batch eval = sample_batch(cfg, TaskKind::REVERSE, 1, 4);
  CHECK_THROWS_AS(interpolation_curve(cfg, a, a, eval, 1), ParameterError);
  NamedTensors b = a;
  b.erase("head.w");
  CHECK_THROWS_AS(interpolation_curve(cfg, a, b, eval, 3), SchemaError);
  const std::string csv = curve_csv({{0.0, 1.5}, {1.0, 2.0}});
  CHECK(csv.rfind("t,loss\n", 0) == 0);
  CHECK(csv.find("1.5") != std::string::npos);
}

TEST_CASE("landscape plane through three anchors") {
  const ModelConfig cfg = tiny_config();
  const std::vector<NamedTensors> anchors{random_weights(cfg, 1, 0.2), random_weights(cfg, 2, 0.2),
                                          random_weights(cfg, 3, 0.2)};
  const Batch eval = sample_batch(cfg, TaskKind::COPY, 1, 8);
  LandscapeOptions opts;
  opts.steps = 5;
  const LandscapeGrid g = loss_landscape(cfg, anchors, eval, opts);
  for (const auto& n : g.names) CHECK(!n.starts_with("embed."));
  CHECK(g.axis_x.norm() == doctest::Approx(1.0));
  CHECK(g.axis_y.norm() == doctest::Approx(1.0));
  CHECK(std::abs(g.axis_x.dot(g.axis_y)) < 1e-12);
  CHECK(g.eigenvalues(0) >= g.eigenvalues(1));
  CHECK(g.loss.rows() == 5);
  CHECK(g.loss.cols() == 5);
  double energy = 0.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Vector c = in_plane(g, anchors, i);
    energy += c.squaredNorm();
    // Three points always lie in their own plane.
    CHECK(g.residuals[i] < 1e-9 * c.norm());
    CHECK(g.anchor_coords[i][0] == doctest::Approx(c.dot(g.axis_x)));
    CHECK(g.anchor_coords[i][1] == doctest::Approx(c.dot(g.axis_y)));
    CHECK((g.anchor_coords[i][0] > g.xs.front() && g.anchor_coords[i][0] < g.xs.back()));
  }
  CHECK(g.total_energy == doctest::Approx(energy));
  CHECK(g.eigenvalues.sum() == doctest::Approx(energy));

  // Centre of the grid evaluates the origin with embeddings at their mean.
  opts.steps = 3;
  opts.margin = 0.0;
  const LandscapeGrid c = loss_landscape(cfg, anchors, eval, opts);
  const double xm = c.xs[1], ym = c.ys[1];
  NamedTensors mean = anchors[0];
  for (auto& [name, m] : mean) m = (anchors[0].at(name) + anchors[1].at(name) + anchors[2].at(name)) / 3.0;
  const Vector point = c.origin + xm * c.axis_x + ym * c.axis_y;
  CHECK(c.loss(1, 1) == doctest::Approx(loss(cfg, unflatten_weights(point, mean, c.names), eval)).epsilon(1e-10));
}

TEST_CASE("landscape residuals measure out-of-plane energy") {
  const ModelConfig cfg = tiny_config();
  std::vector<NamedTensors> anchors;
  for (std::uint64_t s = 1; s <= 4; ++s) anchors.push_back(random_weights(cfg, s, 0.2));
  LandscapeOptions opts;
  opts.steps = 3;
  opts.include_embeddings = true;
  const LandscapeGrid g = loss_landscape(cfg, anchors, sample_batch(cfg, TaskKind::COPY, 1, 4), opts);
  CHECK(g.names.size() == anchors[0].size());
  double out = 0.0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const Vector c = in_plane(g, anchors, i);
    const double x = g.anchor_coords[i][0], y = g.anchor_coords[i][1];
    CHECK(g.residuals[i] * g.residuals[i] + x * x + y * y == doctest::Approx(c.squaredNorm()));
    out += g.residuals[i] * g.residuals[i];
  }
  CHECK(out > 0.0);
  CHECK(out == doctest::Approx(g.total_energy - g.eigenvalues(0) - g.eigenvalues(1)));
}

TEST_CASE("collinear and coincident anchors") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors a = random_weights(cfg, 1, 0.2), b = random_weights(cfg, 2, 0.2);
  const Batch eval = sample_batch(cfg, TaskKind::COPY, 1, 4);
  LandscapeOptions opts;
  opts.steps = 3;
  opts.seed = 4;
  for (const auto& anchors : {std::vector<NamedTensors>{a, b}, std::vector<NamedTensors>{a, lerp(a, b, 0.3), b}}) {
    const LandscapeGrid g = loss_landscape(cfg, anchors, eval, opts);
    CHECK(g.eigenvalues(1) < 1e-9 * g.eigenvalues(0));
    CHECK(g.axis_y.norm() == doctest::Approx(1.0));
    CHECK(std::abs(g.axis_x.dot(g.axis_y)) < 1e-12);
    for (const auto& p : g.anchor_coords) CHECK(std::abs(p[1]) < 1e-9);
    CHECK(g.ys.back() > g.ys.front());
  }
  CHECK_THROWS_WITH_AS(loss_landscape(cfg, {a, a}, eval, opts), "degenerate PCA: all anchors coincide", ParameterError);
  CHECK_THROWS_AS(loss_landscape(cfg, {a}, eval, opts), ParameterError);
  opts.steps = 2;
  CHECK_THROWS_AS(loss_landscape(cfg, {a, b}, eval, opts), ParameterError);
}

TEST_CASE("grid csv layout") {
  const ModelConfig cfg = tiny_config();
  LandscapeOptions opts;
  opts.steps = 3;
  const LandscapeGrid g = loss_landscape(cfg, {random_weights(cfg, 1, 0.2), random_weights(cfg, 2, 0.2)},
                                         sample_batch(cfg, TaskKind::COPY, 1, 4), opts);
  const std::string csv = grid_csv(g, {"first", "second"});
  CHECK(csv.find("# eigenvalues") != std::string::npos);
  CHECK(csv.find("# anchor first ") != std::string::npos);
  CHECK(csv.find("\nx,y,loss\n") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == std::count(csv.begin(), csv.end(), '#') + 1 + 9);
}

TEST_CASE("sharpness on analytic losses") {
  SharpnessConfig sc;
  sc.epsilon = 0.1;
  const Vector zero = Vector::Zero(6);

  SUBCASE("isotropic quadratic reaches the ball edge") {
    const LossFn f = [](const Vector& v) { return 0.5 * v.squaredNorm(); };
    const GradFn g = [](const Vector& v) { return v; };
    CHECK(sharpness(f, g, zero, sc) == doctest::Approx(0.005));
  }
  SUBCASE("anisotropic quadratic is bounded by the top curvature") {
    Vector diag(6);
    diag << 9.0, 1.0, 1.0, 0.5, 0.5, 0.1;
    const LossFn f = [&](const Vector& v) { return 0.5 * v.dot(diag.cwiseProduct(v)) + 1.0; };
    const GradFn g = [&](const Vector& v) { return Vector(diag.cwiseProduct(v)); };
    const double s = sharpness(f, g, zero, sc);
    CHECK(s <= 9.0 * 0.005 / 2.0 + 1e-15);  // divided by 1 + L0 = 2
    CHECK(s >= 0.1 * 0.005 / 2.0);
  }
  SUBCASE("tiny radius gives zero") {
    const LossFn f = [](const Vector& v) { return std::cos(v.sum()); };
    const GradFn g = [](const Vector& v) { return Vector(Vector::Constant(v.size(), -std::sin(v.sum()))); };
    sc.epsilon = 1e-9;
    CHECK(sharpness(f, g, zero, sc) < 1e-15);
  }
  SUBCASE("a local maximum has no sharpness") {
    const LossFn f = [](const Vector& v) { return -v.squaredNorm(); };
    const GradFn g = [](const Vector& v) { return Vector(-2.0 * v); };
    CHECK(sharpness(f, g, zero, sc) == 0.0);
  }
}

TEST_CASE("model sharpness is monotone in samples") {
  const ModelConfig cfg = tiny_config();
  const NamedTensors w = random_weights(cfg, 3, 0.3);
  const Batch eval = sample_batch(cfg, TaskKind::COPY, 1, 16);
  SharpnessConfig sc;
  sc.ascent_steps = 1;
  double prev = 0.0;
  for (int m : {1, 2, 4}) {
    sc.samples = m;
    const double s = sharpness(cfg, w, eval, sc);
    CHECK(s >= prev);
    prev = s;
  }
  CHECK(prev > 0.0);
  sc.samples = 0;
  CHECK_THROWS_AS(sc.validate(), ParameterError);
  sc = SharpnessConfig{};
  sc.epsilon = -1.0;
  CHECK_THROWS_AS(sc.validate(), ParameterError);
}
