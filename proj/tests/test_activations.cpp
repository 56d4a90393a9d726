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

#include <cmath>

#include "mergebarrier/activations.hpp"
#include "mergebarrier/errors.hpp"

using namespace mb;

namespace {

// Five-point central difference of f at x.
template <class F>
double central_diff(F f, double x, double h) {
  return (-f(x + 2 * h) + 8 * f(x + h) - 8 * f(x - h) + f(x - 2 * h)) / (12 * h);
}

// Composite Simpson on [a, b] with n (even) panels.
template <class F>
double simpson(F f, double a, double b, int n) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += f(a + i * h) * (i % 2 ? 4.0 : 2.0);
  return s * h / 3.0;
}

const double kSamples[] = {-4.0, -2.5, -1.0, -0.3, 0.0, 0.2, 0.9, 1.7, 3.0, 4.5};

}  // namespace

TEST_CASE("normal cdf agrees with quadrature of the density") {
  auto pdf = [](double t) { return std::exp(-0.5 * t * t) / std::sqrt(2.0 * M_PI); };
  for (double x : kSamples) CHECK(std::abs(normal_cdf(x) - simpson(pdf, -12.0, x, 4000)) < 1e-12);
  CHECK(normal_pdf(0.0) == doctest::Approx(1.0 / std::sqrt(2.0 * M_PI)));
  CHECK(normal_cdf(-40.0) >= 0.0);
  CHECK(normal_cdf(-40.0) < 1e-300);
}

TEST_CASE("activation values") {
  CHECK(act_eval(ActivationKind::GELU, 0.0) == 0.0);
  CHECK(act_eval(ActivationKind::SILU, 0.0) == 0.0);
  CHECK(act_eval(ActivationKind::GELU, 1.0) == doctest::Approx(0.8413447460685429));
  CHECK(act_eval(ActivationKind::SILU, 1.0) == doctest::Approx(0.7310585786300049));
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
}

TEST_CASE("derivatives through order 8 match finite differences of the previous order") {
  for (ActivationKind kind : {ActivationKind::GELU, ActivationKind::SILU}) {
    CAPTURE(to_string(kind));
    for (int n = 1; n <= 8; ++n) {
      CAPTURE(n);
      for (double x : kSamples) {
        CAPTURE(x);
        const double fd = central_diff([&](double t) { return act_derivative(kind, n - 1, t); }, x, 1e-3);
        CHECK(std::abs(act_derivative(kind, n, x) - fd) < 1e-6);
      }
    }
  }
}

TEST_CASE("gelu derivatives match hand-differentiated low orders") {
  for (double x : kSamples) {
    const double phi = normal_pdf(x), Phi = normal_cdf(x);
    CHECK(gelu_derivative(1, x) == doctest::Approx(Phi + x * phi).epsilon(1e-12));
    CHECK(gelu_derivative(2, x) == doctest::Approx((2.0 - x * x) * phi).epsilon(1e-12));
    CHECK(gelu_derivative(3, x) == doctest::Approx((x * x * x - 4.0 * x) * phi).epsilon(1e-12));
  }
}

TEST_CASE("sigmoid polynomial table") {
  const SigmoidPoly p1 = sigmoid_poly(1);
  REQUIRE(p1.coeffs.size() == 3);
  // sigma' = sigma - sigma^2
  CHECK(p1.coeffs[0] == 0.0);
  CHECK(p1.coeffs[1] == 1.0);
  CHECK(p1.coeffs[2] == -1.0);
  for (double x : kSamples) {
    const double s = sigmoid(x);
    CHECK(sigmoid_poly(2).evaluate(x) == doctest::Approx(s * (1 - s) * (1 - 2 * s)).epsilon(1e-12));
  }
}

TEST_CASE("silu derivatives match explicit low orders") {
  for (double x : kSamples) {
    const double s = sigmoid(x);
    CHECK(silu_derivative(1, x) == doctest::Approx(s + x * s * (1 - s)).epsilon(1e-12));
    CHECK(silu_derivative(2, x) == doctest::Approx(2 * s * (1 - s) + x * s * (1 - s) * (1 - 2 * s)).epsilon(1e-12));
  }
}

TEST_CASE("batched derivatives equal per-order calls") {
  for (ActivationKind kind : {ActivationKind::GELU, ActivationKind::SILU}) {
    for (double x : kSamples) {
      const auto all = act_derivatives(kind, 8, x);
      REQUIRE(all.size() == 9);
      for (int n = 0; n <= 8; ++n) CHECK(all[static_cast<std::size_t>(n)] == doctest::Approx(act_derivative(kind, n, x)).epsilon(1e-13));
    }
  }
}

TEST_CASE("activation parameter errors") {
  CHECK_THROWS_AS(parse_activation("relu"), ParameterError);
  CHECK(parse_activation("gelu") == ActivationKind::GELU);
  CHECK(parse_activation("silu") == ActivationKind::SILU);
  CHECK_THROWS_AS(act_derivative(ActivationKind::GELU, -1, 0.0), ParameterError);
  CHECK_THROWS_AS(act_derivative(ActivationKind::GELU, kMaxDerivativeOrder + 1, 0.0), ParameterError);
  CHECK_THROWS_AS(gaussian_h(-1, 0.0), ParameterError);
}
