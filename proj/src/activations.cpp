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
#include "mergebarrier/activations.hpp"

#include <cmath>
#include <string>

#include "mergebarrier/errors.hpp"

namespace mb {

namespace {

void check_order(int n, const char* what) {
  if (n < 0 || n > kMaxDerivativeOrder)
    throw ParameterError(std::string(what) + ": derivative order " + std::to_string(n) + " outside [0, " +
                         std::to_string(kMaxDerivativeOrder) + "]");
}

// h_{-1}..h_{last} for the Gaussian density; index i holds h_{i-1}.
std::vector<double> gaussian_chain(int last, double x) {
  std::vector<double> h(static_cast<std::size_t>(last + 2));
  h[0] = normal_cdf(x);
  if (last >= 0) h[1] = normal_pdf(x);
  for (int n = 1; n <= last; ++n) {
    const double prev2 = n >= 2 ? h[static_cast<std::size_t>(n - 1)] : 0.0;
    h[static_cast<std::size_t>(n + 1)] = -x * h[static_cast<std::size_t>(n)] - (n - 1) * prev2;
  }
  return h;
}

}  // namespace

std::string to_string(ActivationKind kind) { return kind == ActivationKind::GELU ? "gelu" : "silu"; }

ActivationKind parse_activation(std::string_view name) {
  if (name == "gelu" || name == "GELU") return ActivationKind::GELU;
  if (name == "silu" || name == "SILU") return ActivationKind::SILU;
  throw ParameterError("unknown activation '" + std::string(name) + "'");
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double act_eval(ActivationKind kind, double x) {
  return kind == ActivationKind::GELU ? x * normal_cdf(x) : x * sigmoid(x);
}

double gaussian_h(int n, double x) {
  if (n < 0) throw ParameterError("gaussian_h: order must be >= 0");
  double prev = 0.0, cur = normal_pdf(x);
  for (int k = 1; k <= n; ++k) {
    const double next = -x * cur - (k - 1) * prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

double gelu_derivative(int n, double x) {
  check_order(n, "gelu_derivative");
  if (n == 0) return act_eval(ActivationKind::GELU, x);
  const auto h = gaussian_chain(n - 1, x);  // h[i] = h_{i-1}
  return x * h[static_cast<std::size_t>(n)] + n * h[static_cast<std::size_t>(n - 1)];
}

double SigmoidPoly::evaluate(double x) const {
  const double s = sigmoid(x);
  double acc = 0.0;
  for (std::size_t m = coeffs.size(); m-- > 0;) acc = acc * s + coeffs[m];
  return acc;
}

SigmoidPoly sigmoid_poly(int n) {
  check_order(n, "sigmoid_poly");
  SigmoidPoly p{0, {0.0, 1.0}};
  for (int k = 1; k <= n; ++k) {
    std::vector<double> next(p.coeffs.size() + 1, 0.0);
    for (std::size_t m = 1; m < p.coeffs.size(); ++m) {
      next[m] += static_cast<double>(m) * p.coeffs[m];
      next[m + 1] -= static_cast<double>(m) * p.coeffs[m];
    }
    p = SigmoidPoly{k, std::move(next)};
  }
  return p;
}

double silu_derivative(int n, double x) {
  check_order(n, "silu_derivative");
  if (n == 0) return act_eval(ActivationKind::SILU, x);
  return x * sigmoid_poly(n).evaluate(x) + n * sigmoid_poly(n - 1).evaluate(x);
}

double act_derivative(ActivationKind kind, int n, double x) {
  return kind == ActivationKind::GELU ? gelu_derivative(n, x) : silu_derivative(n, x);
}

std::vector<double> act_derivatives(ActivationKind kind, int order, double x) {
  check_order(order, "act_derivatives");
  std::vector<double> out(static_cast<std::size_t>(order + 1));
  out[0] = act_eval(kind, x);
  if (kind == ActivationKind::GELU) {
    const auto h = gaussian_chain(order - 1, x);
    for (int n = 1; n <= order; ++n)
      out[static_cast<std::size_t>(n)] = x * h[static_cast<std::size_t>(n)] + n * h[static_cast<std::size_t>(n - 1)];
  } else {
    std::vector<double> sig(static_cast<std::size_t>(order + 1));
    for (int n = 0; n <= order; ++n) sig[static_cast<std::size_t>(n)] = sigmoid_poly(n).evaluate(x);
    for (int n = 1; n <= order; ++n)
      out[static_cast<std::size_t>(n)] = x * sig[static_cast<std::size_t>(n)] + n * sig[static_cast<std::size_t>(n - 1)];
  }
  return out;
}

}  // namespace mb
