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
// GELU / SiLU and their exact higher derivatives, used to build the Taylor
// coefficients of reparameterized FFN blocks.

#ifndef MERGEBARRIER_ACTIVATIONS_HPP
#define MERGEBARRIER_ACTIVATIONS_HPP

#include <string>
#include <string_view>
#include <vector>

namespace mb {

enum class ActivationKind { GELU, SILU };

std::string to_string(ActivationKind kind);
ActivationKind parse_activation(std::string_view name);

/// Highest derivative order the engine will produce. Factorial growth makes
/// anything beyond this meaningless in double precision.
inline constexpr int kMaxDerivativeOrder = 16;

/// sigma^(n)(x) = sum_m coeffs[m] * sigma(x)^m, with coeffs.size() == order + 2.
struct SigmoidPoly {
  int order = 0;
  std::vector<double> coeffs;

  double evaluate(double x) const;
};

double normal_cdf(double x);
double normal_pdf(double x);
double sigmoid(double x);

double act_eval(ActivationKind kind, double x);

/// n-th derivative of the standard normal density, by the three-term
/// recurrence h_n = -x h_{n-1} - (n-1) h_{n-2}.
double gaussian_h(int n, double x);

/// Exact n-th derivative of GELU(x) = x * Phi(x): x h_{n-1}(x) + n h_{n-2}(x),
/// with h_{-1} taken as Phi.
double gelu_derivative(int n, double x);

/// Coefficient table for sigma^(n), from d/dx sigma^m = m (sigma^m - sigma^(m+1)).
SigmoidPoly sigmoid_poly(int n);

/// Exact n-th derivative of SiLU(x) = x * sigma(x): x sigma^(n) + n sigma^(n-1).
double silu_derivative(int n, double x);

double act_derivative(ActivationKind kind, int n, double x);

/// Act^(0..order)(x) in one pass; cheaper than calling act_derivative per order.
std::vector<double> act_derivatives(ActivationKind kind, int order, double x);

}  // namespace mb

#endif  // MERGEBARRIER_ACTIVATIONS_HPP
