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

// Dense numeric substrate: checked kernels, Householder QR, cyclic Jacobi
// eigensolver, randomized SVD and a counter-based Gaussian source.
//
// Everything is templated on the scalar type and accepts any Eigen
// expression; the rest of the library instantiates it with double.

#ifndef MERGEBARRIER_NUMKIT_HPP
#define MERGEBARRIER_NUMKIT_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mergebarrier/errors.hpp"

namespace mb {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Derived>
std::string shape_of(const Eigen::EigenBase<Derived>& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

/// Throws InputError if any entry is NaN or infinite.
template <typename Derived>
void require_finite(const Eigen::MatrixBase<Derived>& m, const std::string& what) {
  if (!m.allFinite()) throw InputError(what + ": matrix contains non-finite entries");
}

// ---------------------------------------------------------------------------
// Checked dense kernels. Eigen asserts on shape mismatch; these throw instead.

template <typename A, typename B>
auto matmul(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: cannot multiply " + shape_of(a) + " by " + shape_of(b));
  return MatrixX<typename A::Scalar>(a * b);
}

template <typename A, typename B>
auto add(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("add: shapes " + shape_of(a) + " and " + shape_of(b) + " differ");
  return MatrixX<typename A::Scalar>(a + b);
}

template <typename A>
typename A::Scalar trace(const Eigen::MatrixBase<A>& a) {
  if (a.rows() != a.cols()) throw DimensionError("trace: matrix " + shape_of(a) + " is not square");
  return a.trace();
}

template <typename A>
typename A::Scalar frobenius_norm(const Eigen::MatrixBase<A>& a) {
  return a.norm();
}

/// Coordinatewise integer power, exact repeated multiplication (pow(x, 0) = 1).
template <typename A>
auto cwise_pow(const Eigen::MatrixBase<A>& a, int n) {
  using S = typename A::Scalar;
  MatrixX<S> out = MatrixX<S>::Ones(a.rows(), a.cols());
  for (int i = 0; i < n; ++i) out.array() *= a.array();
  return out;
}

// ---------------------------------------------------------------------------
// Counter-based random source.

/// A position in a splitmix64 stream. The value at (seed, counter) never
/// depends on anything else, so streams are reproducible on every platform.
struct RngState {
  std::uint64_t seed = 0;
  std::uint64_t counter = 0;
};

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Raw 64-bit word at an explicit stream position.
constexpr std::uint64_t rng_word(std::uint64_t seed, std::uint64_t counter) {
  return splitmix64(splitmix64(seed) ^ (counter * 0xD1B54A32D192ED03ULL));
}

/// 64-bit FNV-1a, used to key random streams by tensor name.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Uniform in [0, 1) from a raw word.
constexpr double unit_interval(std::uint64_t word) { return static_cast<double>(word >> 11) * 0x1.0p-53; }

/// Consumes one counter step.
inline std::uint64_t next_u64(RngState& s) { return rng_word(s.seed, s.counter++); }

/// Uniform in [0, 1) with 53 random bits. Consumes one counter step.
inline double next_uniform(RngState& s) { return unit_interval(next_u64(s)); }

/// Standard normal matrix, filled column-major so that the first c columns of
/// a wider draw equal a narrower draw from the same state. Box–Muller turns
/// each pair of words into two normals; a draw of n entries advances the
/// counter by 2 * ceil(n / 2).
template <typename Scalar = double>
MatrixX<Scalar> gaussian(RngState& s, Eigen::Index rows, Eigen::Index cols) {
  if (rows < 1 || cols < 1) throw ParameterError("gaussian: rows and cols must be >= 1");
  MatrixX<Scalar> out(rows, cols);
  const Eigen::Index n = rows * cols;
  Scalar* data = out.data();
  for (Eigen::Index i = 0; i < n; i += 2) {
    const double u1 = (static_cast<double>(next_u64(s) >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = next_uniform(s);
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    data[i] = static_cast<Scalar>(r * std::cos(theta));
    if (i + 1 < n) data[i + 1] = static_cast<Scalar>(r * std::sin(theta));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Householder QR.

template <typename Scalar>
struct QrResult {
  MatrixX<Scalar> q;  // rows x cols, orthonormal columns
  MatrixX<Scalar> r;  // cols x cols, upper triangular, non-negative diagonal
};

/// Thin Householder QR of a tall matrix. Signs are normalized so that r has a
/// non-negative diagonal, which makes the factorization unique for full-rank
/// input (identity maps to q = I, r = I).
template <typename Derived>
QrResult<typename Derived::Scalar> householder_qr(const Eigen::MatrixBase<Derived>& a) {
  using S = typename Derived::Scalar;
  const Eigen::Index m = a.rows(), n = a.cols();
  if (m < n) throw DimensionError("householder_qr: need rows >= cols, got " + shape_of(a));

  MatrixX<S> r = a;
  std::vector<VectorX<S>> reflectors(static_cast<std::size_t>(n));
  for (Eigen::Index j = 0; j < n; ++j) {
    VectorX<S> v = r.col(j).tail(m - j);
    const S norm_x = v.norm();
    if (norm_x == S(0)) continue;
    const S alpha = v(0) >= S(0) ? -norm_x : norm_x;
    v(0) -= alpha;
    const S norm_v = v.norm();
    if (norm_v == S(0)) continue;
    v /= norm_v;
    auto block = r.bottomRightCorner(m - j, n - j);
    block.noalias() -= S(2) * v * (v.transpose() * block);
    reflectors[static_cast<std::size_t>(j)] = std::move(v);
  }

  MatrixX<S> q = MatrixX<S>::Identity(m, n);
  for (Eigen::Index j = n - 1; j >= 0; --j) {
    const auto& v = reflectors[static_cast<std::size_t>(j)];
    if (v.size() == 0) continue;
    auto block = q.bottomRows(m - j);
    block.noalias() -= S(2) * v * (v.transpose() * block);
  }

  MatrixX<S> rr = r.topRows(n).template triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < n; ++j) {
    if (rr(j, j) < S(0)) {
      rr.row(j) *= S(-1);
      q.col(j) *= S(-1);
    }
  }
  return {std::move(q), std::move(rr)};
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition.

template <typename Scalar>
struct EigenDecomposition {
  VectorX<Scalar> eigenvalues;   // descending
  MatrixX<Scalar> eigenvectors;  // columns, orthonormal
};

struct JacobiOptions {
  int max_sweeps = 100;
  double relative_tolerance = 1e-12;  // off-diagonal norm vs ||S||_F
};

/// Cyclic Jacobi rotations on (S + S^T) / 2. Eigenvalues come back in
/// descending order; ties keep the order in which the sweep left them.
template <typename Derived>
EigenDecomposition<typename Derived::Scalar> jacobi_eigh(const Eigen::MatrixBase<Derived>& s,
                                                         JacobiOptions opts = {}) {
  using S = typename Derived::Scalar;
  if (s.rows() != s.cols()) throw DimensionError("jacobi_eigh: matrix " + shape_of(s) + " is not square");
  const Eigen::Index n = s.rows();
  MatrixX<S> a = (s + s.transpose()) / S(2);
  MatrixX<S> v = MatrixX<S>::Identity(n, n);

  const S threshold = S(opts.relative_tolerance) * a.norm();
  auto off_diagonal = [&] {
    S sum = 0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = 0; q < n; ++q)
        if (p != q) sum += a(p, q) * a(p, q);
    return std::sqrt(sum);
  };

  bool converged = false;
  for (int sweep = 0; sweep <= opts.max_sweeps; ++sweep) {
    if (off_diagonal() <= threshold) {
      converged = true;
      break;
    }
    if (sweep == opts.max_sweeps) break;
    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const S apq = a(p, q);
        if (apq == S(0)) continue;
        const S theta = (a(q, q) - a(p, p)) / (S(2) * apq);
        const S t = (theta >= S(0) ? S(1) : S(-1)) / (std::abs(theta) + std::sqrt(theta * theta + S(1)));
        const S c = S(1) / std::sqrt(t * t + S(1));
        const S sn = t * c;
        for (Eigen::Index k = 0; k < n; ++k) {  // columns p, q
          const S akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {  // rows p, q
          const S apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const S vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }
  if (!converged) {
    std::ostringstream os;
    os << "jacobi_eigh: no convergence after " << opts.max_sweeps
       << " sweeps, residual off-diagonal norm " << off_diagonal();
    throw ConvergenceError(os.str());
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return a(i, i) > a(j, j); });
  EigenDecomposition<S> out{VectorX<S>(n), MatrixX<S>(n, n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = order[static_cast<std::size_t>(i)];
    out.eigenvalues(i) = a(src, src);
    out.eigenvectors.col(i) = v.col(src);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Randomized SVD.

template <typename Scalar>
struct SvdResult {
  MatrixX<Scalar> u;      // rows x k
  VectorX<Scalar> sigma;  // k, non-negative, descending
  MatrixX<Scalar> v;      // cols x k
};

namespace detail {

/// Extends the orthonormal columns of `basis` (first `have` columns valid) to
/// `want` columns with deterministic Gram–Schmidt over the standard basis.
template <typename S>
void complete_orthonormal(MatrixX<S>& basis, Eigen::Index have, Eigen::Index want) {
  const Eigen::Index n = basis.rows();
  for (Eigen::Index e = 0; e < n && have < want; ++e) {
    VectorX<S> cand = VectorX<S>::Unit(n, e);
    for (int pass = 0; pass < 2; ++pass)
      cand -= basis.leftCols(have) * (basis.leftCols(have).transpose() * cand);
    const S norm = cand.norm();
    if (norm > S(0.5)) basis.col(have++) = cand / norm;
  }
}

/// One-sided Jacobi SVD of a small matrix: returns (u, sigma, v) with
/// m = u diag(sigma) v^T, sigma descending. Works on the columns of m^T so the
/// left factor comes out as an accumulated rotation.
template <typename S>
SvdResult<S> small_svd(const MatrixX<S>& m) {
  const Eigen::Index l = m.rows();
  MatrixX<S> g = m.transpose();  // n x l
  MatrixX<S> rot = MatrixX<S>::Identity(l, l);
  const S eps = std::numeric_limits<S>::epsilon();
  for (int sweep = 0; sweep < 100; ++sweep) {
    bool rotated = false;
    for (Eigen::Index p = 0; p < l - 1; ++p) {
      for (Eigen::Index q = p + 1; q < l; ++q) {
        const S alpha = g.col(p).squaredNorm();
        const S beta = g.col(q).squaredNorm();
        const S gamma = g.col(p).dot(g.col(q));
        if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == S(0)) continue;
        rotated = true;
        const S zeta = (beta - alpha) / (S(2) * gamma);
        const S t = (zeta >= S(0) ? S(1) : S(-1)) / (std::abs(zeta) + std::sqrt(S(1) + zeta * zeta));
        const S c = S(1) / std::sqrt(S(1) + t * t);
        const S sn = c * t;
        VectorX<S> gp = g.col(p);
        g.col(p) = c * gp - sn * g.col(q);
        g.col(q) = sn * gp + c * g.col(q);
        VectorX<S> rp = rot.col(p);
        rot.col(p) = c * rp - sn * rot.col(q);
        rot.col(q) = sn * rp + c * rot.col(q);
      }
    }
    if (!rotated) break;
  }

  VectorX<S> norms = g.colwise().norm().transpose();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(l));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index i, Eigen::Index j) { return norms(i) > norms(j); });

  SvdResult<S> out{MatrixX<S>(l, l), VectorX<S>(l), MatrixX<S>::Zero(g.rows(), l)};
  const S cutoff = (norms.size() > 0 ? norms.maxCoeff() : S(0)) * eps * S(g.rows() + l);
  Eigen::Index good = 0;
  for (Eigen::Index i = 0; i < l; ++i) {
    const auto src = order[static_cast<std::size_t>(i)];
    out.u.col(i) = rot.col(src);
    if (norms(src) > cutoff && norms(src) > S(0)) {
      out.sigma(i) = norms(src);
      out.v.col(i) = g.col(src) / norms(src);
      good = i + 1;
    } else {
      out.sigma(i) = S(0);
    }
  }
  complete_orthonormal(out.v, good, l);
  return out;
}

}  // namespace detail

struct RsvdOptions {
  Eigen::Index oversample = 8;
  int power_iterations = 1;
};

/// Rank-k randomized SVD: Gaussian sketch, power iteration with
/// re-orthonormalization, QR, small exact SVD, lift back.
///
/// The sketch width is min(k + oversample, rows, cols). Sketch columns are a
/// prefix-stable function of `rng`, so for a fixed state the captured subspace
/// grows monotonically with k.
template <typename Derived>
SvdResult<typename Derived::Scalar> rsvd(const Eigen::MatrixBase<Derived>& a, Eigen::Index k, RngState rng,
                                         RsvdOptions opts = {}) {
  using S = typename Derived::Scalar;
  const Eigen::Index m = a.rows(), n = a.cols();
  if (k < 1 || k > std::min(m, n)) {
    std::ostringstream os;
    os << "rsvd: rank " << k << " out of range [1, " << std::min(m, n) << "] for " << shape_of(a);
    throw ParameterError(os.str());
  }
  if (opts.oversample < 0) throw ParameterError("rsvd: oversample must be >= 0");
  const Eigen::Index l = std::min(k + opts.oversample, std::min(m, n));

  const MatrixX<S> omega = gaussian<S>(rng, n, l);
  MatrixX<S> q = householder_qr(MatrixX<S>(a * omega)).q;
  for (int it = 0; it < opts.power_iterations; ++it) {
    const MatrixX<S> qz = householder_qr(MatrixX<S>(a.transpose() * q)).q;
    q = householder_qr(MatrixX<S>(a * qz)).q;
  }
  const MatrixX<S> b = q.transpose() * a;  // l x n
  SvdResult<S> small = detail::small_svd<S>(b);

  return {MatrixX<S>(q * small.u.leftCols(k)), VectorX<S>(small.sigma.head(k)),
          MatrixX<S>(small.v.leftCols(k))};
}

template <typename Derived>
SvdResult<typename Derived::Scalar> rsvd(const Eigen::MatrixBase<Derived>& a, Eigen::Index k,
                                         Eigen::Index oversample, RngState rng) {
  RsvdOptions opts;
  opts.oversample = oversample;
  return rsvd(a, k, rng, opts);
}

}  // namespace mb

#endif  // MERGEBARRIER_NUMKIT_HPP
