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


#include "mergebarrier/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mergebarrier/errors.hpp"

namespace mb {

std::string to_string(MergeMethod m) {
  switch (m) {
    case MergeMethod::TASK_ARITHMETIC: return "task_arithmetic";
    case MergeMethod::TIES: return "ties";
    case MergeMethod::DARE_TASK: return "dare_task";
    case MergeMethod::DARE_TIES: return "dare_ties";
  }
  return "?";
}

MergeMethod parse_merge_method(const std::string& name) {
  for (MergeMethod m : kAllMergeMethods)
    if (name == to_string(m)) return m;
  if (name == "ta") return MergeMethod::TASK_ARITHMETIC;
  throw ParameterError("unknown merge method '" + name + "'");
}

void MergeConfig::validate() const {
  if (!std::isfinite(lambda)) throw ParameterError("lambda must be finite");
  if (!(trim_keep_fraction > 0.0 && trim_keep_fraction <= 1.0))
    throw ParameterError("trim keep fraction must lie in (0, 1]");
  if (!(drop_rate >= 0.0)) throw ParameterError("drop rate must be >= 0");
  if (!(drop_rate < 1.0)) throw ParameterError("drop rate must be < 1");
}

NamedTensors task_vector(const NamedTensors& base, const NamedTensors& expert) {
  std::vector<std::string> bad;
  for (const auto& [name, m] : base) {
    auto it = expert.find(name);
    if (it == expert.end())
      bad.push_back(name + " (missing from expert)");
    else if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      bad.push_back(name + " (" + shape_of(it->second) + " vs " + shape_of(m) + ")");
  }
  for (const auto& [name, m] : expert)
    if (!base.count(name)) bad.push_back(name + " (not in base)");
  if (!bad.empty()) {
    std::string msg = "task vector schema mismatch:";
    for (const auto& b : bad) msg += " " + b + ";";
    throw SchemaError(msg);
  }
  NamedTensors out;
  for (const auto& [name, m] : base) out[name] = expert.at(name) - m;
  return out;
}

TaskVectorSet make_task_vectors(const NamedTensors& base, const std::vector<NamedTensors>& experts) {
  TaskVectorSet tv{base, {}};
  for (const auto& e : experts) tv.deltas.push_back(task_vector(base, e));
  return tv;
}

namespace {

void check_set(const TaskVectorSet& tv) {
  if (tv.deltas.empty()) throw ParameterError("merge needs at least one task vector");
  for (const auto& d : tv.deltas) (void)task_vector(tv.base, d);  // schema check only
}

NamedTensors sum_deltas(const TaskVectorSet& tv) {
  NamedTensors out;
  for (const auto& [name, m] : tv.base) {
    Matrix s = tv.deltas.front().at(name);
    for (std::size_t i = 1; i < tv.deltas.size(); ++i) s += tv.deltas[i].at(name);
    out[name] = std::move(s);
  }
  return out;
}

NamedTensors apply_delta(const NamedTensors& base, const NamedTensors& delta, double lambda) {
  NamedTensors out;
  for (const auto& [name, m] : base) out[name] = m + lambda * delta.at(name);
  return out;
}

// Keeps exactly ceil(keep * n) largest magnitudes; equal magnitudes resolve
// toward the lower row-major index.
Matrix trim_top(const Matrix& m, double keep) {
  const Eigen::Index rows = m.rows(), cols = m.cols(), n = rows * cols;
  const auto k = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::ceil(keep * static_cast<double>(n) - 1e-9)), 0, n);
  if (k == n) return m;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  auto at = [&](Eigen::Index i) { return std::abs(m(i / cols, i % cols)); };
  std::nth_element(idx.begin(), idx.begin() + k, idx.end(), [&](Eigen::Index a, Eigen::Index b) {
    const double x = at(a), y = at(b);
    return x != y ? x > y : a < b;
  });
  Matrix out = Matrix::Zero(rows, cols);
  for (Eigen::Index j = 0; j < k; ++j) {
    const Eigen::Index i = idx[static_cast<std::size_t>(j)];
    out(i / cols, i % cols) = m(i / cols, i % cols);
  }
  return out;
}

NamedTensors ties_delta(const std::vector<NamedTensors>& deltas, const NamedTensors& base, double keep) {
  NamedTensors out;
  for (const auto& [name, m] : base) {
    std::vector<Matrix> trimmed;
    trimmed.reserve(deltas.size());
    for (const auto& d : deltas) trimmed.push_back(trim_top(d.at(name), keep));
    Matrix merged = Matrix::Zero(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        double sum = 0.0;
        for (const auto& t : trimmed) sum += t(r, c);
        const bool positive = sum >= 0.0;
        double acc = 0.0;
        int count = 0;
        for (const auto& t : trimmed) {
          const double v = t(r, c);
          if ((positive && v > 0.0) || (!positive && v < 0.0)) {
            acc += v;
            ++count;
          }
        }
        merged(r, c) = count ? acc / count : 0.0;
      }
    }
    out[name] = std::move(merged);
  }
  return out;
}

NamedTensors dare_with_seed(const NamedTensors& delta, double p, std::uint64_t seed) {
  if (p == 0.0) return delta;
  const double scale = 1.0 / (1.0 - p);
  NamedTensors out;
  for (const auto& [name, m] : delta) {
    const std::uint64_t key = splitmix64(seed) ^ fnv1a(name);
    Matrix d(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const auto index = static_cast<std::uint64_t>(r * m.cols() + c);
        d(r, c) = unit_interval(rng_word(key, index)) < p ? 0.0 : m(r, c) * scale;
      }
    out[name] = std::move(d);
  }
  return out;
}

TaskVectorSet dare_all(const TaskVectorSet& tv, const MergeConfig& mc) {
  TaskVectorSet out{tv.base, {}};
  for (std::size_t i = 0; i < tv.deltas.size(); ++i)
    out.deltas.push_back(dare_with_seed(tv.deltas[i], mc.drop_rate, rng_word(mc.seed, i)));
  return out;
}

}  // namespace

NamedTensors merge_task_arithmetic(const TaskVectorSet& tv, const MergeConfig& mc) {
  mc.validate();
  check_set(tv);
  return apply_delta(tv.base, sum_deltas(tv), mc.lambda);
}

NamedTensors ties_merge(const TaskVectorSet& tv, const MergeConfig& mc) {
  mc.validate();
  check_set(tv);
  return apply_delta(tv.base, ties_delta(tv.deltas, tv.base, mc.trim_keep_fraction), mc.lambda);
}

NamedTensors dare_preprocess(const NamedTensors& delta, const MergeConfig& mc) {
  mc.validate();
  return dare_with_seed(delta, mc.drop_rate, mc.seed);
}

nlohmann::json to_json(const MergeReport& r) {
  nlohmann::json j;
  j["method"] = to_string(r.config.method);
  j["lambda"] = r.config.lambda;
  j["trim_keep_fraction"] = r.config.trim_keep_fraction;
  j["drop_rate"] = r.config.drop_rate;
  j["seed"] = r.config.seed;
  j["sparsity"] = r.sparsity;
  return j;
}

MergeResult merge(const TaskVectorSet& tv, const MergeConfig& mc) {
  mc.validate();
  check_set(tv);
  MergeResult out;
  switch (mc.method) {
    case MergeMethod::TASK_ARITHMETIC: out.merged = merge_task_arithmetic(tv, mc); break;
    case MergeMethod::TIES: out.merged = ties_merge(tv, mc); break;
    case MergeMethod::DARE_TASK: out.merged = merge_task_arithmetic(dare_all(tv, mc), mc); break;
    case MergeMethod::DARE_TIES: out.merged = ties_merge(dare_all(tv, mc), mc); break;
  }
  out.report.config = mc;
  for (const auto& [name, m] : tv.base) {
    const Matrix d = out.merged.at(name) - m;
    out.report.sparsity[name] =
        static_cast<double>((d.array() == 0.0).count()) / static_cast<double>(std::max<Eigen::Index>(1, d.size()));
  }
  return out;
}

}  // namespace mb
