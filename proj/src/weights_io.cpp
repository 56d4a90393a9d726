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


#include "mergebarrier/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mergebarrier/errors.hpp"

namespace mb {

static_assert(std::numeric_limits<double>::is_iec559, "MBWT stores IEEE-754 doubles");

namespace {

constexpr char kMagic[4] = {'M', 'B', 'W', 'T'};

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

void put_f64(std::string& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes_(b) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw CorruptionError(std::string("truncated ") + what + " at byte offset " + std::to_string(pos_) + " (need " +
                            std::to_string(n) + ", have " + std::to_string(bytes_.size() - pos_) + ")");
  }

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  double get_f64(const char* what) { return std::bit_cast<double>(get<std::uint64_t>(what)); }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_mbwt(const TensorFile& f) {
  std::string out(kMagic, 4);
  const std::string meta = f.metadata.dump();
  put<std::uint32_t>(out, kMbwtVersion);
  put<std::uint32_t>(out, f.flags);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(f.tensors.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  for (const auto& [name, m] : f.tensors) {
    if (name.size() > 0xFFFF) throw FormatError("tensor name longer than 65535 bytes");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, 0);  // f64
    put<std::uint8_t>(out, 2);
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) put_f64(out, m(r, c));
  }
  return out;
}

TensorFile decode_mbwt(const std::string& bytes) {
  Reader in(bytes);
  const std::string magic = in.get_bytes(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic: not an MBWT file");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kMbwtVersion) throw FormatError("unsupported MBWT version " + std::to_string(version));
  TensorFile f;
  f.flags = in.get<std::uint32_t>("flags");
  const auto count = in.get<std::uint32_t>("tensor count");
  const auto meta_len = in.get<std::uint32_t>("metadata length");
  const std::size_t meta_at = in.offset();
  const std::string meta = in.get_bytes(meta_len, "metadata");
  try {
    f.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::parse_error& e) {
    throw CorruptionError("metadata at byte offset " + std::to_string(meta_at) + " is not valid JSON: " + e.what());
  }
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = in.get<std::uint16_t>("tensor name length");
    std::string name = in.get_bytes(name_len, "tensor name");
    const std::size_t dtype_at = in.offset();
    const auto dtype = in.get<std::uint8_t>("dtype");
    if (dtype != 0)
      throw FormatError("tensor '" + name + "' has unsupported dtype " + std::to_string(dtype) + " at byte offset " +
                        std::to_string(dtype_at));
    const auto ndim = in.get<std::uint8_t>("ndim");
    if (ndim < 1 || ndim > 2) throw FormatError("tensor '" + name + "' has unsupported rank " + std::to_string(ndim));
    std::uint64_t dims[2] = {1, 1};
    for (int d = 0; d < ndim; ++d) dims[ndim == 1 ? 1 : d] = in.get<std::uint64_t>("dims");
    const std::size_t payload_at = in.offset();
    const std::uint64_t room = (bytes.size() - payload_at) / 8;
    if (dims[0] != 0 && dims[1] > room / dims[0])
      throw CorruptionError("truncated payload of '" + name + "' at byte offset " + std::to_string(payload_at));
    Matrix m(static_cast<Eigen::Index>(dims[0]), static_cast<Eigen::Index>(dims[1]));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = in.get_f64("payload");
    if (!f.tensors.emplace(std::move(name), std::move(m)).second)
      throw CorruptionError("duplicate tensor name at byte offset " + std::to_string(dtype_at));
  }
  if (!in.done()) throw CorruptionError("trailing bytes at byte offset " + std::to_string(in.offset()));
  return f;
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing '" + path.string() + "'");
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"vocab", cfg.vocab},       {"dim", cfg.dim},         {"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},   {"n_kv_heads", cfg.n_kv_heads}, {"ffn_dim", cfg.ffn_dim},
          {"seq_len", cfg.seq_len},   {"activation", to_string(cfg.activation)}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.vocab = j.at("vocab").get<int>();
    cfg.dim = j.at("dim").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_kv_heads = j.at("n_kv_heads").get<int>();
    cfg.ffn_dim = j.at("ffn_dim").get<int>();
    cfg.seq_len = j.at("seq_len").get<int>();
    cfg.activation = parse_activation(j.at("activation").get<std::string>());
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("model config metadata: ") + e.what());
  } catch (const ParameterError& e) {
    throw SchemaError(std::string("model config metadata: ") + e.what());
  }
}

nlohmann::json to_json(const ProtectionManifest& m) {
  return {{"projected_layers", m.projected_layers},
          {"taylor_layers", m.taylor_layers},
          {"taylor_order", m.taylor_order},
          {"flip_fraction", m.flip_fraction}};
}

ProtectionManifest manifest_from_json(const nlohmann::json& j) {
  try {
    ProtectionManifest m;
    m.projected_layers = j.at("projected_layers").get<std::vector<int>>();
    m.taylor_layers = j.at("taylor_layers").get<std::vector<int>>();
    m.taylor_order = j.at("taylor_order").get<int>();
    m.flip_fraction = j.at("flip_fraction").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("protection manifest: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const ProtectedBundle& bundle) {
  validate_bundle(cfg, bundle.tensors);
  TensorFile f;
  f.flags = bundle.manifest.empty() ? 0u : kFlagProtected;
  f.metadata = {{"kind", "model"}, {"config", to_json(cfg)}, {"manifest", to_json(bundle.manifest)}};
  f.tensors = bundle.tensors;
  write_file(path, encode_mbwt(f));
}

void save_model(const std::filesystem::path& path, const ModelConfig& cfg, const NamedTensors& w) {
  save_model(path, cfg, ProtectedBundle{w, {}});
}

ModelFile load_model(const std::filesystem::path& path) {
  const TensorFile f = decode_mbwt(read_file(path));
  if (!f.metadata.is_object() || f.metadata.value("kind", "") != "model")
    throw SchemaError("'" + path.string() + "' does not hold a model");
  ModelFile out;
  out.config = model_config_from_json(f.metadata.at("config"));
  out.bundle.manifest = manifest_from_json(f.metadata.at("manifest"));
  out.bundle.tensors = f.tensors;
  if (((f.flags & kFlagProtected) != 0) == out.bundle.manifest.empty())
    throw SchemaError("protected flag disagrees with the manifest");
  try {
    validate_bundle(out.config, out.bundle.tensors);
  } catch (const BundleError& e) {
    throw SchemaError(e.what());
  }
  return out;
}

TensorFile plan_to_file(const ProjectionPlan& plan) {
  TensorFile f;
  f.metadata = {{"kind", "projection_plan"},
                {"n_layers", plan.n_layers},
                {"n_kv_heads", plan.n_kv_heads},
                {"head_dim", plan.head_dim}};
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& b : plan.blocks) {
    const std::string key = "plan." + std::to_string(b.layer) + "." + std::to_string(b.kv_head);
    f.tensors[key] = b.p;
    f.tensors[key + ".eigenvalues"] = b.eigenvalues.transpose();
    groups.push_back({{"layer", b.layer}, {"kv_head", b.kv_head}, {"query_heads", b.query_heads}, {"flips", b.flips}});
  }
  f.metadata["blocks"] = groups;
  return f;
}

ProjectionPlan plan_from_file(const TensorFile& f) {
  try {
    if (f.metadata.value("kind", "") != "projection_plan") throw SchemaError("file does not hold a projection plan");
    ProjectionPlan plan;
    plan.n_layers = f.metadata.at("n_layers").get<int>();
    plan.n_kv_heads = f.metadata.at("n_kv_heads").get<int>();
    plan.head_dim = f.metadata.at("head_dim").get<int>();
    for (const auto& g : f.metadata.at("blocks")) {
      ProjectionBlock b;
      b.layer = g.at("layer").get<int>();
      b.kv_head = g.at("kv_head").get<int>();
      b.query_heads = g.at("query_heads").get<std::vector<int>>();
      b.flips = g.at("flips").get<int>();
      const std::string key = "plan." + std::to_string(b.layer) + "." + std::to_string(b.kv_head);
      auto p = f.tensors.find(key);
      auto e = f.tensors.find(key + ".eigenvalues");
      if (p == f.tensors.end() || e == f.tensors.end()) throw SchemaError("plan file is missing '" + key + "'");
      b.p = p->second;
      b.eigenvalues = e->second.transpose();
      plan.blocks.push_back(std::move(b));
    }
    if (plan.blocks.size() != static_cast<std::size_t>(plan.n_layers * plan.n_kv_heads))
      throw SchemaError("plan file block count does not match its header");
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("plan metadata: ") + e.what());
  }
}

}  // namespace mb
