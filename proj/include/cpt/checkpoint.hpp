#pragma once

// Checkpoint file:
//   "CPT1" | u32 format version | u64 header length | JSON header | tensor blob
// The header echoes the model config and indexes every tensor by name, shape,
// dtype and byte offset into the blob. Scalars are raw little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "cpt/model.hpp"

namespace cpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'C', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kNotACheckpoint, kVersionMismatch, kTruncated, kShapeMismatch, kIo };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

template <typename T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "float32" : "float64";
}

template <typename T>
struct Checkpoint {
  ModelConfig config;
  ParamStore<T> params;
};

template <typename T>
void save_params(const ParamStore<T>& params, const ModelConfig& cfg, const std::string& path) {
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["config"] = model_to_kv(cfg);
  auto& index = header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.at(i);
    const std::uint64_t bytes = t.numel() * sizeof(T);
    index.push_back({{"name", params.name(i)}, {"shape", t.shape()}, {"dtype", dtype_name<T>()},
                     {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write checkpoint '" + path + "'");
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t hlen = text.size();
  out.write(kCheckpointMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto d = params.at(i).data();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size_bytes()));
  }
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "failed writing checkpoint '" + path + "'");
}

/// Reads a checkpoint and rebuilds its parameters using the echoed config.
template <typename T>
Checkpoint<T> load_params(const std::string& path) {
  using Kind = CheckpointError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Kind::kIo, "cannot open checkpoint '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(Kind::kNotACheckpoint, "'" + path + "' is not a checkpoint (bad magic bytes)");
  if (bytes.size() < 16) throw CheckpointError(Kind::kTruncated, "checkpoint '" + path + "' is truncated (preamble)");
  std::uint32_t version = 0;
  std::uint64_t hlen = 0;
  std::memcpy(&version, bytes.data() + 4, sizeof version);
  std::memcpy(&hlen, bytes.data() + 8, sizeof hlen);
  if (version != kCheckpointVersion)
    throw CheckpointError(Kind::kVersionMismatch, "checkpoint '" + path + "' has format version " +
                                                      std::to_string(version) + ", expected " +
                                                      std::to_string(kCheckpointVersion));
  if (bytes.size() - 16 < hlen) throw CheckpointError(Kind::kTruncated, "checkpoint '" + path + "' is truncated (header)");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::kNotACheckpoint, "checkpoint '" + path + "' header is not valid: " + e.what());
  }
  const std::size_t blob = 16 + hlen;

  Checkpoint<T> ck;
  KeyValues cfg_kv;
  for (auto& [k, v] : header.at("config").items()) cfg_kv[k] = v.template get<std::string>();
  ck.config = model_from_kv(cfg_kv);
  for (const auto& entry : header.at("tensors")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const auto dtype = entry.at("dtype").get<std::string>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const std::size_t width = dtype == "float32" ? 4 : dtype == "float64" ? 8 : 0;
    if (width == 0) throw CheckpointError(Kind::kNotACheckpoint, "tensor '" + name + "' has unknown dtype " + dtype);
    const std::size_t n = numel_of(shape);
    if (bytes.size() < blob + offset + n * width)
      throw CheckpointError(Kind::kTruncated, "checkpoint '" + path + "' is truncated inside tensor '" + name + "'");
    auto& t = ck.params.add(name, shape);
    auto dst = t.mutable_data();
    const char* src = bytes.data() + blob + offset;
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 8) {
        double v;
        std::memcpy(&v, src + i * 8, 8);
        dst[i] = static_cast<T>(v);
      } else {
        float v;
        std::memcpy(&v, src + i * 4, 4);
        dst[i] = static_cast<T>(v);
      }
    }
  }
  return ck;
}

/// Checks that `params` has exactly the layout `cfg` builds, naming the first
/// tensor that differs.
template <typename T>
void check_param_layout(const ParamStore<T>& params, const ModelConfig& cfg) {
  const auto expected = build_model_params<T>(cfg, 0);
  const std::size_t n = std::min(expected.size(), params.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (expected.name(i) != params.name(i) || expected.at(i).shape() != params.at(i).shape())
      throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                            "shape mismatch at tensor '" + params.name(i) + "' " + shape_str(params.at(i).shape()) +
                                ": config expects '" + expected.name(i) + "' " + shape_str(expected.at(i).shape()));
  }
  if (expected.size() != params.size()) {
    const auto& name = expected.size() > params.size() ? expected.name(n) : params.name(n);
    throw CheckpointError(CheckpointError::Kind::kShapeMismatch,
                          "shape mismatch: tensor count differs starting at '" + name + "'");
  }
}

/// Loads a checkpoint that must match `cfg` tensor-for-tensor.
template <typename T>
ParamStore<T> load_params(const std::string& path, const ModelConfig& cfg) {
  auto ck = load_params<T>(path);
  check_param_layout(ck.params, cfg);
  return std::move(ck.params);
}

}  // namespace cpt
