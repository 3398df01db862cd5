#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "remote/config.hpp"
#include "remote/errors.hpp"
#include "remote/params.hpp"

namespace remote {

/// Single-file checkpoint: one line of JSON manifest (format tag, config, and
/// name/group/shape/offset per tensor), then the little-endian f32 payload.
struct Checkpoint {
  RunConfig config;
  ParameterStore<float> params;
};

namespace detail {

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return (v >> 24) | ((v >> 8) & 0x0000FF00u) | ((v << 8) & 0x00FF0000u) | (v << 24);
  }
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const RunConfig& cfg, const ParameterStore<float>& params) {
  nlohmann::ordered_json manifest;
  manifest["format"] = "remote-checkpoint";
  manifest["version"] = 1;
  manifest["config"] = to_json(cfg);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& e : params.entries()) {
    tensors.push_back({{"name", e.name}, {"group", e.group}, {"shape", e.value.shape()}, {"offset", offset}});
    offset += e.value.numel() * sizeof(float);
  }
  manifest["tensors"] = tensors;
  manifest["payload_bytes"] = offset;
  std::string out = manifest.dump() + "\n";
  out.reserve(out.size() + offset);
  for (const auto& e : params.entries()) {
    for (float v : e.value.data()) {
      const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(v));
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      out.append(bytes, 4);
    }
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& blob, const std::string& origin = "checkpoint") {
  const auto newline = blob.find('\n');
  if (newline == std::string::npos) throw DataError(origin + ": missing manifest line");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(blob.substr(0, newline));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(origin + ": bad manifest: " + e.what());
  }
  if (manifest.value("format", "") != "remote-checkpoint") throw DataError(origin + ": not a checkpoint");
  Checkpoint ck{config_from_json(manifest.at("config")), {}};
  const std::string_view payload(blob.data() + newline + 1, blob.size() - newline - 1);
  if (payload.size() != manifest.at("payload_bytes").get<std::size_t>()) {
    throw DataError(origin + ": payload is " + std::to_string(payload.size()) + " bytes, manifest says " +
                    std::to_string(manifest.at("payload_bytes").get<std::size_t>()));
  }
  for (const auto& t : manifest.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const Shape shape = t.at("shape").get<Shape>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t n = numel_of(shape);
    if (offset + n * sizeof(float) > payload.size()) throw DataError(origin + ": tensor " + name + " overruns payload");
    std::vector<float> values(n);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint32_t bits = 0;
      std::memcpy(&bits, payload.data() + offset + k * 4, 4);
      values[k] = std::bit_cast<float>(detail::to_little(bits));
    }
    ck.params.add(name, t.at("group").get<std::string>(), BasicTensor<float>(shape, std::move(values)));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParameterStore<float>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << serialize_checkpoint(cfg, params);
  if (!out) throw DataError("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_checkpoint(buf.str(), path);
}

/// Rejects a parameter set whose names or shapes differ from what `cfg` builds.
inline void check_compatible(const ParameterStore<float>& expected, const ParameterStore<float>& loaded) {
  for (const auto& e : expected.entries()) {
    if (!loaded.contains(e.name)) throw ConfigError("checkpoint lacks parameter " + e.name);
    const auto& got = loaded.get(e.name);
    if (got.shape() != e.value.shape()) {
      throw ConfigError("parameter " + e.name + " has shape " + shape_string(got.shape()) + ", config expects " +
                        shape_string(e.value.shape()));
    }
  }
  if (loaded.entries().size() != expected.entries().size()) throw ConfigError("checkpoint has unexpected parameters");
}

}  // namespace remote
