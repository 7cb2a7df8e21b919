#pragma once

// Checkpoint binary format:
//   magic "IBTL" | version u32 LE | header-length u32 LE | header JSON |
//   payload: p little-endian 64-bit floats.
// The header carries the architecture, layer offsets, deterministic metadata
// and an FNV-1a digest of the payload; round trips are byte-identical.

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ibtl/errors.hpp"
#include "ibtl/model.hpp"

namespace ibtl {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t len) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= data[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string digest_hex(std::uint64_t h) {
  static const char* hex = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = hex[h & 0xF];
    h >>= 4;
  }
  return s;
}

struct Checkpoint {
  ArchitectureSpec spec;
  ParameterVector params;
  std::map<std::string, std::string> metadata;
  std::string payload_digest;  // 16 hex chars of fnv1a64
};

namespace detail {

inline void write_u32_le(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  f.write(reinterpret_cast<char*>(b), 4);
}

inline std::uint32_t read_u32_le(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw DataError("checkpoint: '" + path + "' truncated in header");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

inline std::vector<unsigned char> payload_bytes(const Vector& values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int k = 0; k < 8; ++k) bytes[i * 8 + static_cast<std::size_t>(k)] =
        static_cast<unsigned char>(bits >> (8 * k));
  }
  return bytes;
}

inline nlohmann::json spec_to_json(const ArchitectureSpec& spec) {
  return nlohmann::json{{"input_dim", spec.input_dim},
                        {"hidden_dims", spec.hidden_dims},
                        {"activation", activation_name(spec.activation)},
                        {"num_classes", spec.num_classes},
                        {"l2_lambda", spec.l2_lambda}};
}

inline ArchitectureSpec spec_from_json(const nlohmann::json& j) {
  ArchitectureSpec spec;
  spec.input_dim = j.at("input_dim").get<std::size_t>();
  spec.hidden_dims = j.at("hidden_dims").get<std::vector<std::size_t>>();
  spec.activation = activation_from_name(j.at("activation").get<std::string>());
  spec.num_classes = j.at("num_classes").get<std::size_t>();
  spec.l2_lambda = j.at("l2_lambda").get<double>();
  spec.validate();
  return spec;
}

}  // namespace detail

inline std::string checkpoint_digest(const ParameterVector& params) {
  const auto bytes = detail::payload_bytes(params.values);
  return digest_hex(fnv1a64(bytes.data(), bytes.size()));
}

inline void save_checkpoint(const std::string& path, const ArchitectureSpec& spec,
                            const ParameterVector& params,
                            const std::map<std::string, std::string>& metadata = {}) {
  params.check_matches(spec);
  const auto payload = detail::payload_bytes(params.values);

  nlohmann::json offsets = nlohmann::json::array();
  for (const LayerSpan& s : params.layer_offsets)
    offsets.push_back(nlohmann::json::array({s.begin, s.end}));
  nlohmann::json header{
      {"architecture", detail::spec_to_json(spec)},
      {"layer_offsets", offsets},
      {"metadata", metadata},
      {"payload_digest", digest_hex(fnv1a64(payload.data(), payload.size()))},
  };
  const std::string header_text = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "' for writing");
  f.write("IBTL", 4);
  detail::write_u32_le(f, kCheckpointVersion);
  detail::write_u32_le(f, static_cast<std::uint32_t>(header_text.size()));
  f.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!f) throw DataError("checkpoint: write failure on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[4];
  if (!f.read(magic, 4) || std::string(magic, 4) != "IBTL")
    throw DataError("checkpoint: '" + path + "' has no IBTL magic at byte 0");
  const std::uint32_t version = detail::read_u32_le(f, path);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: '" + path + "' version " + std::to_string(version) +
                    " unsupported (want " + std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t header_len = detail::read_u32_le(f, path);
  std::string header_text(header_len, '\0');
  if (!f.read(header_text.data(), header_len))
    throw DataError("checkpoint: '" + path + "' truncated in header (want " +
                    std::to_string(header_len) + " bytes at byte 12)");

  Checkpoint cp;
  std::vector<LayerSpan> stored_offsets;
  try {
    nlohmann::json header = nlohmann::json::parse(header_text);
    cp.spec = detail::spec_from_json(header.at("architecture"));
    for (const auto& pair : header.at("layer_offsets"))
      stored_offsets.push_back({pair.at(0).get<std::size_t>(), pair.at(1).get<std::size_t>()});
    cp.metadata = header.at("metadata").get<std::map<std::string, std::string>>();
    cp.payload_digest = header.at("payload_digest").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: '" + path + "' malformed header: " + e.what());
  }

  if (stored_offsets != make_layer_offsets(cp.spec))
    throw DataError("checkpoint: '" + path + "' layer offsets disagree with the architecture");

  const std::size_t p = cp.spec.param_count();
  std::vector<unsigned char> payload(p * 8);
  if (!f.read(reinterpret_cast<char*>(payload.data()),
              static_cast<std::streamsize>(payload.size())))
    throw DataError("checkpoint: '" + path + "' truncated payload (want " +
                    std::to_string(p * 8) + " bytes)");
  const std::string digest = digest_hex(fnv1a64(payload.data(), payload.size()));
  if (digest != cp.payload_digest)
    throw DataError("checkpoint: '" + path + "' payload digest mismatch (stored " +
                    cp.payload_digest + ", computed " + digest + ")");

  cp.params.values.resize(p);
  for (std::size_t i = 0; i < p; ++i) {
    std::uint64_t bits = 0;
    for (int k = 7; k >= 0; --k)
      bits = (bits << 8) | payload[i * 8 + static_cast<std::size_t>(k)];
    cp.params.values[i] = std::bit_cast<double>(bits);
  }
  cp.params.layer_offsets = stored_offsets;
  return cp;
}

}  // namespace ibtl
