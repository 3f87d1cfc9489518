// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "iavit/data_io/json_config.hpp"
#include "iavit/model/iavit.hpp"

namespace iavit {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kCheckpointVersion = 1;

// Layout: one line of compact JSON (format_version, model config, tensor
// table with byte offsets), a '\n', then every tensor as little-endian
// IEEE-754 binary32 in table order.
//
// {"format_version":1,"model":{...},"blob_bytes":B,
//  "tensors":[{"name":"patch_embed.weight","shape":[64,64],"offset":0,"bytes":16384}, ...]}

namespace detail {

inline void put_le32(std::vector<char>& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

inline float get_le32(const char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline Json checkpoint_header(const IAViT& model, const Json& extra = Json::object()) {
  Json table = Json::array();
  std::size_t offset = 0;
  model.for_each_parameter([&](const std::string& name, const Var& v) {
    const std::size_t bytes = v->size() * 4;
    table.push_back(Json{{"name", name}, {"shape", v->shape}, {"offset", offset}, {"bytes", bytes}});
    offset += bytes;
  });
  Json header{{"format_version", kCheckpointVersion},
              {"model", to_json(model.config())},
              {"blob_bytes", offset},
              {"tensors", table}};
  if (!extra.empty()) header["meta"] = extra;
  return header;
}

inline std::string serialize_checkpoint(const IAViT& model, const Json& meta = Json::object()) {
  std::string out = checkpoint_header(model, meta).dump();
  out.push_back('\n');
  std::vector<char> blob;
  blob.reserve(model.parameter_count() * 4);
  model.for_each_parameter([&](const std::string&, const Var& v) {
    for (float x : v->data) detail::put_le32(blob, x);
  });
  out.append(blob.begin(), blob.end());
  return out;
}

inline void save_checkpoint(const IAViT& model, const std::filesystem::path& path, const Json& meta = Json::object()) {
  const std::string bytes = serialize_checkpoint(model, meta);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

struct LoadedCheckpoint {
  IAViT model;
  Json meta;
};

/// Parses a checkpoint held in memory. Throws before touching any model on
/// every inconsistency, so a failed load never yields a partial model.
inline LoadedCheckpoint parse_checkpoint(const std::string& bytes) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw CheckpointError("checkpoint: header line not terminated");
  Json header;
  try {
    header = Json::parse(bytes.substr(0, nl));
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint: header parse error: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version") || !header["format_version"].is_number_integer()) {
    throw CheckpointError("checkpoint: header lacks an integer format_version");
  }
  const int version = header["format_version"].get<int>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: format_version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig cfg;
  std::size_t blob_bytes = 0;
  try {
    cfg = model_config_from_json(ConfigReader(header.at("model"), "model"));
    blob_bytes = header.at("blob_bytes").get<std::size_t>();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: bad model config: ") + e.what());
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed header: ") + e.what());
  }
  const std::size_t available = bytes.size() - nl - 1;
  if (available < blob_bytes) {
    throw CheckpointError("checkpoint: truncated blob, header promises " + std::to_string(blob_bytes) +
                          " bytes but only " + std::to_string(available) + " follow");
  }
  if (available > blob_bytes) {
    throw CheckpointError("checkpoint: " + std::to_string(available - blob_bytes) + " trailing bytes after blob");
  }

  IAViT model(cfg, 0);
  const auto expected = model.named_parameters();
  const Json& table = header.contains("tensors") ? header["tensors"] : Json();
  if (!table.is_array() || table.size() != expected.size()) {
    throw CheckpointError("checkpoint: tensor table has " + std::to_string(table.is_array() ? table.size() : 0) +
                          " entries, model expects " + std::to_string(expected.size()));
  }
  std::size_t offset = 0;
  try {
    for (std::size_t i = 0; i < expected.size(); ++i) {
      const Json& e = table[i];
      const auto& [name, var] = expected[i];
      const auto shape = e.at("shape").get<Shape>();
      const auto entry_offset = e.at("offset").get<std::size_t>();
      const auto entry_bytes = e.at("bytes").get<std::size_t>();
      if (e.at("name").get<std::string>() != name || shape != var->shape || entry_offset != offset ||
          entry_bytes != var->size() * 4) {
        throw CheckpointError("checkpoint: shape table entry " + std::to_string(i) + " (" + e.dump() +
                              ") is inconsistent with parameter " + name + " " + to_string(var->shape));
      }
      offset += entry_bytes;
    }
  } catch (const Json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed tensor table: ") + e.what());
  }
  if (offset != blob_bytes) {
    throw CheckpointError("checkpoint: shape table totals " + std::to_string(offset) + " bytes, blob_bytes is " +
                          std::to_string(blob_bytes));
  }

  const char* p = bytes.data() + nl + 1;
  for (const auto& [name, var] : expected) {
    for (auto& x : var->data) {
      x = detail::get_le32(p);
      p += 4;
    }
  }
  return {std::move(model), header.value("meta", Json::object())};
}

inline LoadedCheckpoint load_checkpoint_with_meta(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

inline IAViT load_checkpoint(const std::filesystem::path& path) { return load_checkpoint_with_meta(path).model; }

}  // namespace iavit
