// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Checkpoint layout (little-endian):
//
//   "EENDCKPT" | u32 version | u64 config length | config JSON text |
//   u64 tensor count | per tensor: u64 name length, name bytes,
//   u64 element count, element count f64 values.
//
// The config JSON is the canonical dump of EncoderConfig (sorted keys, no
// whitespace), so writing an unmodified checkpoint reproduces it byte for byte.

#include <fstream>
#include <sstream>
#include <string>

#include "eend/binary_io.hpp"
#include "eend/encoder.hpp"

namespace eend {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const EncoderParams& p) {
  const std::string cfg = nlohmann::json(p.config).dump();
  binary::put_bytes(os, "EENDCKPT");
  binary::put_le<std::uint32_t>(os, kCheckpointVersion);
  binary::put_le<std::uint64_t>(os, cfg.size());
  binary::put_bytes(os, cfg);
  binary::put_le<std::uint64_t>(os, p.tensors.size());
  for (std::size_t i = 0; i < p.tensors.size(); ++i) {
    const std::string& name = p.tensors.name(i);
    const Matrix& t = p.tensors.tensor(i);
    binary::put_le<std::uint64_t>(os, name.size());
    binary::put_bytes(os, name);
    binary::put_le<std::uint64_t>(os, t.size());
    for (double v : t.storage()) binary::put_f64(os, v);
  }
}

inline EncoderParams read_checkpoint(std::istream& is) {
  if (binary::get_bytes(is, 8, "magic") != "EENDCKPT") throw FormatError("checkpoint: bad magic");
  const auto version = binary::get_le<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const auto cfg_len = binary::get_le<std::uint64_t>(is, "config length");
  const std::string cfg_text = binary::get_bytes(is, cfg_len, "config");
  EncoderConfig cfg;
  try {
    cfg = nlohmann::json::parse(cfg_text).get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: bad config JSON: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: bad config: ") + e.what());
  }
  EncoderParams p = zero_params(cfg);
  const auto count = binary::get_le<std::uint64_t>(is, "tensor count");
  if (count != p.tensors.size()) {
    throw FormatError("checkpoint: " + std::to_string(count) + " tensors, config expects " +
                      std::to_string(p.tensors.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto name_len = binary::get_le<std::uint64_t>(is, "name length");
    const std::string name = binary::get_bytes(is, name_len, "name");
    if (name != p.tensors.name(i)) {
      throw FormatError("checkpoint: tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                        p.tensors.name(i) + "'");
    }
    const auto n = binary::get_le<std::uint64_t>(is, "element count");
    Matrix& t = p.tensors.tensor(i);
    if (n != t.size()) throw FormatError("checkpoint: tensor '" + name + "' has wrong element count");
    for (double& v : t.storage()) v = binary::get_f64(is, "payload");
  }
  return p;
}

inline void save_checkpoint(const std::string& path, const EncoderParams& p) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot write checkpoint: " + path);
  write_checkpoint(os, p);
}

inline EncoderParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint: " + path);
  try {
    return read_checkpoint(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline std::string checkpoint_bytes(const EncoderParams& p) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, p);
  return os.str();
}

}  // namespace eend
