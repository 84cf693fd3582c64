// Copyright 2026 The EEND Lab Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Little-endian primitives shared by the WAV, feature-archive and checkpoint
// codecs. Byte order is explicit so files are identical across hosts.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "eend/errors.hpp"

namespace eend::binary {

template <typename UInt>
void put_le(std::ostream& os, UInt v) {
  char buf[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, sizeof(UInt));
}

template <typename UInt>
UInt get_le(std::istream& is, const char* what) {
  unsigned char buf[sizeof(UInt)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(UInt))) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(buf[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double v) { put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(std::istream& is, const char* what) {
  return std::bit_cast<double>(get_le<std::uint64_t>(is, what));
}
inline void put_f32(std::ostream& os, float v) { put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v)); }
inline float get_f32(std::istream& is, const char* what) {
  return std::bit_cast<float>(get_le<std::uint32_t>(is, what));
}

inline void put_bytes(std::ostream& os, const std::string& s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }
inline std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError(std::string("truncated input while reading ") + what);
  }
  return s;
}

}  // namespace eend::binary
