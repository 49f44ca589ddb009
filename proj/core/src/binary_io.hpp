#pragma once

// Little-endian primitives shared by the checkpoint and dataset formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <utility>

#include "normshift/error.hpp"

namespace normshift::io {

template <typename U>
U to_le(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(b[i], b[sizeof(U) - 1 - i]);
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

template <typename U>
void put(std::ostream& os, U v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

inline void put_f32(std::ostream& os, float v) { put(os, std::bit_cast<std::uint32_t>(v)); }

template <typename U>
U get(std::istream& is, const char* what) {
  U v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(U))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  return to_le(v);
}

inline float get_f32(std::istream& is, const char* what) { return std::bit_cast<float>(get<std::uint32_t>(is, what)); }

inline std::string get_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  return s;
}

inline void put_f32_array(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_f32(os, data[i]);
  }
}

inline void get_f32_array(std::istream& is, float* data, std::size_t n, const char* what) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (is.gcount() != static_cast<std::streamsize>(n * sizeof(float))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<float>(to_le(std::bit_cast<std::uint32_t>(data[i])));
  }
}

}  // namespace normshift::io
