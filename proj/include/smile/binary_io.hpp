#pragma once

// Little-endian primitive encoding shared by the dataset and checkpoint
// formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "smile/errors.hpp"

namespace smile::binio {

template <typename T>
  requires std::is_integral_v<T>
void write_int(std::ostream& os, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  char bytes[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((u >> (8 * i)) & 0xffu);
  os.write(bytes, sizeof(T));
}

inline void write_double(std::ostream& os, double v) {
  write_int(os, std::bit_cast<std::uint64_t>(v));
}

template <typename T>
  requires std::is_integral_v<T>
T read_int(std::istream& is, const char* what) {
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(U(bytes[i]) << (8 * i));
  return static_cast<T>(u);
}

inline double read_double(std::istream& is, const char* what) {
  return std::bit_cast<double>(read_int<std::uint64_t>(is, what));
}

}  // namespace smile::binio
