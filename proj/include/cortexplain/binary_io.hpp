#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "cortexplain/error.hpp"

// Little-endian primitive readers/writers shared by the binary formats.
namespace cx::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void write(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

inline void write_magic(std::ostream& out, std::string_view magic) {
  out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

template <typename T>
T read(std::istream& in, std::string_view what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError("truncated file while reading " + std::string(what));
  }
  return value;
}

inline void read_bytes(std::istream& in, void* dst, std::size_t n, std::string_view what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError("truncated file while reading " + std::string(what));
  }
}

inline void expect_magic(std::istream& in, std::string_view magic, std::string_view format) {
  char buf[4] = {};
  in.read(buf, 4);
  if (in.gcount() != 4 || std::string_view(buf, 4) != magic) {
    throw FormatError("bad magic: not a " + std::string(format) + " file");
  }
}

}  // namespace cx::binio
