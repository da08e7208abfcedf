#pragma once

// Little-endian binary stream helpers for the dump/checkpoint containers.
// The host is assumed little-endian (checked where the containers are read).

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "flowdenoise/errors.hpp"

namespace fdn::binio {

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw FormatError(std::string("truncated field: ") + what);
  return value;
}

inline void write_magic(std::ostream& os, const char magic[4]) {
  os.write(magic, 4);
}

inline void expect_magic(std::istream& is, const char magic[4],
                         const char* what) {
  char got[4];
  is.read(got, 4);
  if (!is || std::memcmp(got, magic, 4) != 0)
    throw FormatError(std::string("bad magic, expected ") + what);
}

inline void write_f32_array(std::ostream& os, const double* src, size_t n) {
  std::vector<float> buf(n);
  for (size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(src[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(n * sizeof(float)));
}

inline void read_f32_array(std::istream& is, double* dst, size_t n,
                           const char* what) {
  std::vector<float> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (!is) throw FormatError(std::string("truncated data: ") + what);
  for (size_t i = 0; i < n; ++i) dst[i] = buf[i];
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto n = read_pod<uint32_t>(is, what);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError(std::string("truncated string: ") + what);
  return s;
}

}  // namespace fdn::binio
