#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "condacl/tensor.hpp"

namespace condacl {

// Little-endian primitives shared by the dataset and checkpoint formats.

inline void write_u8(std::ostream& os, uint8_t v) { os.put(static_cast<char>(v)); }

inline void write_u16(std::ostream& os, uint16_t v) {
  char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
  os.write(b, 2);
}

inline void write_u32(std::ostream& os, uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

inline void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

[[noreturn]] inline void corrupt(const std::string& what) { fail(Err::CorruptDataset, what); }

inline void read_bytes(std::istream& is, char* out, size_t n, const char* what) {
  is.read(out, static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) corrupt(std::string("truncated ") + what);
}

inline uint8_t read_u8(std::istream& is, const char* what = "byte") {
  char b;
  read_bytes(is, &b, 1, what);
  return static_cast<uint8_t>(b);
}

inline uint16_t read_u16(std::istream& is, const char* what = "u16") {
  char b[2];
  read_bytes(is, b, 2, what);
  return static_cast<uint16_t>(static_cast<uint8_t>(b[0]) | (static_cast<uint16_t>(static_cast<uint8_t>(b[1])) << 8));
}

inline uint32_t read_u32(std::istream& is, const char* what = "u32") {
  char b[4];
  read_bytes(is, b, 4, what);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is, const char* what = "f64") {
  char b[8];
  read_bytes(is, b, 8, what);
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

inline std::string read_str(std::istream& is, const char* what = "string") {
  uint32_t len = read_u32(is, what);
  if (len > (1u << 20)) corrupt(std::string("implausible string length in ") + what);
  std::string s(len, '\0');
  if (len) read_bytes(is, s.data(), len, what);
  return s;
}

}  // namespace condacl
