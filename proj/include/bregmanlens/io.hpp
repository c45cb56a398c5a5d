#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace blns {

// Reads a whole file; io error when missing/unreadable.
std::vector<unsigned char> read_file(const std::string& path);
std::string read_text_file(const std::string& path);

// Writes via a temp file in the same directory followed by rename, so
// interrupted runs never leave partial outputs.
void write_file_atomic(const std::string& path, const void* data, size_t n);
void write_file_atomic(const std::string& path, const std::string& text);

void ensure_dir(const std::string& path);
bool file_exists(const std::string& path);

// Little-endian buffer serialization for the checkpoint format.
struct ByteWriter {
  std::vector<unsigned char> bytes;
  void raw(const void* p, size_t n);
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v);
  void u64(uint64_t v);
  void i64(int64_t v) { u64(uint64_t(v)); }
  void f64(double v);
  void str(const std::string& s);
};

struct ByteReader {
  const unsigned char* p = nullptr;
  size_t n = 0;
  size_t pos = 0;
  void need(size_t k) const;  // corruption error when short
  void raw(void* out, size_t k);
  uint8_t u8();
  uint32_t u32();
  uint64_t u64();
  int64_t i64() { return int64_t(u64()); }
  double f64();
  std::string str();
};

}  // namespace blns
