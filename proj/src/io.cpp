#include "bregmanlens/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "bregmanlens/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace blns {

namespace fs = std::filesystem;

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open ", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) fail(ErrorKind::io, "read failed for ", path);
  return bytes;
}

std::string read_text_file(const std::string& path) {
  std::vector<unsigned char> b = read_file(path);
  return std::string(b.begin(), b.end());
}

void write_file_atomic(const std::string& path, const void* data, size_t n) {
  fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open ", tmp, " for writing");
    out.write(static_cast<const char*>(data), std::streamsize(n));
    if (!out) fail(ErrorKind::io, "write failed for ", tmp);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail(ErrorKind::io, "rename ", tmp, " -> ", path, " failed: ", ec.message());
}

void write_file_atomic(const std::string& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}

void ensure_dir(const std::string& path) {
  std::error_code ec;
  fs::create_directories(path, ec);
  if (ec) fail(ErrorKind::io, "cannot create directory ", path, ": ", ec.message());
}

bool file_exists(const std::string& path) { return fs::exists(path); }

void ByteWriter::raw(const void* p, size_t n) {
  const auto* b = static_cast<const unsigned char*>(p);
  bytes.insert(bytes.end(), b, b + n);
}
void ByteWriter::u32(uint32_t v) { raw(&v, 4); }
void ByteWriter::u64(uint64_t v) { raw(&v, 8); }
void ByteWriter::f64(double v) { raw(&v, 8); }
void ByteWriter::str(const std::string& s) {
  u32(uint32_t(s.size()));
  raw(s.data(), s.size());
}

void ByteReader::need(size_t k) const {
  if (pos + k > n) fail(ErrorKind::corruption, "file truncated: need ", k, " bytes at offset ", pos);
}
void ByteReader::raw(void* out, size_t k) {
  need(k);
  std::memcpy(out, p + pos, k);
  pos += k;
}
uint8_t ByteReader::u8() {
  uint8_t v;
  raw(&v, 1);
  return v;
}
uint32_t ByteReader::u32() {
  uint32_t v;
  raw(&v, 4);
  return v;
}
uint64_t ByteReader::u64() {
  uint64_t v;
  raw(&v, 8);
  return v;
}
double ByteReader::f64() {
  double v;
  raw(&v, 8);
  return v;
}
std::string ByteReader::str() {
  const uint32_t len = u32();
  need(len);
  std::string s(reinterpret_cast<const char*>(p + pos), len);
  pos += len;
  return s;
}

}  // namespace blns
