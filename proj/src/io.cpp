#include "dtok/io.hpp"

#include <array>
#include <cstring>
#include <fstream>

namespace dtok {

namespace {

std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}

}  // namespace

uint32_t crc32(const std::vector<uint8_t>& bytes, size_t count) {
  static const std::array<uint32_t, 256> table = make_crc_table();
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < count; ++i) c = table[(c ^ bytes[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void ByteWriter::u16(uint16_t v) {
  buf_.push_back(static_cast<uint8_t>(v));
  buf_.push_back(static_cast<uint8_t>(v >> 8));
}

void ByteWriter::u32(uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  u32(bits);
}

void ByteWriter::bytes(const void* data, size_t count) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  buf_.insert(buf_.end(), p, p + count);
}

void ByteWriter::str16(const std::string& s) {
  if (s.size() > 0xFFFF) throw IoError("string too long for u16 length prefix");
  u16(static_cast<uint16_t>(s.size()));
  bytes(s.data(), s.size());
}

void ByteWriter::magic(const char tag[4]) { bytes(tag, 4); }

void ByteWriter::append_crc() { u32(crc32(buf_, buf_.size())); }

void ByteReader::need(size_t count, const char* what) {
  if (pos_ + count > buf_.size()) {
    throw IoError(std::string("truncated file while reading ") + what);
  }
}

uint8_t ByteReader::u8() {
  need(1, "u8");
  return buf_[pos_++];
}

uint16_t ByteReader::u16() {
  need(2, "u16");
  uint16_t v = static_cast<uint16_t>(buf_[pos_] | (buf_[pos_ + 1] << 8));
  pos_ += 2;
  return v;
}

uint32_t ByteReader::u32() {
  need(4, "u32");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

uint64_t ByteReader::u64() {
  need(8, "u64");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() {
  uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

const uint8_t* ByteReader::raw(size_t count) {
  need(count, "raw bytes");
  const uint8_t* p = buf_.data() + pos_;
  pos_ += count;
  return p;
}

std::string ByteReader::str16() {
  uint16_t len = u16();
  need(len, "string");
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), len);
  pos_ += len;
  return s;
}

void ByteReader::expect_magic(const char tag[4]) {
  need(4, "magic");
  if (std::memcmp(buf_.data() + pos_, tag, 4) != 0) {
    throw IoError(std::string("bad magic, expected ") + std::string(tag, 4));
  }
  pos_ += 4;
}

void ByteReader::check_crc(const std::string& what) {
  if (buf_.size() < 4) throw IoError(what + ": too short for a CRC trailer");
  const size_t body = buf_.size() - 4;
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= static_cast<uint32_t>(buf_[body + i]) << (8 * i);
  if (crc32(buf_, body) != stored) throw IoError(what + ": CRC mismatch");
  buf_.resize(body);
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path);
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open " + path);
  std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw IoError("read failed for " + path);
  return bytes;
}

}  // namespace dtok
