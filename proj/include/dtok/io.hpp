#ifndef DTOK_IO_HPP
#define DTOK_IO_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian byte serialization, CRC32 and the on-disk containers. Every
// container ends with a CRC32 (IEEE reflected, zlib-compatible) of all
// preceding bytes.

namespace dtok {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

uint32_t crc32(const std::vector<uint8_t>& bytes, size_t count);

class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(v); }
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f32(float v);
  void bytes(const void* data, size_t count);
  void str16(const std::string& s);  // u16 length prefix + raw bytes
  void magic(const char tag[4]);
  void append_crc();  // crc32 of everything written so far

  const std::vector<uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<uint8_t> bytes) : buf_(std::move(bytes)) {}

  uint8_t u8();
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  float f32();
  std::string str16();
  // consumes `count` bytes; the returned range is valid until the next read
  const uint8_t* raw(size_t count);
  const uint8_t* raw_end() const { return buf_.data() + pos_; }
  void expect_magic(const char tag[4]);
  // validates the trailing CRC against everything before it; call first
  void check_crc(const std::string& what);
  size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(size_t count, const char* what);
  std::vector<uint8_t> buf_;
  size_t pos_ = 0;
};

void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::string& path);

}  // namespace dtok

#endif  // DTOK_IO_HPP
