#include "dp/serialize.hpp"

#include <bit>
#include <cstring>

namespace dp {

ByteWriter::ByteWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
  if (!out_) throw IoError("cannot open for writing: " + path);
}

ByteWriter::~ByteWriter() {
  if (out_.is_open()) out_.close();
}

void ByteWriter::u8(uint8_t v) { bytes(&v, 1); }

void ByteWriter::u16(uint16_t v) {
  uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
  bytes(b, 2);
}

void ByteWriter::u32(uint32_t v) {
  uint8_t b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  bytes(b, 4);
}

void ByteWriter::u64(uint64_t v) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  bytes(b, 8);
}

void ByteWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

void ByteWriter::bytes(const void* data, size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw IoError("write failed: " + path_);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  if (!s.empty()) bytes(s.data(), s.size());
}

void ByteWriter::tensor(const Tensor& t) {
  u8(static_cast<uint8_t>(t.ndim()));
  for (int64_t d : t.shape()) u64(static_cast<uint64_t>(d));
  for (int64_t i = 0; i < t.size(); ++i) f64(t[i]);
}

void ByteWriter::close() {
  out_.close();
  if (!out_.good() && !out_.eof()) throw IoError("close failed: " + path_);
}

ByteReader::ByteReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open for reading: " + path);
}

void ByteReader::need(size_t n, char* into) {
  in_.read(into, static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in_.gcount()) != n)
    throw FormatError("truncated file: " + path_);
}

uint8_t ByteReader::u8() {
  char b;
  need(1, &b);
  return static_cast<uint8_t>(b);
}

uint16_t ByteReader::u16() {
  char b[2];
  need(2, b);
  return static_cast<uint16_t>(static_cast<uint8_t>(b[0])) |
         static_cast<uint16_t>(static_cast<uint8_t>(b[1])) << 8;
}

uint32_t ByteReader::u32() {
  char b[4];
  need(4, b);
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  return v;
}

uint64_t ByteReader::u64() {
  char b[8];
  need(8, b);
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(b[i])) << (8 * i);
  return v;
}

double ByteReader::f64() { return std::bit_cast<double>(u64()); }

void ByteReader::bytes(void* data, size_t n) { need(n, static_cast<char*>(data)); }

std::string ByteReader::str() {
  uint32_t n = u32();
  if (n > (1u << 30)) throw FormatError("unreasonable string length in " + path_);
  std::string s(n, '\0');
  if (n) need(n, s.data());
  return s;
}

Tensor ByteReader::tensor() {
  uint8_t nd = u8();
  if (nd > 2) throw FormatError("tensor rank > 2 in " + path_);
  std::vector<int64_t> shape(nd);
  for (auto& d : shape) d = static_cast<int64_t>(u64());
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t[i] = f64();
  return t;
}

bool ByteReader::at_eof() { return in_.peek() == std::ifstream::traits_type::eof(); }

}  // namespace dp
