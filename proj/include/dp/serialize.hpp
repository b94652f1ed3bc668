#pragma once
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dp/tensor.hpp"

namespace dp {

// Little-endian binary writer/reader used by the dataset and checkpoint
// containers. Layout is explicit byte-by-byte so files are identical across
// host endianness and compilers.
class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path);
  ~ByteWriter();

  void u8(uint8_t v);
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void bytes(const void* data, size_t n);
  void str(const std::string& s);  // u32 length + raw bytes
  void tensor(const Tensor& t);    // u8 ndim, u64 dims, f64 payload

  void close();
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::ofstream out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& path);

  uint8_t u8();
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  double f64();
  void bytes(void* data, size_t n);
  std::string str();
  Tensor tensor();

  bool at_eof();

 private:
  std::string path_;
  std::ifstream in_;
  void need(size_t n, char* into);
};

}  // namespace dp
