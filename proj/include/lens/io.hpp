#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lens/tensor.hpp"

namespace lens {

/// Writes via a sibling temp file and rename, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

/// Little-endian byte encoding shared by the checkpoint and dataset formats.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u16(std::uint16_t v);
  void u32(std::uint32_t v);
  void f32(float v);
  void bytes(std::string_view s) { buf_.append(s); }
  const std::string& str() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  std::uint8_t u8();
  std::uint16_t u16();
  std::uint32_t u32();
  float f32();
  std::string_view bytes(std::size_t n);
  bool done() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n) const;
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

/// "LENS" checkpoint: magic, u32 version, then records
/// {u32 name_len, name, u8 dtype (0 = f32), u32 ndim, u32 dims..., payload} to EOF.
std::string encode_checkpoint(const NamedTensors& records);
NamedTensors decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& records);
std::map<std::string, Tensor<float>> load_checkpoint(const std::filesystem::path& path);

}  // namespace lens
