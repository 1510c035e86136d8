#include "lens/io.hpp"

#include <bit>
#include <fstream>
#include <set>
#include <sstream>

#include "lens/errors.hpp"

namespace lens {

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ByteWriter::u16(std::uint16_t v) {
  u8(static_cast<std::uint8_t>(v));
  u8(static_cast<std::uint8_t>(v >> 8));
}

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) throw ConfigError("truncated file: need " + std::to_string(n) + " more bytes");
}

std::uint8_t ByteReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(data_[pos_++]);
}

std::uint16_t ByteReader::u16() {
  const std::uint16_t lo = u8();
  return static_cast<std::uint16_t>(lo | (u8() << 8));
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
  return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }

std::string_view ByteReader::bytes(std::size_t n) {
  need(n);
  auto s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::string encode_checkpoint(const NamedTensors& records) {
  ByteWriter w;
  w.bytes("LENS");
  w.u32(kCheckpointVersion);
  for (const auto& [name, t] : records) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
    w.u8(0);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (float v : t.data()) w.f32(v);
  }
  return w.str();
}

NamedTensors decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 8 || r.bytes(4) != "LENS") throw ConfigError("not a LENS checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  NamedTensors out;
  std::set<std::string> seen;
  while (!r.done()) {
    std::string name(r.bytes(r.u32()));
    if (!seen.insert(name).second) throw ConfigError("duplicate checkpoint record '" + name + "'");
    if (const auto dtype = r.u8(); dtype != 0) {
      throw ConfigError("record '" + name + "' has unsupported dtype " + std::to_string(dtype));
    }
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    if (shape.empty()) throw ConfigError("record '" + name + "' has rank 0");
    Tensor<float> t(shape);
    if (r.remaining() / 4 < t.numel()) throw ConfigError("record '" + name + "' payload is truncated");
    for (auto& v : t.data()) v = r.f32();
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& records) {
  write_file_atomic(path, encode_checkpoint(records));
}

std::map<std::string, Tensor<float>> load_checkpoint(const std::filesystem::path& path) {
  std::map<std::string, Tensor<float>> out;
  for (auto& [name, t] : decode_checkpoint(read_file(path))) out.emplace(std::move(name), std::move(t));
  return out;
}

}  // namespace lens
