#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "eyeseg/error.hpp"
#include "eyeseg/model.hpp"
#include "eyeseg/parameters.hpp"

// EYEW container, little-endian:
//   "EYEW" | u32 version=1 | u32 tensor_count
//   per tensor: u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 dims |
//               prod(dims) x f32 values, row-major
// Values are rounded to float32 on write.

namespace eyeseg {

inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}
  std::uint8_t u8() { return need(1), bytes_[pos_++]; }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError("corrupt weight file: truncated at byte " + std::to_string(pos_));
    }
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_weights(const ParameterStore& store) {
  detail::ByteWriter w;
  w.raw("EYEW");
  w.u32(kWeightsVersion);
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (const auto& e : store.entries()) {
    if (e.name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long: " + e.name);
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.raw(e.name);
    const Shape& shape = e.tensor.shape();
    if (shape.size() > 0xFF) throw std::invalid_argument("too many dimensions in " + e.name);
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (std::size_t d : shape) w.u32(static_cast<std::uint32_t>(d));
    for (double v : e.tensor.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

inline ParameterStore decode_weights(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.remaining() < 4 || r.str(4) != "EYEW") throw FormatError("not an EYEW weight file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion) {
    throw FormatError("unsupported EYEW version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParameterStore store;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16();
    if (name_len == 0) throw FormatError("corrupt weight file: empty tensor name");
    std::string name = r.str(name_len);
    const std::uint8_t ndim = r.u8();
    if (ndim == 0) throw FormatError("corrupt weight file: tensor " + name + " has no dimensions");
    Shape shape(ndim);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) throw FormatError("corrupt weight file: zero dimension in " + name);
      n *= d;
      if (n > r.remaining()) {
        throw FormatError("corrupt weight file: shape of " + name + " exceeds remaining payload");
      }
    }
    if (n * 4 > r.remaining()) {
      throw FormatError("corrupt weight file: payload of " + name + " truncated");
    }
    std::vector<double> values(n);
    for (auto& v : values) v = r.f32();
    if (store.contains(name)) throw FormatError("corrupt weight file: duplicate tensor " + name);
    store.add(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) {
    throw FormatError("corrupt weight file: " + std::to_string(r.remaining()) +
                      " trailing bytes after the declared tensors");
  }
  return store;
}

inline void save_weights(const ParameterStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_weights(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ParameterStore load_weights(const std::filesystem::path& path) {
  return decode_weights(read_file_bytes(path));
}

// Loads and checks the arrays against cfg (named-shape mismatch errors).
inline ParameterStore load_weights(const std::filesystem::path& path, const ModelConfig& cfg) {
  ParameterStore store = load_weights(path);
  validate_store(cfg, store);
  return store;
}

}  // namespace eyeseg
