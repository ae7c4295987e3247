#pragma once

// Little-endian byte streams with a fixed field order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ddr/tensor.hpp"

namespace ddr {

class FormatError : public Error {
 public:
  using Error::Error;
};

class ByteWriter {
 public:
  template <typename U>
    requires std::is_integral_v<U>
  void integer(U value) {
    using Unsigned = std::make_unsigned_t<U>;
    auto bits = static_cast<Unsigned>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bytes_.push_back(static_cast<std::uint8_t>(bits & 0xffu));
      if constexpr (sizeof(U) > 1) bits = static_cast<Unsigned>(bits >> 8);
    }
  }

  void u8(std::uint8_t v) { integer(v); }
  void u32(std::uint32_t v) { integer(v); }
  void u64(std::uint64_t v) { integer(v); }

  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  template <typename T>
  void scalar(T v) {
    if constexpr (std::is_same_v<T, float>) f32(v);
    else f64(static_cast<double>(v));
  }

  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }

  void string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  template <typename T>
  void tensor(const Tensor<T>& t) {
    u8(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) u64(d);
    for (T v : t.span()) scalar(v);
  }

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}

  template <typename U>
    requires std::is_integral_v<U>
  U integer() {
    need(sizeof(U));
    using Unsigned = std::make_unsigned_t<U>;
    Unsigned bits = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      bits = static_cast<Unsigned>(bits | (static_cast<Unsigned>(bytes_[pos_ + i]) << (8 * i)));
    }
    pos_ += sizeof(U);
    return static_cast<U>(bits);
  }

  std::uint8_t u8() { return integer<std::uint8_t>(); }
  std::uint32_t u32() { return integer<std::uint32_t>(); }
  std::uint64_t u64() { return integer<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  template <typename T>
  T scalar() {
    if constexpr (std::is_same_v<T, float>) return f32();
    else return static_cast<T>(f64());
  }

  std::string string() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_bytes(const std::string& magic) {
    need(magic.size());
    if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0) {
      throw FormatError("bad magic: expected '" + magic + "'");
    }
    pos_ += magic.size();
  }

  template <typename T>
  Tensor<T> tensor(const Shape& expected, const char* what) {
    const std::size_t rank = u8();
    Shape shape(rank);
    for (auto& d : shape) d = u64();
    if (shape != expected) {
      throw FormatError(std::string(what) + ": stored shape " + shape_string(shape) +
                        " does not match config shape " + shape_string(expected));
    }
    Tensor<T> t(shape);
    need(t.size() * (std::is_same_v<T, float> ? 4 : 8));
    for (auto& v : t.span()) v = scalar<T>();
    if (!all_finite<T>(t.span())) throw FormatError(std::string(what) + ": non-finite value");
    return t;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("unexpected end of data");
  }

  std::vector<std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'");
}

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

/// FNV-1a, 64 bit. Used for manifest checksums.
inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline std::string file_checksum(const std::string& path) {
  const auto bytes = read_file(path);
  return hex64(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace ddr
