// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fibro/error.hpp"

namespace fibro::detail {

using Bytes = std::vector<std::uint8_t>;

// Little-endian appender.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void i16(std::int16_t v) { put(static_cast<std::uint16_t>(v)); }
  void u32(std::uint32_t v) { put(v); }
  void i32(std::int32_t v) { put(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void zeros(std::size_t n) { buf_.insert(buf_.end(), n, 0); }

  std::size_t size() const { return buf_.size(); }
  Bytes take() { return std::move(buf_); }

 private:
  template <typename U>
  void put(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  Bytes buf_;
};

// Bounds-checked reader with selectable byte order.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, ErrorCode on_short, bool big_endian = false)
      : data_(data), on_short_(on_short), big_(big_endian) {}

  void seek(std::size_t pos) { pos_ = pos; }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return pos_ <= data_.size() ? data_.size() - pos_ : 0; }
  void set_big_endian(bool b) { big_ = b; }

  std::uint8_t u8() { return static_cast<std::uint8_t>(get<std::uint8_t>()); }
  std::int16_t i16() { return static_cast<std::int16_t>(get<std::uint16_t>()); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::int32_t i32() { return static_cast<std::int32_t>(get<std::uint32_t>()); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::string str(std::size_t n) {
    require(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void require(std::size_t n) const {
    if (pos_ > data_.size() || data_.size() - pos_ < n)
      throw Error(on_short_, "need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                                 ", have " + std::to_string(remaining()));
  }

 private:
  template <typename U>
  U get() {
    require(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const std::size_t src = big_ ? sizeof(U) - 1 - i : i;
      v |= static_cast<U>(static_cast<U>(data_[pos_ + src]) << (8 * i));
    }
    pos_ += sizeof(U);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  ErrorCode on_short_;
  bool big_;
};

Bytes read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace fibro::detail
