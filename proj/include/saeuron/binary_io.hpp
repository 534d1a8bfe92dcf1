#pragma once

// Little-endian encoding helpers shared by the shard and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <type_traits>

#include "saeuron/errors.hpp"

namespace saeuron::io {

class ByteWriter {
 public:
  template <class T>
    requires std::is_integral_v<T>
  void put(T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
    }
  }

  void put_f32(float value) { put(std::bit_cast<std::uint32_t>(value)); }

  void put_bytes(std::span<const char> bytes) { buf_.append(bytes.data(), bytes.size()); }
  void put_bytes(const std::string& bytes) { buf_.append(bytes); }

  void pad(std::size_t count) { buf_.append(count, '\0'); }

  const std::string& bytes() const { return buf_; }
  std::string& bytes() { return buf_; }
  void clear() { buf_.clear(); }

 private:
  std::string buf_;
};

// Reads from an in-memory buffer; running off the end throws CorruptFileError.
class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  template <class T>
    requires std::is_integral_v<T>
  T get() {
    require(sizeof(T));
    using U = std::make_unsigned_t<T>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      u |= static_cast<U>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::span<const char> get_bytes(std::size_t count) {
    require(count);
    auto out = data_.subspan(pos_, count);
    pos_ += count;
    return out;
  }

  void skip(std::size_t count) {
    require(count);
    pos_ += count;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void require(std::size_t count) const {
    if (data_.size() - pos_ < count) {
      throw CorruptFileError("unexpected end of data at byte " + std::to_string(pos_));
    }
  }

  std::span<const char> data_;
  std::size_t pos_ = 0;
};

}  // namespace saeuron::io
