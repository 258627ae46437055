#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>

#include "bevfuse/error.hpp"

namespace bevfuse::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  template <typename V>
    requires std::is_arithmetic_v<V>
  void put(V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out_.append(buf, sizeof(V));
  }
  void put_bytes(std::string_view s) { out_.append(s); }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  template <typename V>
  void put_array(const V* data, std::size_t n) {
    out_.append(reinterpret_cast<const char*>(data), n * sizeof(V));
  }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

// Bounds-checked reader; every failure reports the byte offset.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename V>
    requires std::is_arithmetic_v<V>
  V get(const char* what) {
    need(sizeof(V), what);
    V v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  std::string_view get_bytes(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    return std::string(get_bytes(n, what));
  }
  template <typename V>
  void get_array(V* data, std::size_t n, const char* what) {
    if (n > 0 && n > (bytes_.size() - pos_) / sizeof(V)) need(n * sizeof(V), what);
    std::memcpy(data, bytes_.data() + pos_, n * sizeof(V));
    pos_ += n * sizeof(V);
  }
  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw IoError(std::string("truncated input while reading ") + what, static_cast<std::int64_t>(pos_));
    }
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace bevfuse::binio
