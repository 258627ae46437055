#pragma once

#include <cstdint>
#include <string_view>

namespace bevfuse {

inline constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ULL;

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace bevfuse
