#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <string_view>

namespace probelab {

/// Incremental 64-bit FNV-1a. Stable across platforms; used for content
/// digests of dataset files and checkpoints, not for security.
class Fnv1a64 {
 public:
  void update(std::string_view bytes) {
    for (char ch : bytes) {
      state_ ^= static_cast<unsigned char>(ch);
      state_ *= 0x100000001b3ULL;
    }
  }

  std::uint64_t value() const { return state_; }

  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(state_));
    return buf;
  }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string digest_hex(std::string_view bytes) {
  Fnv1a64 h;
  h.update(bytes);
  return h.hex();
}

}  // namespace probelab
