#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace ipa {

// Little-endian float32 packing used by feature files and checkpoints.
inline void append_f32_le(std::string& out, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  out.push_back(static_cast<char>(u & 0xFF));
  out.push_back(static_cast<char>((u >> 8) & 0xFF));
  out.push_back(static_cast<char>((u >> 16) & 0xFF));
  out.push_back(static_cast<char>((u >> 24) & 0xFF));
}

inline float read_f32_le(const char* p) {
  uint32_t u = (static_cast<uint32_t>(static_cast<unsigned char>(p[0]))) |
               (static_cast<uint32_t>(static_cast<unsigned char>(p[1])) << 8) |
               (static_cast<uint32_t>(static_cast<unsigned char>(p[2])) << 16) |
               (static_cast<uint32_t>(static_cast<unsigned char>(p[3])) << 24);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

inline void append_u64_le(std::string& out, uint64_t u) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline uint64_t read_u64_le(const char* p) {
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i)
    u |= static_cast<uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return u;
}

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace ipa
