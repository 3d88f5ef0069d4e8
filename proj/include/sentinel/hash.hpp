// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sentinel/tensor.hpp"

namespace sentinel {

// FNV-1a, used for frozen-weight checksums and bundle provenance.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(const std::vector<float>& v, uint64_t h = 0xcbf29ce484222325ULL) {
  return v.empty() ? h : fnv1a64(v.data(), v.size() * sizeof(float), h);
}

inline uint64_t tensor_checksum(const Tensor& t, uint64_t h = 0xcbf29ce484222325ULL) {
  h = fnv1a64(t.data, h);
  for (int64_t e : t.shape) h = fnv1a64(&e, sizeof(e), h);
  return h;
}

inline std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace sentinel
