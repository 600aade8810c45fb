// Copyright 2026 The knnlm Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace knnlm {

inline constexpr uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr uint64_t hash_combine(uint64_t seed, uint64_t value) {
  return splitmix64(seed ^ (value + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2)));
}

inline constexpr uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Streaming 64-bit content hash over raw bytes. Consumes 8-byte words so
// hashing a few hundred MB of keys stays well under a second.
class ContentHasher {
 public:
  void update(const void* data, size_t size) {
    const auto* p = static_cast<const unsigned char*>(data);
    while (size > 0) {
      const size_t take = std::min<size_t>(size, 8 - fill_);
      std::memcpy(buffer_ + fill_, p, take);
      fill_ += take;
      p += take;
      size -= take;
      if (fill_ == 8) flush();
    }
  }
  template <typename T>
  void update_value(const T& v) {
    update(&v, sizeof(T));
  }
  template <typename T>
  void update_span(std::span<const T> s) {
    update(s.data(), s.size_bytes());
  }
  uint64_t digest() const {
    uint64_t word = 0;
    std::memcpy(&word, buffer_, fill_);
    return splitmix64(hash_combine(state_, word) ^ (count_ * 8 + fill_));
  }

 private:
  void flush() {
    uint64_t word;
    std::memcpy(&word, buffer_, 8);
    state_ = hash_combine(state_, word);
    ++count_;
    fill_ = 0;
  }
  uint64_t state_ = 0x6a09e667f3bcc908ULL;
  uint64_t count_ = 0;
  unsigned char buffer_[8] = {};
  size_t fill_ = 0;
};

}  // namespace knnlm
