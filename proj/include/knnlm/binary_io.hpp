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

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "knnlm/error.hpp"

namespace knnlm {

// Every on-disk format in this library is little-endian; arrays are copied
// verbatim, which is only correct on a little-endian host.
static_assert(std::endian::native == std::endian::little,
              "knnlm file formats require a little-endian host");

// Read-only view of a whole file. Large files are memory-mapped; the bytes
// stay valid for the lifetime of the object (shared between copies).
class FileBytes {
 public:
  FileBytes() = default;

  static FileBytes open(const std::string& path) {
    int fd = ::open(path.c_str(), O_RDONLY);
    if (fd < 0) throw Error("cannot open '" + path + "'");
    struct stat st {};
    if (::fstat(fd, &st) != 0) {
      ::close(fd);
      throw Error("cannot stat '" + path + "'");
    }
    FileBytes out;
    const auto size = static_cast<size_t>(st.st_size);
    if (size == 0) {
      ::close(fd);
      out.holder_ = std::make_shared<Holder>();
      return out;
    }
    void* addr = ::mmap(nullptr, size, PROT_READ, MAP_PRIVATE, fd, 0);
    ::close(fd);
    if (addr == MAP_FAILED) throw Error("cannot map '" + path + "'");
    ::madvise(addr, size, MADV_SEQUENTIAL);
    out.holder_ = std::make_shared<Holder>();
    out.holder_->mapped = static_cast<const std::byte*>(addr);
    out.holder_->size = size;
    return out;
  }

  static FileBytes from_buffer(std::vector<std::byte> bytes) {
    FileBytes out;
    out.holder_ = std::make_shared<Holder>();
    out.holder_->owned = std::move(bytes);
    out.holder_->size = out.holder_->owned.size();
    return out;
  }

  std::span<const std::byte> bytes() const {
    if (!holder_) return {};
    const std::byte* base = holder_->mapped ? holder_->mapped : holder_->owned.data();
    return {base, holder_->size};
  }

 private:
  struct Holder {
    const std::byte* mapped = nullptr;
    size_t size = 0;
    std::vector<std::byte> owned;
    Holder() = default;
    Holder(const Holder&) = delete;
    Holder& operator=(const Holder&) = delete;
    ~Holder() {
      if (mapped) ::munmap(const_cast<std::byte*>(mapped), size);
    }
  };
  std::shared_ptr<Holder> holder_;
};

// Sequential little-endian decoder with bounds checks. `what` names the file
// kind in error messages.
class ByteReader {
 public:
  ByteReader(std::span<const std::byte> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  void expect_magic(std::string_view magic) {
    require(magic.size(), "magic");
    if (std::memcmp(bytes_.data() + offset_, magic.data(), magic.size()) != 0) {
      throw Error(what_ + ": bad magic, expected '" + std::string(magic) + "'");
    }
    offset_ += magic.size();
  }

  template <typename T>
  T read(const char* field) {
    static_assert(std::is_trivially_copyable_v<T>);
    require(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + offset_, sizeof(T));
    offset_ += sizeof(T);
    return v;
  }

  template <typename T>
  std::vector<T> read_array(size_t count, const char* field) {
    static_assert(std::is_trivially_copyable_v<T>);
    if (count > remaining() / sizeof(T)) {
      throw Error(what_ + ": truncated while reading " + field);
    }
    std::vector<T> out(count);
    if (count > 0) std::memcpy(out.data(), bytes_.data() + offset_, count * sizeof(T));
    offset_ += count * sizeof(T);
    return out;
  }

  void skip(size_t n, const char* field) {
    require(n, field);
    offset_ += n;
  }

  std::span<const std::byte> take(size_t n, const char* field) {
    require(n, field);
    auto s = bytes_.subspan(offset_, n);
    offset_ += n;
    return s;
  }

  size_t offset() const { return offset_; }
  size_t remaining() const { return bytes_.size() - offset_; }

  void expect_end() const {
    if (offset_ != bytes_.size()) {
      throw Error(what_ + ": " + std::to_string(bytes_.size() - offset_) +
                  " trailing bytes");
    }
  }

 private:
  void require(size_t n, const char* field) const {
    if (bytes_.size() - offset_ < n) {
      throw Error(what_ + ": truncated while reading " + field);
    }
  }

  std::span<const std::byte> bytes_;
  std::string what_;
  size_t offset_ = 0;
};

// Little-endian encoder writing to a file.
class ByteWriter {
 public:
  explicit ByteWriter(const std::string& path)
      : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot create '" + path + "'");
  }

  void magic(std::string_view m) { raw(m.data(), m.size()); }

  template <typename T>
  void write(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    raw(&v, sizeof(T));
  }

  template <typename T>
  void write_array(std::span<const T> values) {
    raw(values.data(), values.size_bytes());
  }

  void zeros(size_t n) {
    static constexpr char kZero[256] = {};
    while (n > 0) {
      const size_t take = n < sizeof(kZero) ? n : sizeof(kZero);
      raw(kZero, take);
      n -= take;
    }
  }

  void raw(const void* data, size_t size) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    written_ += size;
  }

  uint64_t written() const { return written_; }

  void close() {
    out_.flush();
    if (!out_) throw Error("write failed for '" + path_ + "'");
    out_.close();
  }

 private:
  std::string path_;
  std::ofstream out_;
  uint64_t written_ = 0;
};

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

inline void write_text_file(const std::string& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot create '" + path + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

}  // namespace knnlm
