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

// Context encoders: a deterministic hashed-projection dense encoder, the
// TF-IDF bag-of-words encoder over trailing windows, and the binary vector
// file used to plug in externally computed representations.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"
#include "knnlm/hash.hpp"

namespace knnlm {

struct ContextVector {
  std::vector<float> values;
  uint64_t encoder_tag = 0;
  size_t dim() const { return values.size(); }
};

struct DenseEncoderConfig {
  uint32_t dim = 256;
  uint64_t seed = 0;
  double decay = 0.9;
  uint32_t window = 32;
};

inline constexpr uint32_t kMaxDim = 1u << 16;

// Tag identifying vectors produced by an external encoder of a given width.
inline uint64_t imported_encoder_tag(uint32_t dim) {
  return hash_combine(fnv1a64("import"), dim);
}

// Sum of exponentially decayed pseudorandom sign vectors of the last
// `window` context tokens, L2-normalized. Token t's vector has components
// +-1/sqrt(dim) drawn from a hash of (seed, t).
class DenseEncoder {
 public:
  explicit DenseEncoder(DenseEncoderConfig config = {}) : config_(config) {
    if (config_.dim == 0 || config_.dim > kMaxDim) {
      throw Error("dense encoder: dim " + std::to_string(config_.dim) + " out of range [1, " +
                  std::to_string(kMaxDim) + "]");
    }
    if (config_.window == 0) throw Error("dense encoder: window must be >= 1");
    if (!(config_.decay > 0.0) || !std::isfinite(config_.decay)) {
      throw Error("dense encoder: decay must be positive and finite");
    }
  }

  const DenseEncoderConfig& config() const { return config_; }
  uint32_t dim() const { return config_.dim; }

  uint64_t tag() const {
    uint64_t h = fnv1a64("dense");
    h = hash_combine(h, config_.dim);
    h = hash_combine(h, config_.seed);
    h = hash_combine(h, std::bit_cast<uint64_t>(config_.decay));
    return hash_combine(h, config_.window);
  }

  // Sign bits of token t's vector for components [64*block, 64*block + 64).
  uint64_t sign_bits(TokenId t, uint32_t block) const {
    return splitmix64(hash_combine(hash_combine(config_.seed, t), block));
  }

  std::vector<double> token_vector(TokenId t) const {
    std::vector<double> v(config_.dim);
    const double unit = 1.0 / std::sqrt(static_cast<double>(config_.dim));
    for (uint32_t i = 0; i < config_.dim; ++i) {
      const bool neg = (sign_bits(t, i / 64) >> (i % 64)) & 1ULL;
      v[i] = neg ? -unit : unit;
    }
    return v;
  }

  void encode_into(std::span<const TokenId> context, std::span<float> out) const {
    if (out.size() != config_.dim) throw Error("dense encoder: output size mismatch");
    if (context.size() > config_.window) context = context.last(config_.window);
    if (context.empty()) throw Error("dense encoder: empty context");
    std::vector<double> acc(config_.dim, 0.0);
    double weight = 1.0;
    for (size_t j = 0; j < context.size(); ++j) {
      const TokenId t = context[context.size() - 1 - j];
      for (uint32_t block = 0; block * 64 < config_.dim; ++block) {
        const uint64_t bits = sign_bits(t, block);
        const uint32_t end = std::min<uint32_t>(config_.dim, block * 64 + 64);
        for (uint32_t i = block * 64; i < end; ++i) {
          acc[i] += ((bits >> (i % 64)) & 1ULL) ? -weight : weight;
        }
      }
      weight *= config_.decay;
    }
    double norm2 = 0.0;
    for (double a : acc) norm2 += a * a;
    if (!(norm2 > 0.0)) throw Error("dense encoder: context projects to the zero vector");
    const double inv = 1.0 / std::sqrt(norm2);
    for (uint32_t i = 0; i < config_.dim; ++i) out[i] = static_cast<float>(acc[i] * inv);
  }

  ContextVector encode(std::span<const TokenId> context) const {
    ContextVector v;
    v.values.resize(config_.dim);
    v.encoder_tag = tag();
    encode_into(context, v.values);
    return v;
  }

 private:
  DenseEncoderConfig config_;
};

// ---------------------------------------------------------------------------
// TF-IDF

inline constexpr uint32_t kTfidfWindow = 32;

// idf(t) = ln((1 + N) / (1 + df(t))) + 1, where the "documents" are the
// consecutive non-overlapping `window`-token chunks of each training document.
struct IdfTable {
  uint32_t window = kTfidfWindow;
  uint64_t chunk_count = 0;
  std::vector<double> idf;

  double operator[](TokenId t) const {
    if (t >= idf.size()) throw Error("idf: token " + std::to_string(t) + " out of range");
    return idf[t];
  }
};

inline IdfTable build_idf(const TokenStream& stream, uint32_t window = kTfidfWindow) {
  if (window == 0) throw Error("build_idf: window must be >= 1");
  IdfTable table;
  table.window = window;
  std::vector<uint64_t> df(stream.vocab_size, 0);
  std::vector<uint64_t> last_seen(stream.vocab_size, UINT64_MAX);
  for (size_t d = 0; d < stream.doc_count(); ++d) {
    for (uint64_t b = stream.doc_begin(d); b < stream.doc_end(d); b += window) {
      const uint64_t e = std::min<uint64_t>(stream.doc_end(d), b + window);
      const uint64_t chunk = table.chunk_count++;
      for (uint64_t p = b; p < e; ++p) {
        const TokenId t = stream.tokens[p];
        if (last_seen[t] != chunk) {
          last_seen[t] = chunk;
          ++df[t];
        }
      }
    }
  }
  table.idf.resize(stream.vocab_size);
  const double n = static_cast<double>(table.chunk_count);
  for (size_t t = 0; t < df.size(); ++t) {
    table.idf[t] = std::log((1.0 + n) / (1.0 + static_cast<double>(df[t]))) + 1.0;
  }
  return table;
}

// Sparse, L2-normalized, non-negative weights sorted by token id.
struct TfidfVector {
  std::vector<std::pair<TokenId, double>> entries;
  bool empty() const { return entries.empty(); }
};

inline TfidfVector encode_tfidf(std::span<const TokenId> window, const IdfTable& idf) {
  if (window.size() > idf.window) window = window.last(idf.window);
  std::vector<TokenId> sorted(window.begin(), window.end());
  std::sort(sorted.begin(), sorted.end());
  TfidfVector v;
  double norm2 = 0.0;
  for (size_t i = 0; i < sorted.size();) {
    size_t j = i;
    while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
    const double w = static_cast<double>(j - i) * idf[sorted[i]];
    v.entries.emplace_back(sorted[i], w);
    norm2 += w * w;
    i = j;
  }
  if (norm2 > 0.0) {
    const double inv = 1.0 / std::sqrt(norm2);
    for (auto& e : v.entries) e.second *= inv;
  }
  return v;
}

// Cosine similarity of two normalized TF-IDF vectors; 0 if either is empty.
inline double cosine_similarity(const TfidfVector& a, const TfidfVector& b) {
  double dot = 0.0;
  size_t i = 0, j = 0;
  while (i < a.entries.size() && j < b.entries.size()) {
    if (a.entries[i].first < b.entries[j].first) {
      ++i;
    } else if (a.entries[i].first > b.entries[j].first) {
      ++j;
    } else {
      dot += a.entries[i].second * b.entries[j].second;
      ++i;
      ++j;
    }
  }
  return std::clamp(dot, 0.0, 1.0);
}

// The up-to-`window` tokens preceding global position `pos` inside its
// document (fewer near the document start).
inline std::span<const TokenId> trailing_window(const TokenStream& s, uint64_t pos,
                                                uint32_t window = kTfidfWindow) {
  const uint64_t begin = s.doc_begin(s.doc_of(pos));
  const uint64_t start = pos - begin > window ? pos - window : begin;
  return std::span<const TokenId>(s.tokens).subspan(start, pos - start);
}

// ---------------------------------------------------------------------------
// Vector file: "KLMVECS1", u32 dim, u64 count, count*dim f32 row-major.

inline constexpr std::string_view kVectorMagic = "KLMVECS1";

struct VectorMatrix {
  uint32_t dim = 0;
  uint64_t count = 0;
  std::vector<float> data;

  std::span<const float> row(uint64_t i) const {
    return std::span<const float>(data).subspan(i * dim, dim);
  }
};

inline void write_vectors(const std::string& path, uint32_t dim, std::span<const float> data) {
  if (dim == 0 || data.size() % dim != 0) throw Error("write_vectors: data not a multiple of dim");
  ByteWriter w(path);
  w.magic(kVectorMagic);
  w.write<uint32_t>(dim);
  w.write<uint64_t>(data.size() / dim);
  w.write_array<float>(data);
  w.close();
}

inline VectorMatrix parse_vectors(std::span<const std::byte> bytes, uint32_t expected_dim) {
  ByteReader r(bytes, "vector file");
  r.expect_magic(kVectorMagic);
  VectorMatrix m;
  m.dim = r.read<uint32_t>("dim");
  m.count = r.read<uint64_t>("count");
  if (m.dim != expected_dim) {
    throw Error("vector file: dim mismatch, header " + std::to_string(m.dim) + ", expected " +
                std::to_string(expected_dim));
  }
  if (m.dim == 0 || m.dim > kMaxDim) throw Error("vector file: dim out of range");
  if (m.count > r.remaining() / (sizeof(float) * m.dim)) {
    const uint64_t complete = r.remaining() / (sizeof(float) * m.dim);
    throw Error("vector file: truncated at record " + std::to_string(complete));
  }
  m.data = r.read_array<float>(m.count * m.dim, "vectors");
  r.expect_end();
  for (uint64_t i = 0; i < m.count; ++i) {
    for (float x : m.row(i)) {
      if (!std::isfinite(x)) {
        throw Error("vector file: non-finite value in record " + std::to_string(i));
      }
    }
  }
  return m;
}

inline VectorMatrix import_vectors(const std::string& path, uint32_t expected_dim) {
  return parse_vectors(FileBytes::open(path).bytes(), expected_dim);
}

}  // namespace knnlm
