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

// Key-value datastore over context vectors with exact brute-force
// Euclidean top-k search.
//
// Distances are defined as sqrt of the dimension-ordered f64 accumulation
//   acc = fma(k_d - q_d, k_d - q_d, acc)
// with keys and queries widened from f32. Every kernel below produces the
// same bits as that scalar loop; ties order by ascending store index.

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/encoder.hpp"
#include "knnlm/error.hpp"
#include "knnlm/hash.hpp"
#include "knnlm/ngram_filter.hpp"
#include "knnlm/parallel.hpp"

namespace knnlm {

struct Datastore {
  uint32_t dim = 0;
  uint64_t encoder_tag = 0;
  std::vector<float> keys;  // size() x dim, row-major
  std::vector<TokenId> values;
  std::vector<uint64_t> positions;  // global index of the value token

  size_t size() const { return values.size(); }
  std::span<const float> key(size_t i) const {
    return std::span<const float>(keys).subspan(i * dim, dim);
  }

  uint64_t content_hash() const {
    ContentHasher h;
    h.update_value(dim);
    h.update_value(encoder_tag);
    const uint64_t n = size();
    h.update_value(n);
    h.update_span<float>(keys);
    h.update_span<TokenId>(values);
    h.update_span<uint64_t>(positions);
    return h.digest();
  }

  bool operator==(const Datastore&) const = default;
};

namespace detail {

// Value positions of every datastore candidate: each token after the first
// of its document, minus masked positions.
inline std::vector<uint64_t> datastore_positions(const TokenStream& stream,
                                                 const PositionMask* mask) {
  if (mask && mask->corpus_len() != stream.size()) {
    throw Error("datastore build: mask covers " + std::to_string(mask->corpus_len()) +
                " positions, corpus has " + std::to_string(stream.size()));
  }
  std::vector<uint64_t> out;
  out.reserve(stream.predicted_count());
  for (size_t d = 0; d < stream.doc_count(); ++d) {
    for (uint64_t p = stream.doc_begin(d) + 1; p < stream.doc_end(d); ++p) {
      if (!mask || !mask->excluded(p)) out.push_back(p);
    }
  }
  return out;
}

inline void check_capacity(size_t count, uint32_t dim) {
  if (dim == 0 || dim > kMaxDim) throw Error("datastore: dim " + std::to_string(dim) + " out of range");
  if (count > std::numeric_limits<size_t>::max() / dim / sizeof(float)) {
    throw Error("datastore: count * dim overflows");
  }
}

}  // namespace detail

// One entry per predicted token: key = encoding of the preceding in-document
// context, value = the token, position = its global index. Tokens excluded
// by `mask` are skipped.
inline Datastore build_datastore(const TokenStream& stream, const DenseEncoder& encoder,
                                 const PositionMask* mask = nullptr, size_t threads = 1) {
  stream.validate();
  Datastore ds;
  ds.dim = encoder.dim();
  ds.encoder_tag = encoder.tag();
  ds.positions = detail::datastore_positions(stream, mask);
  if (ds.positions.empty()) throw Error("datastore build: no entries (masked to empty?)");
  detail::check_capacity(ds.positions.size(), ds.dim);
  ds.values.resize(ds.positions.size());
  ds.keys.resize(ds.positions.size() * ds.dim);
  parallel_chunks(ds.positions.size(), 1024, threads, [&](size_t b, size_t e) {
    for (size_t i = b; i < e; ++i) {
      const uint64_t p = ds.positions[i];
      const uint64_t doc_start = stream.doc_begin(stream.doc_of(p));
      auto ctx = std::span<const TokenId>(stream.tokens).subspan(doc_start, p - doc_start);
      encoder.encode_into(ctx, std::span<float>(ds.keys).subspan(i * ds.dim, ds.dim));
      ds.values[i] = stream.tokens[p];
    }
  });
  return ds;
}

// Same, with keys taken from externally computed vectors: one row per
// predicted token of `stream` in order, before masking.
inline Datastore build_datastore(const TokenStream& stream, const VectorMatrix& vectors,
                                 const PositionMask* mask = nullptr) {
  stream.validate();
  const uint64_t expected = stream.predicted_count();
  if (vectors.count != expected) {
    throw Error("datastore build: vector file has " + std::to_string(vectors.count) +
                " rows, corpus has " + std::to_string(expected) + " predicted tokens");
  }
  if (mask && mask->corpus_len() != stream.size()) {
    throw Error("datastore build: mask length does not match corpus");
  }
  Datastore ds;
  ds.dim = vectors.dim;
  ds.encoder_tag = imported_encoder_tag(vectors.dim);
  const auto all = detail::datastore_positions(stream, nullptr);
  detail::check_capacity(all.size(), ds.dim);
  for (size_t row = 0; row < all.size(); ++row) {
    const uint64_t p = all[row];
    if (mask && mask->excluded(p)) continue;
    auto key = vectors.row(row);
    ds.keys.insert(ds.keys.end(), key.begin(), key.end());
    ds.values.push_back(stream.tokens[p]);
    ds.positions.push_back(p);
  }
  if (ds.values.empty()) throw Error("datastore build: no entries (masked to empty?)");
  return ds;
}

struct NeighborSet {
  std::vector<double> distances;  // ascending
  std::vector<TokenId> values;
  std::vector<uint64_t> positions;
  std::vector<uint64_t> indices;  // store row of each neighbor
  size_t k_requested = 0;

  size_t size() const { return distances.size(); }
  bool empty() const { return distances.empty(); }
};

namespace detail {

inline constexpr size_t kQueryBlock = 16;
inline constexpr size_t kKeyBlock = 4;

// out[i * kQueryBlock + j] = squared distance of key (first + i) to query j,
// for i in [0, count). qT holds the block's queries transposed, dim x 16.
inline void squared_distances(const float* keys, size_t first, size_t count, uint32_t dim,
                              const double* qT, double* out) {
  size_t i = 0;
#if defined(__AVX512F__)
  for (; i + kKeyBlock <= count; i += kKeyBlock) {
    const float* k0 = keys + (first + i) * dim;
    const float* k1 = k0 + dim;
    const float* k2 = k1 + dim;
    const float* k3 = k2 + dim;
    __m512d a00 = _mm512_setzero_pd(), a01 = a00, a10 = a00, a11 = a00;
    __m512d a20 = a00, a21 = a00, a30 = a00, a31 = a00;
    for (uint32_t d = 0; d < dim; ++d) {
      const __m512d q0 = _mm512_loadu_pd(qT + d * kQueryBlock);
      const __m512d q1 = _mm512_loadu_pd(qT + d * kQueryBlock + 8);
      __m512d b = _mm512_set1_pd(static_cast<double>(k0[d]));
      __m512d t = _mm512_sub_pd(b, q0);
      a00 = _mm512_fmadd_pd(t, t, a00);
      t = _mm512_sub_pd(b, q1);
      a01 = _mm512_fmadd_pd(t, t, a01);
      b = _mm512_set1_pd(static_cast<double>(k1[d]));
      t = _mm512_sub_pd(b, q0);
      a10 = _mm512_fmadd_pd(t, t, a10);
      t = _mm512_sub_pd(b, q1);
      a11 = _mm512_fmadd_pd(t, t, a11);
      b = _mm512_set1_pd(static_cast<double>(k2[d]));
      t = _mm512_sub_pd(b, q0);
      a20 = _mm512_fmadd_pd(t, t, a20);
      t = _mm512_sub_pd(b, q1);
      a21 = _mm512_fmadd_pd(t, t, a21);
      b = _mm512_set1_pd(static_cast<double>(k3[d]));
      t = _mm512_sub_pd(b, q0);
      a30 = _mm512_fmadd_pd(t, t, a30);
      t = _mm512_sub_pd(b, q1);
      a31 = _mm512_fmadd_pd(t, t, a31);
    }
    double* o = out + i * kQueryBlock;
    _mm512_storeu_pd(o, a00);
    _mm512_storeu_pd(o + 8, a01);
    _mm512_storeu_pd(o + 16, a10);
    _mm512_storeu_pd(o + 24, a11);
    _mm512_storeu_pd(o + 32, a20);
    _mm512_storeu_pd(o + 40, a21);
    _mm512_storeu_pd(o + 48, a30);
    _mm512_storeu_pd(o + 56, a31);
  }
#endif
  for (; i < count; ++i) {
    const float* k = keys + (first + i) * dim;
    double acc[kQueryBlock] = {};
    for (uint32_t d = 0; d < dim; ++d) {
      const double kd = static_cast<double>(k[d]);
      for (size_t j = 0; j < kQueryBlock; ++j) {
        const double diff = kd - qT[d * kQueryBlock + j];
        acc[j] = std::fma(diff, diff, acc[j]);
      }
    }
    std::copy(acc, acc + kQueryBlock, out + i * kQueryBlock);
  }
}

// Bounded max-heap keeping the k smallest (distance, index) pairs.
class TopK {
 public:
  explicit TopK(size_t k) : k_(k) { heap_.reserve(k + 1); }

  // Keys must be offered in ascending index order: an offer whose squared
  // distance exceeds the current worst cannot win, even on a sqrt tie,
  // because its index is larger.
  void offer(double sq, uint64_t index) {
    if (heap_.size() == k_ && sq > heap_.front().sq) return;
    const Entry e{std::sqrt(sq), index, sq};
    if (heap_.size() < k_) {
      heap_.push_back(e);
      std::push_heap(heap_.begin(), heap_.end());
    } else if (e < heap_.front()) {
      std::pop_heap(heap_.begin(), heap_.end());
      heap_.back() = e;
      std::push_heap(heap_.begin(), heap_.end());
    }
  }

  void finish(const Datastore& store, NeighborSet& out) {
    std::sort(heap_.begin(), heap_.end());
    out.k_requested = k_;
    out.distances.resize(heap_.size());
    out.values.resize(heap_.size());
    out.positions.resize(heap_.size());
    out.indices.resize(heap_.size());
    for (size_t r = 0; r < heap_.size(); ++r) {
      out.distances[r] = heap_[r].dist;
      out.indices[r] = heap_[r].index;
      out.values[r] = store.values[heap_[r].index];
      out.positions[r] = store.positions[heap_[r].index];
    }
  }

 private:
  struct Entry {
    double dist;
    uint64_t index;
    double sq;
    bool operator<(const Entry& o) const {
      return dist != o.dist ? dist < o.dist : index < o.index;
    }
  };
  size_t k_;
  std::vector<Entry> heap_;
};

inline void search_block(const Datastore& store, std::span<const float> queries, size_t first,
                         size_t count, size_t k, NeighborSet* out) {
  const uint32_t dim = store.dim;
  std::vector<double> qT(static_cast<size_t>(dim) * kQueryBlock, 0.0);
  for (size_t j = 0; j < count; ++j) {
    for (uint32_t d = 0; d < dim; ++d) {
      qT[d * kQueryBlock + j] = static_cast<double>(queries[(first + j) * dim + d]);
    }
  }
  std::vector<TopK> heaps;
  heaps.reserve(count);
  for (size_t j = 0; j < count; ++j) heaps.emplace_back(k);

  constexpr size_t kTile = 256;
  std::vector<double> sq(kTile * kQueryBlock);
  for (size_t base = 0; base < store.size(); base += kTile) {
    const size_t n = std::min(kTile, store.size() - base);
    squared_distances(store.keys.data(), base, n, dim, qT.data(), sq.data());
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < count; ++j) heaps[j].offer(sq[i * kQueryBlock + j], base + i);
    }
  }
  for (size_t j = 0; j < count; ++j) heaps[j].finish(store, out[j]);
}

}  // namespace detail

// Exact top-k for `queries` (row-major, n x store.dim). Results are
// independent of the thread count.
inline std::vector<NeighborSet> search_batch(const Datastore& store, std::span<const float> queries,
                                             size_t k, size_t threads = 1) {
  if (store.size() == 0) throw Error("search: empty datastore");
  if (k < 1) throw Error("search: k must be >= 1");
  if (queries.size() % store.dim != 0) throw Error("search: query dim mismatch");
  const size_t n = queries.size() / store.dim;
  const size_t kk = std::min(k, store.size());
  std::vector<NeighborSet> out(n);
  parallel_chunks(n, detail::kQueryBlock, threads, [&](size_t b, size_t e) {
    detail::search_block(store, queries, b, e - b, kk, out.data() + b);
    for (size_t i = b; i < e; ++i) out[i].k_requested = k;
  });
  return out;
}

inline NeighborSet search(const Datastore& store, std::span<const float> query, size_t k) {
  if (query.size() != store.dim) {
    throw Error("search: query dim " + std::to_string(query.size()) + " != store dim " +
                std::to_string(store.dim));
  }
  return std::move(search_batch(store, query, k).front());
}

inline NeighborSet search(const Datastore& store, const ContextVector& query, size_t k) {
  return search(store, std::span<const float>(query.values), k);
}

// ---------------------------------------------------------------------------
// File: "KNNDSTR1", u32 dim, u64 count, u64 encoder tag, zero padding to
// 4096 bytes, keys f32 row-major, values u32, positions u64.

inline constexpr std::string_view kDatastoreMagic = "KNNDSTR1";
inline constexpr size_t kDatastoreKeyOffset = 4096;

inline void write_datastore(const std::string& path, const Datastore& ds) {
  ByteWriter w(path);
  w.magic(kDatastoreMagic);
  w.write<uint32_t>(ds.dim);
  w.write<uint64_t>(ds.size());
  w.write<uint64_t>(ds.encoder_tag);
  w.zeros(kDatastoreKeyOffset - w.written());
  w.write_array<float>(ds.keys);
  w.write_array<TokenId>(ds.values);
  w.write_array<uint64_t>(ds.positions);
  w.close();
}

inline Datastore parse_datastore(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "datastore");
  r.expect_magic(kDatastoreMagic);
  Datastore ds;
  ds.dim = r.read<uint32_t>("dim");
  const auto count = r.read<uint64_t>("count");
  ds.encoder_tag = r.read<uint64_t>("encoder tag");
  if (ds.dim == 0 || ds.dim > kMaxDim) throw Error("datastore: dim out of range");
  r.skip(kDatastoreKeyOffset - r.offset(), "header padding");
  if (count > r.remaining() / (static_cast<uint64_t>(ds.dim) * sizeof(float))) {
    throw Error("datastore: truncated while reading keys");
  }
  ds.keys = r.read_array<float>(count * ds.dim, "keys");
  ds.values = r.read_array<TokenId>(count, "values");
  ds.positions = r.read_array<uint64_t>(count, "positions");
  r.expect_end();
  return ds;
}

inline Datastore read_datastore(const std::string& path) {
  return parse_datastore(FileBytes::open(path).bytes());
}

}  // namespace knnlm
