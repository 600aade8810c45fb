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

// Persistent per-token retrieval results. Everything downstream of
// retrieval (coefficient tuning, rescoring, analysis) reads this cache and
// never touches the datastore again.
//
// File: "KLMCACH1", u32 vocab size, u16 k, u64 count, u64 encoder tag,
// u64 datastore content hash, then `count` fixed-width records:
//   u64 token_index, u32 gold_id, f64 base_logprob, u16 k,
//   k x f32 distance, k x u32 value, k x u64 position
// where k is the header k; a record retrieving fewer neighbors stores its
// own count in the record's k field and zero-fills the rest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnlm/adaptive.hpp"
#include "knnlm/base_lm.hpp"
#include "knnlm/binary_io.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/encoder.hpp"
#include "knnlm/error.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/scorer.hpp"

namespace knnlm {

inline constexpr std::string_view kCacheMagic = "KLMCACH1";
inline constexpr size_t kCacheHeaderSize = 8 + 4 + 2 + 8 + 8 + 8;

struct EvalCacheHeader {
  uint32_t vocab_size = 0;
  uint16_t k = 0;
  uint64_t count = 0;
  uint64_t encoder_tag = 0;
  uint64_t datastore_hash = 0;

  size_t record_size() const { return 8 + 4 + 8 + 2 + static_cast<size_t>(k) * (4 + 4 + 8); }
  bool operator==(const EvalCacheHeader&) const = default;
};

struct EvalRecord {
  uint64_t token_index = 0;
  TokenId gold_id = 0;
  double base_logprob = 0.0;
  std::vector<float> distances;
  std::vector<TokenId> values;
  std::vector<uint64_t> positions;

  size_t k() const { return distances.size(); }
  bool operator==(const EvalRecord&) const = default;
};

// Zero-copy accessor for one packed record.
class RecordView {
 public:
  RecordView(const std::byte* p, uint16_t capacity) : p_(p), capacity_(capacity) {}

  uint64_t token_index() const { return load<uint64_t>(0); }
  TokenId gold_id() const { return load<TokenId>(8); }
  double base_logprob() const { return load<double>(12); }
  uint16_t k() const { return load<uint16_t>(20); }
  float distance(size_t r) const { return load<float>(22 + 4 * r); }
  TokenId value(size_t r) const { return load<TokenId>(22 + 4 * size_t{capacity_} + 4 * r); }
  uint64_t position(size_t r) const { return load<uint64_t>(22 + 8 * size_t{capacity_} + 8 * r); }

  void copy_distances(size_t n, float* out) const { std::memcpy(out, p_ + 22, 4 * n); }
  void copy_values(size_t n, TokenId* out) const {
    std::memcpy(out, p_ + 22 + 4 * size_t{capacity_}, 4 * n);
  }

  EvalRecord materialize() const {
    EvalRecord r;
    r.token_index = token_index();
    r.gold_id = gold_id();
    r.base_logprob = base_logprob();
    const size_t n = k();
    r.distances.resize(n);
    r.values.resize(n);
    r.positions.resize(n);
    for (size_t i = 0; i < n; ++i) {
      r.distances[i] = distance(i);
      r.values[i] = value(i);
      r.positions[i] = position(i);
    }
    return r;
  }

 private:
  template <typename T>
  T load(size_t offset) const {
    T v;
    std::memcpy(&v, p_ + offset, sizeof(T));
    return v;
  }
  const std::byte* p_;
  uint16_t capacity_;
};

class EvalCache {
 public:
  static EvalCache open(const std::string& path) { return from_bytes(FileBytes::open(path)); }

  static EvalCache from_bytes(FileBytes bytes) {
    EvalCache c;
    c.bytes_ = std::move(bytes);
    ByteReader r(c.bytes_.bytes(), "eval cache");
    r.expect_magic(kCacheMagic);
    c.header_.vocab_size = r.read<uint32_t>("vocab size");
    c.header_.k = r.read<uint16_t>("k");
    c.header_.count = r.read<uint64_t>("count");
    c.header_.encoder_tag = r.read<uint64_t>("encoder tag");
    c.header_.datastore_hash = r.read<uint64_t>("datastore hash");
    const size_t rs = c.header_.record_size();
    if (c.header_.count > r.remaining() / rs) {
      throw Error("eval cache: truncated, header declares " + std::to_string(c.header_.count) +
                  " records but file holds " + std::to_string(r.remaining() / rs));
    }
    r.skip(c.header_.count * rs, "records");
    r.expect_end();
    return c;
  }

  const EvalCacheHeader& header() const { return header_; }
  size_t size() const { return header_.count; }
  uint16_t k() const { return header_.k; }

  RecordView record(size_t i) const {
    return RecordView(bytes_.bytes().data() + kCacheHeaderSize + i * header_.record_size(),
                      header_.k);
  }

  // Throws on the first record that breaks an invariant.
  void validate_record(size_t i) const {
    const RecordView r = record(i);
    auto fail = [i](const std::string& why) {
      throw Error("eval cache: record " + std::to_string(i) + ": " + why);
    };
    if (r.token_index() != i) fail("token_index not contiguous");
    if (r.gold_id() >= header_.vocab_size) fail("gold id out of range");
    if (!(r.base_logprob() <= 0.0)) fail("base log-prob > 0");
    if (r.k() < 1 || r.k() > header_.k) fail("neighbor count out of range");
    for (size_t j = 0; j < r.k(); ++j) {
      const float d = r.distance(j);
      if (!std::isfinite(d) || d < 0.0f) fail("invalid distance");
      if (j > 0 && d < r.distance(j - 1)) fail("distances not ascending");
    }
  }

  void validate() const {
    for (size_t i = 0; i < size(); ++i) validate_record(i);
  }

 private:
  EvalCacheHeader header_;
  FileBytes bytes_;
};

// Appends fixed-width records either to a file or to memory.
class EvalCacheWriter {
 public:
  // Writes to `path`; an empty path keeps the bytes in memory (see take()).
  EvalCacheWriter(EvalCacheHeader header, const std::string& path = {}) : header_(header) {
    if (header_.k < 1) throw Error("eval cache: k must be >= 1");
    if (!path.empty()) file_ = std::make_unique<ByteWriter>(path);
    scratch_.magic(kCacheMagic);
    scratch_.put(header_.vocab_size);
    scratch_.put(header_.k);
    scratch_.put(header_.count);
    scratch_.put(header_.encoder_tag);
    scratch_.put(header_.datastore_hash);
    flush_scratch();
  }

  void add(uint64_t token_index, TokenId gold, double base_logprob,
           std::span<const float> distances, std::span<const TokenId> values,
           std::span<const uint64_t> positions) {
    const size_t n = distances.size();
    if (n < 1 || n > header_.k || values.size() != n || positions.size() != n) {
      throw Error("eval cache: record " + std::to_string(token_index) +
                  " has an invalid neighbor list");
    }
    if (token_index != written_) {
      throw Error("eval cache: record " + std::to_string(token_index) + " out of order");
    }
    if (gold >= header_.vocab_size) {
      throw Error("eval cache: record " + std::to_string(token_index) + " gold id out of range");
    }
    if (!(base_logprob <= 0.0)) {
      throw Error("eval cache: record " + std::to_string(token_index) + " base log-prob > 0");
    }
    const size_t pad = header_.k - n;
    scratch_.put(token_index);
    scratch_.put(gold);
    scratch_.put(base_logprob);
    scratch_.put(static_cast<uint16_t>(n));
    scratch_.put_array(distances, pad);
    scratch_.put_array(values, pad);
    scratch_.put_array(positions, pad);
    ++written_;
    if (scratch_.bytes.size() >= (1u << 22)) flush_scratch();
  }

  void add(const EvalRecord& r) {
    add(r.token_index, r.gold_id, r.base_logprob, r.distances, r.values, r.positions);
  }

  // Finishes a file-backed cache.
  void close() {
    check_count();
    flush_scratch();
    if (!file_) throw Error("eval cache: close() on an in-memory writer; use take()");
    file_->close();
  }

  // Finishes an in-memory cache.
  EvalCache take() {
    check_count();
    if (file_) throw Error("eval cache: take() on a file writer");
    flush_scratch();
    return EvalCache::from_bytes(FileBytes::from_buffer(std::move(memory_)));
  }

 private:
  struct Scratch {
    std::vector<std::byte> bytes;
    void raw(const void* p, size_t n) {
      const auto* b = static_cast<const std::byte*>(p);
      bytes.insert(bytes.end(), b, b + n);
    }
    void magic(std::string_view m) { raw(m.data(), m.size()); }
    template <typename T>
    void put(const T& v) {
      raw(&v, sizeof(T));
    }
    template <typename T>
    void put_array(std::span<const T> v, size_t pad) {
      raw(v.data(), v.size_bytes());
      bytes.insert(bytes.end(), pad * sizeof(T), std::byte{0});
    }
  };

  void check_count() const {
    if (written_ != header_.count) {
      throw Error("eval cache: wrote " + std::to_string(written_) + " records, header declares " +
                  std::to_string(header_.count));
    }
  }

  void flush_scratch() {
    if (file_) {
      file_->raw(scratch_.bytes.data(), scratch_.bytes.size());
    } else {
      memory_.insert(memory_.end(), scratch_.bytes.begin(), scratch_.bytes.end());
    }
    scratch_.bytes.clear();
  }

  EvalCacheHeader header_;
  std::unique_ptr<ByteWriter> file_;
  std::vector<std::byte> memory_;
  Scratch scratch_;
  uint64_t written_ = 0;
};

// Source of query vectors for cache construction.
struct QueryEncoder {
  const DenseEncoder* dense = nullptr;     // encode the trailing context, or
  const VectorMatrix* imported = nullptr;  // take row i for predicted token i

  uint64_t tag() const {
    if (dense) return dense->tag();
    if (imported) return imported_encoder_tag(imported->dim);
    throw Error("query encoder: none configured");
  }
};

struct CacheBuildOptions {
  size_t k = 1024;
  size_t threads = 1;
  std::string emit_queries_path;  // optional KLMVECS1 dump of query vectors
};

// One record per predicted eval token: the query from its in-document
// context, its exact top-k neighbors, and the base log-prob of the gold.
inline EvalCache build_cache(const TokenStream& eval, const Datastore& store,
                             std::span<const double> base_logprobs, const QueryEncoder& encoder,
                             const CacheBuildOptions& options, const std::string& path = {}) {
  eval.validate();
  if (options.k < 1 || options.k > std::numeric_limits<uint16_t>::max()) {
    throw Error("cache build: k must be in [1, 65535]");
  }
  if (encoder.tag() != store.encoder_tag) {
    throw Error("cache build: query encoder tag does not match the datastore's encoder tag");
  }
  const auto positions = eval.predicted_positions();
  if (base_logprobs.size() != positions.size()) {
    throw Error("cache build: " + std::to_string(base_logprobs.size()) + " base log-probs for " +
                std::to_string(positions.size()) + " predicted tokens");
  }
  if (encoder.imported && encoder.imported->count != positions.size()) {
    throw Error("cache build: query vector count does not match predicted tokens");
  }
  const uint32_t dim = store.dim;
  if (encoder.dense && encoder.dense->dim() != dim) throw Error("cache build: dim mismatch");

  EvalCacheHeader header;
  header.vocab_size = eval.vocab_size;
  header.k = static_cast<uint16_t>(options.k);
  header.count = positions.size();
  header.encoder_tag = store.encoder_tag;
  header.datastore_hash = store.content_hash();
  EvalCacheWriter writer(header, path);

  std::unique_ptr<ByteWriter> emit;
  if (!options.emit_queries_path.empty()) {
    emit = std::make_unique<ByteWriter>(options.emit_queries_path);
    emit->magic(kVectorMagic);
    emit->write<uint32_t>(dim);
    emit->write<uint64_t>(positions.size());
  }

  constexpr size_t kBatch = 2048;
  std::vector<float> queries;
  std::vector<float> dist32;
  for (size_t b = 0; b < positions.size(); b += kBatch) {
    const size_t e = std::min(positions.size(), b + kBatch);
    queries.assign((e - b) * dim, 0.0f);
    if (encoder.dense) {
      parallel_chunks(e - b, 64, options.threads, [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
          const uint64_t p = positions[b + i];
          const uint64_t start = eval.doc_begin(eval.doc_of(p));
          encoder.dense->encode_into(
              std::span<const TokenId>(eval.tokens).subspan(start, p - start),
              std::span<float>(queries).subspan(i * dim, dim));
        }
      });
    } else {
      std::copy_n(encoder.imported->data.begin() + b * dim, (e - b) * dim, queries.begin());
    }
    if (emit) emit->write_array<float>(queries);
    const auto nbrs = search_batch(store, queries, options.k, options.threads);
    for (size_t i = 0; i < nbrs.size(); ++i) {
      const auto& nb = nbrs[i];
      dist32.resize(nb.size());
      for (size_t r = 0; r < nb.size(); ++r) dist32[r] = static_cast<float>(nb.distances[r]);
      // Ascending doubles stay ascending after rounding to f32.
      writer.add(b + i, eval.tokens[positions[b + i]], base_logprobs[b + i], dist32, nb.values,
                 nb.positions);
    }
  }
  if (emit) emit->close();
  if (path.empty()) return writer.take();
  writer.close();
  return EvalCache::open(path);
}

// Streams needed for TF-IDF similarity: the query window comes from the
// eval stream, the neighbor's window from the training stream at the
// neighbor's stored position.
struct TfidfContext {
  const TokenStream* train = nullptr;
  const TokenStream* eval = nullptr;
  IdfTable idf;
  std::vector<uint64_t> eval_positions;

  static TfidfContext make(const TokenStream& train, const TokenStream& eval) {
    if (train.vocab_size != eval.vocab_size) throw Error("tfidf: vocab mismatch");
    TfidfContext c;
    c.train = &train;
    c.eval = &eval;
    c.idf = build_idf(train);
    c.eval_positions = eval.predicted_positions();
    return c;
  }
};

// Reduces the cache to per-token scoring inputs using the first `k`
// neighbors of each record (k = 0 keeps all). TF-IDF similarity needs
// `tfidf`; dense similarity is the negated rank-1 distance.
inline ScoringInputs scoring_inputs(const EvalCache& cache, SimilarityKind kind, size_t k = 0,
                                    const TfidfContext* tfidf = nullptr, size_t threads = 1) {
  if (k > cache.k()) {
    throw Error("requested k=" + std::to_string(k) + " exceeds cached k=" +
                std::to_string(cache.k()));
  }
  if (k == 0) k = cache.k();
  if (kind == SimilarityKind::kTfidf) {
    if (!tfidf || !tfidf->train || !tfidf->eval) {
      throw Error("tfidf similarity requires the training and eval token streams");
    }
    if (tfidf->eval_positions.size() != cache.size()) {
      throw Error("tfidf: eval stream does not match the cache record count");
    }
  }
  ScoringInputs in;
  in.kind = kind;
  const size_t n = cache.size();
  in.similarity.resize(n);
  in.knn_prob.resize(n);
  in.base_logprob.resize(n);
  parallel_chunks(n, 4096, threads, [&](size_t b, size_t e) {
    std::vector<float> dist(cache.k());
    std::vector<TokenId> vals(cache.k());
    for (size_t i = b; i < e; ++i) {
      cache.validate_record(i);
      const RecordView r = cache.record(i);
      const size_t kk = std::min<size_t>(k, r.k());
      r.copy_distances(kk, dist.data());
      r.copy_values(kk, vals.data());
      in.knn_prob[i] = knn_prob<float>(std::span<const float>(dist.data(), kk),
                                       std::span<const TokenId>(vals.data(), kk), r.gold_id());
      in.base_logprob[i] = r.base_logprob();
      if (kind == SimilarityKind::kDense) {
        in.similarity[i] = dense_similarity(static_cast<double>(dist[0]));
      } else {
        const uint64_t qpos = tfidf->eval_positions[i];
        const uint64_t npos = r.position(0);
        if (npos >= tfidf->train->size()) {
          throw Error("tfidf: neighbor position of record " + std::to_string(i) +
                      " outside the training stream");
        }
        in.similarity[i] = tfidf_similarity(trailing_window(*tfidf->eval, qpos),
                                             trailing_window(*tfidf->train, npos), tfidf->idf);
      }
    }
  });
  return in;
}

inline double rescore(const EvalCache& cache, double lambda, size_t k = 0) {
  return static_perplexity(scoring_inputs(cache, SimilarityKind::kDense, k), lambda);
}

inline double rescore(const EvalCache& cache, const LambdaTable& table, size_t k = 0,
                      const TfidfContext* tfidf = nullptr) {
  return score_adaptive(scoring_inputs(cache, table.partition.kind, k, tfidf), table);
}

inline TuneResult tune(const EvalCache& dev_cache, std::span<const uint32_t> b_grid,
                       std::span<const double> lambda_grid, SimilarityKind kind, size_t k = 0,
                       const TfidfContext* tfidf = nullptr, size_t threads = 1) {
  return tune(scoring_inputs(dev_cache, kind, k, tfidf, threads), b_grid, lambda_grid, threads);
}

}  // namespace knnlm
