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

// Detection of n-grams shared between evaluation data and the training
// corpus, and the position mask that removes their neighborhoods from
// datastore construction.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"
#include "knnlm/parallel.hpp"

namespace knnlm {

struct NgramMatch {
  uint64_t position = 0;  // start of the n-gram in the training stream
  uint32_t length = 0;
  bool operator==(const NgramMatch&) const = default;
};

// Bitset over corpus positions marking tokens that must not become
// datastore values.
class PositionMask {
 public:
  PositionMask() = default;
  explicit PositionMask(uint64_t corpus_len)
      : corpus_len_(corpus_len), words_((corpus_len + 63) / 64, 0) {}

  uint64_t corpus_len() const { return corpus_len_; }

  bool excluded(uint64_t pos) const {
    return pos < corpus_len_ && ((words_[pos >> 6] >> (pos & 63)) & 1ULL);
  }

  void exclude(uint64_t pos) {
    if (pos >= corpus_len_) throw Error("mask: position out of range");
    words_[pos >> 6] |= 1ULL << (pos & 63);
  }

  // Excludes [begin, end) clipped to the corpus.
  void exclude_range(uint64_t begin, uint64_t end) {
    end = std::min(end, corpus_len_);
    for (uint64_t p = begin; p < end;) {
      if ((p & 63) == 0 && p + 64 <= end) {
        words_[p >> 6] = ~0ULL;
        p += 64;
      } else {
        words_[p >> 6] |= 1ULL << (p & 63);
        ++p;
      }
    }
  }

  uint64_t excluded_count() const {
    uint64_t n = 0;
    for (uint64_t w : words_) n += static_cast<uint64_t>(std::popcount(w));
    return n;
  }

  bool empty() const { return excluded_count() == 0; }

  PositionMask& operator|=(const PositionMask& other) {
    if (other.corpus_len_ != corpus_len_) throw Error("mask: corpus length mismatch");
    for (size_t i = 0; i < words_.size(); ++i) words_[i] |= other.words_[i];
    return *this;
  }

  const std::vector<uint64_t>& words() const { return words_; }

  bool operator==(const PositionMask&) const = default;

  static PositionMask from_words(uint64_t corpus_len, std::vector<uint64_t> words) {
    PositionMask m(corpus_len);
    if (words.size() != m.words_.size()) throw Error("mask: word count mismatch");
    if (corpus_len % 64 != 0 && !words.empty()) {
      const uint64_t tail = ~0ULL << (corpus_len % 64);
      if (words.back() & tail) throw Error("mask: bits set beyond corpus length");
    }
    m.words_ = std::move(words);
    return m;
  }

 private:
  uint64_t corpus_len_ = 0;
  std::vector<uint64_t> words_;
};

namespace detail {

inline constexpr uint64_t kRollBase = 0x100000001b3ULL;

inline uint64_t pow_u64(uint64_t b, uint32_t e) {
  uint64_t r = 1;
  while (e--) r *= b;
  return r;
}

// Calls fn(position, hash) for every n-gram of s lying inside one document,
// restricted to documents [doc_begin, doc_end).
template <typename Fn>
void for_each_ngram_hash(const TokenStream& s, uint32_t n, size_t doc_begin, size_t doc_end,
                         Fn&& fn) {
  const uint64_t top = pow_u64(kRollBase, n - 1);
  for (size_t d = doc_begin; d < doc_end; ++d) {
    const uint64_t b = s.doc_begin(d), e = s.doc_end(d);
    if (e - b < n) continue;
    uint64_t h = 0;
    for (uint64_t p = b; p < b + n; ++p) h = h * kRollBase + (s.tokens[p] + 1);
    fn(b, h);
    for (uint64_t p = b + 1; p + n <= e; ++p) {
      h = (h - (s.tokens[p - 1] + 1) * top) * kRollBase + (s.tokens[p + n - 1] + 1);
      fn(p, h);
    }
  }
}

}  // namespace detail

// Every training position p whose n-gram train[p, p+n) occurs in `eval`.
// Neither side may cross a document boundary. Results ascend by position.
inline std::vector<NgramMatch> find_shared_ngrams(const TokenStream& train,
                                                  const TokenStream& eval, uint32_t n,
                                                  size_t threads = 1) {
  if (n < 1) throw Error("find_shared_ngrams: n must be >= 1");
  if (train.vocab_size != eval.vocab_size) {
    throw Error("find_shared_ngrams: vocab mismatch (" + std::to_string(train.vocab_size) +
                " vs " + std::to_string(eval.vocab_size) + ")");
  }
  // hash -> eval positions of distinct n-grams carrying that hash
  std::unordered_map<uint64_t, std::vector<uint64_t>> table;
  auto same = [n](const TokenStream& a, uint64_t pa, const TokenStream& b, uint64_t pb) {
    return std::equal(a.tokens.begin() + pa, a.tokens.begin() + pa + n, b.tokens.begin() + pb);
  };
  detail::for_each_ngram_hash(eval, n, 0, eval.doc_count(), [&](uint64_t p, uint64_t h) {
    auto& bucket = table[h];
    for (uint64_t q : bucket) {
      if (same(eval, q, eval, p)) return;
    }
    bucket.push_back(p);
  });

  constexpr size_t kDocsPerChunk = 64;
  const size_t docs = train.doc_count();
  const size_t chunks = (docs + kDocsPerChunk - 1) / kDocsPerChunk;
  std::vector<std::vector<NgramMatch>> partial(chunks);
  parallel_chunks(docs, kDocsPerChunk, threads, [&](size_t b, size_t e) {
    auto& out = partial[b / kDocsPerChunk];
    detail::for_each_ngram_hash(train, n, b, e, [&](uint64_t p, uint64_t h) {
      auto it = table.find(h);
      if (it == table.end()) return;
      for (uint64_t q : it->second) {
        if (same(train, p, eval, q)) {
          out.push_back({p, n});
          return;
        }
      }
    });
  });
  std::vector<NgramMatch> out;
  for (auto& part : partial) out.insert(out.end(), part.begin(), part.end());
  return out;
}

// Half-open window [begin, end) excluded around one match: centered at
// c = p + n/2, extending window/2 on each side, clipped to the corpus.
inline std::pair<uint64_t, uint64_t> exclusion_window(const NgramMatch& m, uint64_t corpus_len,
                                                      uint32_t window) {
  const uint64_t c = m.position + m.length / 2;
  const uint64_t half = window / 2;
  const uint64_t begin = c > half ? c - half : 0;
  const uint64_t end = std::min(corpus_len, c + half);
  return {std::min(begin, end), end};
}

inline PositionMask build_mask(std::span<const NgramMatch> matches, uint64_t corpus_len,
                               uint32_t window = 200) {
  PositionMask mask(corpus_len);
  for (const auto& m : matches) {
    if (window < m.length) {
      throw Error("build_mask: window " + std::to_string(window) + " smaller than n-gram length " +
                  std::to_string(m.length));
    }
    auto [b, e] = exclusion_window(m, corpus_len, window);
    mask.exclude_range(b, e);
  }
  return mask;
}

// Counts positions in `retained` that fall inside any exclusion window of
// `matches`. Works from the window intervals directly, not from a mask.
inline uint64_t count_window_violations(std::span<const uint64_t> retained,
                                        std::span<const NgramMatch> matches,
                                        uint64_t corpus_len, uint32_t window) {
  std::vector<std::pair<uint64_t, uint64_t>> windows;
  windows.reserve(matches.size());
  for (const auto& m : matches) windows.push_back(exclusion_window(m, corpus_len, window));
  std::sort(windows.begin(), windows.end());
  // Merge into disjoint sorted intervals.
  std::vector<std::pair<uint64_t, uint64_t>> merged;
  for (const auto& w : windows) {
    if (w.first >= w.second) continue;
    if (!merged.empty() && w.first <= merged.back().second) {
      merged.back().second = std::max(merged.back().second, w.second);
    } else {
      merged.push_back(w);
    }
  }
  uint64_t violations = 0;
  for (uint64_t p : retained) {
    auto it = std::upper_bound(merged.begin(), merged.end(), p,
                               [](uint64_t v, const auto& iv) { return v < iv.first; });
    if (it != merged.begin() && p < std::prev(it)->second) ++violations;
  }
  return violations;
}

inline constexpr std::string_view kMaskMagic = "KLMMASK1";

inline void write_mask(const std::string& path, const PositionMask& mask) {
  ByteWriter w(path);
  w.magic(kMaskMagic);
  w.write<uint64_t>(mask.corpus_len());
  w.write_array<uint64_t>(mask.words());
  w.close();
}

inline PositionMask parse_mask(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "mask");
  r.expect_magic(kMaskMagic);
  const auto len = r.read<uint64_t>("corpus length");
  auto words = r.read_array<uint64_t>((len + 63) / 64, "bitset");
  r.expect_end();
  return PositionMask::from_words(len, std::move(words));
}

inline PositionMask read_mask(const std::string& path) {
  return parse_mask(FileBytes::open(path).bytes());
}

}  // namespace knnlm
