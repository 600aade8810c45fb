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

// Vocabulary, whitespace tokenization and the binary token-stream format.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/error.hpp"

namespace knnlm {

using TokenId = uint32_t;
inline constexpr TokenId kUnkId = 0;
inline constexpr std::string_view kUnkSurface = "<unk>";

namespace detail {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Calls fn(word) for every whitespace-delimited word of `line`.
template <typename Fn>
void for_each_word(std::string_view line, Fn&& fn) {
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) fn(line.substr(i, j - i));
    i = j;
  }
}

// Calls on_line(line) for each line, without the trailing newline.
template <typename Fn>
void for_each_line(std::string_view text, Fn&& on_line) {
  size_t start = 0;
  while (start <= text.size()) {
    size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    on_line(text.substr(start, end - start));
    if (end == text.size()) break;
    start = end + 1;
  }
}

inline bool is_blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), is_space);
}

}  // namespace detail

class Vocab {
 public:
  Vocab() : surfaces_{std::string(kUnkSurface)} { index_.emplace(surfaces_[0], kUnkId); }

  // Builds from an explicit surface list; entry 0 must be "<unk>".
  static Vocab from_surfaces(std::vector<std::string> surfaces) {
    if (surfaces.empty() || surfaces[0] != kUnkSurface) {
      throw Error("vocab: entry 0 must be " + std::string(kUnkSurface));
    }
    Vocab v;
    v.surfaces_.clear();
    v.index_.clear();
    for (auto& s : surfaces) {
      if (s.empty() || std::any_of(s.begin(), s.end(), detail::is_space)) {
        throw Error("vocab: invalid surface '" + s + "'");
      }
      if (!v.index_.emplace(s, static_cast<TokenId>(v.surfaces_.size())).second) {
        throw Error("vocab: duplicate surface '" + s + "'");
      }
      v.surfaces_.push_back(std::move(s));
    }
    return v;
  }

  size_t size() const { return surfaces_.size(); }

  TokenId lookup(std::string_view surface) const {
    auto it = index_.find(std::string(surface));
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& surface(TokenId id) const {
    if (id >= surfaces_.size()) throw Error("vocab: id " + std::to_string(id) + " out of range");
    return surfaces_[id];
  }

  const std::vector<std::string>& surfaces() const { return surfaces_; }

  // One surface per line, id = 0-based line number.
  std::string serialize() const {
    std::string out;
    for (const auto& s : surfaces_) {
      out += s;
      out += '\n';
    }
    return out;
  }

  static Vocab parse(std::string_view text) {
    std::vector<std::string> surfaces;
    detail::for_each_line(text, [&](std::string_view line) {
      if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
      surfaces.emplace_back(line);
    });
    // A trailing newline yields one empty final line.
    if (!surfaces.empty() && surfaces.back().empty()) surfaces.pop_back();
    return from_surfaces(std::move(surfaces));
  }

  void save(const std::string& path) const { write_text_file(path, serialize()); }
  static Vocab load(const std::string& path) { return parse(read_text_file(path)); }

  bool operator==(const Vocab& other) const { return surfaces_ == other.surfaces_; }

 private:
  std::vector<std::string> surfaces_;
  std::unordered_map<std::string, TokenId> index_;
};

// Counts words of `text`; surfaces seen fewer than min_count times map to
// <unk>. Ids are assigned by descending count, ties by first occurrence.
inline Vocab build_vocab(std::string_view text, uint64_t min_count = 1) {
  struct Entry {
    std::string surface;
    uint64_t count = 0;
    uint64_t first = 0;
  };
  std::unordered_map<std::string, size_t> where;
  std::vector<Entry> entries;
  uint64_t ordinal = 0;
  detail::for_each_word(text, [&](std::string_view w) {
    const uint64_t pos = ordinal++;
    if (w == kUnkSurface) return;
    auto [it, inserted] = where.try_emplace(std::string(w), entries.size());
    if (inserted) entries.push_back({std::string(w), 0, pos});
    ++entries[it->second].count;
  });
  if (ordinal == 0) throw Error("build_vocab: empty corpus");

  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.count != b.count) return a.count > b.count;
    return a.first < b.first;
  });
  std::vector<std::string> surfaces{std::string(kUnkSurface)};
  for (auto& e : entries) {
    if (e.count >= min_count) surfaces.push_back(std::move(e.surface));
  }
  return Vocab::from_surfaces(std::move(surfaces));
}

// A corpus as vocabulary ids with document start offsets.
struct TokenStream {
  uint32_t vocab_size = 0;
  std::vector<TokenId> tokens;
  std::vector<uint64_t> doc_offsets;

  size_t size() const { return tokens.size(); }
  size_t doc_count() const { return doc_offsets.size(); }
  uint64_t doc_begin(size_t d) const { return doc_offsets[d]; }
  uint64_t doc_end(size_t d) const {
    return d + 1 < doc_offsets.size() ? doc_offsets[d + 1] : tokens.size();
  }
  size_t doc_length(size_t d) const { return static_cast<size_t>(doc_end(d) - doc_begin(d)); }

  // Index of the document containing global position `pos`.
  size_t doc_of(uint64_t pos) const {
    auto it = std::upper_bound(doc_offsets.begin(), doc_offsets.end(), pos);
    return static_cast<size_t>(it - doc_offsets.begin()) - 1;
  }

  std::span<const TokenId> doc(size_t d) const {
    return std::span<const TokenId>(tokens).subspan(doc_begin(d), doc_length(d));
  }

  // Number of tokens that have at least one preceding token in their
  // document: the datastore entry count and the eval record count.
  uint64_t predicted_count() const {
    uint64_t n = 0;
    for (size_t d = 0; d < doc_count(); ++d) n += doc_length(d) > 0 ? doc_length(d) - 1 : 0;
    return n;
  }

  // Global positions of predicted tokens, in order.
  std::vector<uint64_t> predicted_positions() const {
    std::vector<uint64_t> out;
    out.reserve(predicted_count());
    for (size_t d = 0; d < doc_count(); ++d) {
      for (uint64_t p = doc_begin(d) + 1; p < doc_end(d); ++p) out.push_back(p);
    }
    return out;
  }

  // Throws unless ids are in range and offsets start at 0, increase
  // strictly, and stay inside the stream.
  void validate() const {
    for (size_t i = 0; i < tokens.size(); ++i) {
      if (tokens[i] >= vocab_size) {
        throw Error("token stream: id " + std::to_string(tokens[i]) + " at position " +
                    std::to_string(i) + " exceeds vocab size " + std::to_string(vocab_size));
      }
    }
    if (tokens.empty()) {
      if (!doc_offsets.empty()) throw Error("token stream: documents in empty stream");
      return;
    }
    if (doc_offsets.empty() || doc_offsets[0] != 0) {
      throw Error("token stream: first document offset must be 0");
    }
    for (size_t d = 1; d < doc_offsets.size(); ++d) {
      if (doc_offsets[d] <= doc_offsets[d - 1] || doc_offsets[d] >= tokens.size()) {
        throw Error("token stream: document offset " + std::to_string(d) + " invalid");
      }
    }
  }

  bool operator==(const TokenStream&) const = default;
};

// Appends b's documents after a's. Both must share a vocabulary.
inline TokenStream concat(const TokenStream& a, const TokenStream& b) {
  if (a.vocab_size != b.vocab_size) throw Error("concat: vocab size mismatch");
  TokenStream out = a;
  const uint64_t shift = a.tokens.size();
  out.tokens.insert(out.tokens.end(), b.tokens.begin(), b.tokens.end());
  for (uint64_t off : b.doc_offsets) out.doc_offsets.push_back(off + shift);
  return out;
}

// Whitespace tokenization. Blank lines separate documents; unknown surfaces
// become <unk>.
inline TokenStream tokenize(std::string_view text, const Vocab& vocab) {
  TokenStream out;
  out.vocab_size = static_cast<uint32_t>(vocab.size());
  bool in_doc = false;
  detail::for_each_line(text, [&](std::string_view line) {
    if (detail::is_blank(line)) {
      in_doc = false;
      return;
    }
    detail::for_each_word(line, [&](std::string_view w) {
      if (!in_doc) {
        out.doc_offsets.push_back(out.tokens.size());
        in_doc = true;
      }
      out.tokens.push_back(vocab.lookup(w));
    });
  });
  return out;
}

inline std::string detokenize(const TokenStream& stream, const Vocab& vocab) {
  std::string out;
  for (size_t d = 0; d < stream.doc_count(); ++d) {
    if (d > 0) out += "\n\n";
    bool first = true;
    for (TokenId t : stream.doc(d)) {
      if (!first) out += ' ';
      out += vocab.surface(t);
      first = false;
    }
  }
  out += '\n';
  return out;
}

inline constexpr std::string_view kTokenStreamMagic = "KLMTOKS1";

inline void write_token_stream(const std::string& path, const TokenStream& s) {
  ByteWriter w(path);
  w.magic(kTokenStreamMagic);
  w.write<uint32_t>(s.vocab_size);
  w.write<uint64_t>(s.tokens.size());
  w.write<uint64_t>(s.doc_offsets.size());
  w.write_array<TokenId>(s.tokens);
  w.write_array<uint64_t>(s.doc_offsets);
  w.close();
}

inline TokenStream parse_token_stream(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "token stream");
  r.expect_magic(kTokenStreamMagic);
  TokenStream s;
  s.vocab_size = r.read<uint32_t>("vocab size");
  const auto n_tokens = r.read<uint64_t>("token count");
  const auto n_docs = r.read<uint64_t>("doc count");
  s.tokens = r.read_array<TokenId>(n_tokens, "tokens");
  s.doc_offsets = r.read_array<uint64_t>(n_docs, "doc offsets");
  r.expect_end();
  s.validate();
  return s;
}

inline TokenStream read_token_stream(const std::string& path) {
  return parse_token_stream(FileBytes::open(path).bytes());
}

}  // namespace knnlm
