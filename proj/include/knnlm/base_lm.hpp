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

// Base next-word distribution: an interpolated (Jelinek-Mercer) n-gram
// model trained on the datastore corpus, and the binary log-prob file for
// base probabilities computed elsewhere.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/error.hpp"

namespace knnlm {

// P_1(w)       = mu * ML_1(w) + (1 - mu) / V
// P_o(w | ctx) = mu * ML_o(w | ctx) + (1 - mu) * P_{o-1}(w | ctx')
// An order whose context was never observed is skipped entirely, so every
// conditional distribution sums to one.
class NgramModel {
 public:
  using Key = std::u32string;

  NgramModel() = default;

  static NgramModel train(const TokenStream& stream, uint32_t order = 3, double mu = 0.5) {
    if (order < 1) throw Error("ngram train: order must be >= 1");
    if (!(mu > 0.0 && mu < 1.0)) throw Error("ngram train: mu must be in (0, 1)");
    if (stream.tokens.empty()) throw Error("ngram train: empty stream");
    if (stream.vocab_size == 0) throw Error("ngram train: empty vocab");
    stream.validate();
    NgramModel m;
    m.order_ = order;
    m.mu_ = mu;
    m.vocab_size_ = stream.vocab_size;
    m.unigram_.assign(stream.vocab_size, 0);
    m.ngrams_.resize(order - 1);
    m.contexts_.resize(order - 1);
    for (size_t d = 0; d < stream.doc_count(); ++d) {
      const uint64_t b = stream.doc_begin(d), e = stream.doc_end(d);
      for (uint64_t p = b; p < e; ++p) {
        ++m.unigram_[stream.tokens[p]];
        ++m.total_;
        for (uint32_t o = 2; o <= order && p - b >= o - 1; ++o) {
          Key key = make_key(std::span<const TokenId>(stream.tokens).subspan(p - o + 1, o));
          ++m.ngrams_[o - 2][key];
          key.pop_back();
          ++m.contexts_[o - 2][key];
        }
      }
    }
    return m;
  }

  uint32_t order() const { return order_; }
  double mu() const { return mu_; }
  uint32_t vocab_size() const { return vocab_size_; }
  uint64_t unigram_count(TokenId w) const { return unigram_.at(w); }
  uint64_t total_count() const { return total_; }

  uint64_t ngram_count(std::span<const TokenId> ngram) const {
    if (ngram.empty() || ngram.size() > order_) return 0;
    if (ngram.size() == 1) return unigram_.at(ngram[0]);
    const auto& table = ngrams_[ngram.size() - 2];
    auto it = table.find(make_key(ngram));
    return it == table.end() ? 0 : it->second;
  }

  uint64_t context_count(std::span<const TokenId> context) const {
    if (context.empty()) return total_;
    if (context.size() + 1 > order_) return 0;
    const auto& table = contexts_[context.size() - 1];
    auto it = table.find(make_key(context));
    return it == table.end() ? 0 : it->second;
  }

  // P(w | context); only the last order-1 tokens of context are used.
  double prob(std::span<const TokenId> context, TokenId w) const {
    if (w >= vocab_size_) throw Error("ngram prob: token " + std::to_string(w) + " out of range");
    if (context.size() + 1 > order_) context = context.last(order_ - 1);
    const double v = static_cast<double>(vocab_size_);
    double p = mu_ * static_cast<double>(unigram_[w]) / static_cast<double>(total_) +
               (1.0 - mu_) / v;
    Key key;
    key.reserve(order_);
    for (uint32_t o = 2; o <= context.size() + 1; ++o) {
      const auto ctx = context.last(o - 1);
      key = make_key(ctx);
      auto cit = contexts_[o - 2].find(key);
      if (cit == contexts_[o - 2].end()) break;  // longer contexts are unseen too
      key.push_back(static_cast<char32_t>(w));
      auto nit = ngrams_[o - 2].find(key);
      const double c = nit == ngrams_[o - 2].end() ? 0.0 : static_cast<double>(nit->second);
      p = mu_ * c / static_cast<double>(cit->second) + (1.0 - mu_) * p;
    }
    return p;
  }

  double logprob(std::span<const TokenId> context, TokenId w) const {
    return std::log(prob(context, w));
  }

  // Deterministic binary image: header, unigram counts, then each order's
  // n-gram counts sorted by key. Context counts are rebuilt on load.
  std::vector<std::byte> serialize() const {
    std::vector<std::byte> out;
    auto put = [&out](const void* p, size_t n) {
      const auto* b = static_cast<const std::byte*>(p);
      out.insert(out.end(), b, b + n);
    };
    put(kMagic.data(), kMagic.size());
    put(&order_, sizeof order_);
    put(&mu_, sizeof mu_);
    put(&vocab_size_, sizeof vocab_size_);
    put(&total_, sizeof total_);
    put(unigram_.data(), unigram_.size() * sizeof(uint64_t));
    for (const auto& table : ngrams_) {
      std::vector<std::pair<Key, uint64_t>> entries(table.begin(), table.end());
      std::sort(entries.begin(), entries.end());
      const uint64_t n = entries.size();
      put(&n, sizeof n);
      for (const auto& [key, count] : entries) {
        for (char32_t c : key) {
          const auto id = static_cast<uint32_t>(c);
          put(&id, sizeof id);
        }
        put(&count, sizeof count);
      }
    }
    return out;
  }

  static NgramModel deserialize(std::span<const std::byte> bytes) {
    ByteReader r(bytes, "ngram model");
    r.expect_magic(kMagic);
    NgramModel m;
    m.order_ = r.read<uint32_t>("order");
    m.mu_ = r.read<double>("mu");
    m.vocab_size_ = r.read<uint32_t>("vocab size");
    m.total_ = r.read<uint64_t>("total");
    if (m.order_ < 1 || m.vocab_size_ == 0) throw Error("ngram model: invalid header");
    m.unigram_ = r.read_array<uint64_t>(m.vocab_size_, "unigrams");
    m.ngrams_.resize(m.order_ - 1);
    m.contexts_.resize(m.order_ - 1);
    for (uint32_t o = 2; o <= m.order_; ++o) {
      const auto n = r.read<uint64_t>("entry count");
      for (uint64_t i = 0; i < n; ++i) {
        Key key;
        for (uint32_t j = 0; j < o; ++j) key.push_back(static_cast<char32_t>(r.read<uint32_t>("key")));
        const auto count = r.read<uint64_t>("count");
        m.ngrams_[o - 2][key] = count;
        key.pop_back();
        m.contexts_[o - 2][key] += count;
      }
    }
    r.expect_end();
    return m;
  }

  void save(const std::string& path) const {
    const auto bytes = serialize();
    ByteWriter w(path);
    w.raw(bytes.data(), bytes.size());
    w.close();
  }

  static NgramModel load(const std::string& path) {
    return deserialize(FileBytes::open(path).bytes());
  }

 private:
  static constexpr std::string_view kMagic = "KLMNGRM1";

  static Key make_key(std::span<const TokenId> ids) {
    Key k;
    k.reserve(ids.size() + 1);
    for (TokenId t : ids) k.push_back(static_cast<char32_t>(t));
    return k;
  }

  uint32_t order_ = 0;
  double mu_ = 0.5;
  uint32_t vocab_size_ = 0;
  uint64_t total_ = 0;
  std::vector<uint64_t> unigram_;
  // Index o-2 holds order-o n-gram counts and their (o-1)-token contexts.
  std::vector<std::unordered_map<Key, uint64_t>> ngrams_;
  std::vector<std::unordered_map<Key, uint64_t>> contexts_;
};

// Natural-log base probability of every predicted token of `eval` (tokens
// after the first of each document), in stream order.
inline std::vector<double> base_logprobs(const NgramModel& model, const TokenStream& eval) {
  if (eval.vocab_size != model.vocab_size()) throw Error("base_logprobs: vocab mismatch");
  std::vector<double> out;
  out.reserve(eval.predicted_count());
  for (size_t d = 0; d < eval.doc_count(); ++d) {
    const auto doc = eval.doc(d);
    for (size_t t = 1; t < doc.size(); ++t) out.push_back(model.logprob(doc.first(t), doc[t]));
  }
  return out;
}

// Base log-prob file: "KLMBASE1", u64 count, count f64 natural-log values.
inline constexpr std::string_view kBaseMagic = "KLMBASE1";

inline void write_base_logprobs(const std::string& path, std::span<const double> logprobs) {
  ByteWriter w(path);
  w.magic(kBaseMagic);
  w.write<uint64_t>(logprobs.size());
  w.write_array<double>(logprobs);
  w.close();
}

inline std::vector<double> parse_base_logprobs(std::span<const std::byte> bytes,
                                               uint64_t expected_count) {
  ByteReader r(bytes, "base log-prob file");
  r.expect_magic(kBaseMagic);
  const auto n = r.read<uint64_t>("count");
  if (n != expected_count) {
    throw Error("base log-prob file: count " + std::to_string(n) + " does not match expected " +
                std::to_string(expected_count));
  }
  auto values = r.read_array<double>(n, "log-probs");
  r.expect_end();
  for (size_t i = 0; i < values.size(); ++i) {
    if (!(values[i] <= 0.0)) {
      throw Error("base log-prob file: invalid log-prob at index " + std::to_string(i) +
                  " (must be <= 0)");
    }
  }
  return values;
}

inline std::vector<double> import_base_logprobs(const std::string& path, uint64_t expected_count) {
  return parse_base_logprobs(FileBytes::open(path).bytes(), expected_count);
}

}  // namespace knnlm
