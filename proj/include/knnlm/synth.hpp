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

// Seeded synthetic corpus: sentences are chains of 5-word templates with
// per-slot alternatives and token noise. Each document has a topic that
// fixes the word of some slots and steers template order. Eval sentences can instead copy a
// verbatim span of a training document, which creates the lexical-overlap
// regime retrieval benefits from.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "knnlm/error.hpp"

namespace knnlm {

struct SynthConfig {
  uint64_t seed = 0;
  size_t train_tokens = 200000;
  size_t eval_tokens = 20000;  // split evenly into valid and test
  double overlap_rate = 0.5;
  uint32_t vocab_size = 500;
  uint32_t templates = 100;
  uint32_t common_words = 30;   // pool for the topic-independent slot words
  uint32_t max_alternatives = 2;
  uint32_t topics = 4;          // one per document
  double topical_slots = 0.4;   // share of slots whose word is set by the topic
  double chain = 0.0;           // chance the next template follows the topic chain
  double noise = 0.15;
  size_t min_span = 10;
  size_t max_span = 20;
};

struct SynthCorpus {
  std::string train, valid, test;
  size_t copied_sentences_valid = 0;
  size_t copied_sentences_test = 0;
};

namespace detail {

class SynthRng {
 public:
  explicit SynthRng(uint64_t seed) : gen_(seed) {}
  // Uniform in [0, n); multiply-shift keeps results identical across
  // standard libraries.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<unsigned __int128>(gen_()) * n) >> 64);
  }
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  // Skewed toward small indices.
  uint64_t skewed(uint64_t n, double power) {
    return std::min<uint64_t>(n - 1, static_cast<uint64_t>(std::pow(unit(), power) * n));
  }

 private:
  std::mt19937_64 gen_;
};

class SynthGenerator {
 public:
  SynthGenerator(const SynthConfig& c) : c_(c), rng_(c.seed) {
    slots_.resize(c_.templates);
    successor_.assign(c_.topics, std::vector<uint32_t>(c_.templates));
    for (uint32_t t = 0; t < c_.templates; ++t) {
      for (auto& slot : slots_[t]) {
        const uint64_t alts = 1 + rng_.below(c_.max_alternatives);
        for (uint64_t a = 0; a < alts; ++a) slot.generic.push_back(common_word());
        slot.is_topical = rng_.unit() < c_.topical_slots;
        for (uint32_t k = 0; k < c_.topics; ++k) slot.topical.push_back(rare_word());
      }
      for (uint32_t k = 0; k < c_.topics; ++k) {
        successor_[k][t] = static_cast<uint32_t>(rng_.below(c_.templates));
      }
    }
  }

  // A sentence of 2 to 4 chained templates in the given topic.
  std::vector<uint32_t> sentence(uint32_t topic) {
    std::vector<uint32_t> out;
    const uint64_t parts = 2 + rng_.below(3);
    uint32_t t = next_template();
    for (uint64_t p = 0; p < parts; ++p) {
      for (const auto& slot : slots_[t]) {
        uint32_t w = slot.is_topical ? slot.topical[topic]
                                     : slot.generic[rng_.below(slot.generic.size())];
        if (rng_.unit() < c_.noise) w = static_cast<uint32_t>(rng_.below(c_.vocab_size));
        out.push_back(w);
      }
      t = rng_.unit() < c_.chain ? successor_[topic][t] : next_template();
    }
    return out;
  }

  // Documents of sentences totalling at least `tokens` tokens. When
  // `source` is given, each sentence is a verbatim span of one of its
  // documents with probability overlap_rate.
  std::vector<std::vector<std::vector<uint32_t>>> documents(
      size_t tokens, const std::vector<std::vector<uint32_t>>* source, size_t* copied) {
    std::vector<std::vector<std::vector<uint32_t>>> docs;
    size_t total = 0;
    while (total < tokens) {
      const uint64_t n_sent = 10 + rng_.below(21);
      const auto topic = static_cast<uint32_t>(rng_.below(c_.topics));
      auto& doc = docs.emplace_back();
      for (uint64_t s = 0; s < n_sent && total < tokens; ++s) {
        std::vector<uint32_t> sent;
        if (source && !source->empty() && rng_.unit() < c_.overlap_rate) {
          sent = copy_span(*source);
          if (copied) ++*copied;
        } else {
          sent = sentence(topic);
        }
        total += sent.size();
        doc.push_back(std::move(sent));
      }
    }
    return docs;
  }

 private:
  std::vector<uint32_t> copy_span(const std::vector<std::vector<uint32_t>>& source) {
    for (;;) {
      const auto& doc = source[rng_.below(source.size())];
      if (doc.size() < c_.min_span) continue;
      const size_t len = std::min(doc.size(), c_.min_span + rng_.below(c_.max_span - c_.min_span + 1));
      const size_t start = rng_.below(doc.size() - len + 1);
      return std::vector<uint32_t>(doc.begin() + start, doc.begin() + start + len);
    }
  }

  struct Slot {
    std::vector<uint32_t> generic;  // shared by every topic
    std::vector<uint32_t> topical;  // one word per topic
    bool is_topical = false;
  };

  uint32_t common_word() { return static_cast<uint32_t>(rng_.below(c_.common_words)); }
  uint32_t rare_word() {
    return c_.common_words +
           static_cast<uint32_t>(rng_.skewed(c_.vocab_size - c_.common_words, 1.6));
  }
  uint32_t next_template() { return static_cast<uint32_t>(rng_.skewed(c_.templates, 2.0)); }

  SynthConfig c_;
  SynthRng rng_;
  std::vector<std::array<Slot, 5>> slots_;
  std::vector<std::vector<uint32_t>> successor_;  // [topic][template]
};

inline std::string synth_word(uint32_t id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "w%03u", id);
  return buf;
}

// One sentence per line, documents separated by a blank line.
inline std::string render(const std::vector<std::vector<std::vector<uint32_t>>>& docs) {
  std::string s;
  for (size_t d = 0; d < docs.size(); ++d) {
    if (d > 0) s += '\n';
    for (const auto& sent : docs[d]) {
      for (size_t i = 0; i < sent.size(); ++i) {
        if (i > 0) s += ' ';
        s += synth_word(sent[i]);
      }
      s += '\n';
    }
  }
  return s;
}

inline std::vector<std::vector<uint32_t>> flatten(
    const std::vector<std::vector<std::vector<uint32_t>>>& docs) {
  std::vector<std::vector<uint32_t>> out;
  for (const auto& d : docs) {
    auto& f = out.emplace_back();
    for (const auto& s : d) f.insert(f.end(), s.begin(), s.end());
  }
  return out;
}

}  // namespace detail

inline SynthCorpus synth(const SynthConfig& config) {
  if (!(config.overlap_rate >= 0.0 && config.overlap_rate <= 1.0)) {
    throw Error("synth: overlap rate must be in [0, 1]");
  }
  if (config.train_tokens < 1 || config.eval_tokens < 2) throw Error("synth: corpus too small");
  if (config.templates < 1 || config.topics < 1 || config.max_alternatives < 1 ||
      config.common_words < 1 || config.common_words >= config.vocab_size) throw Error("synth: empty inventory");
  if (config.min_span < 1 || config.max_span < config.min_span) throw Error("synth: bad span range");
  detail::SynthGenerator gen(config);
  SynthCorpus out;
  const auto train = gen.documents(config.train_tokens, nullptr, nullptr);
  const auto flat = detail::flatten(train);
  const size_t valid_tokens = config.eval_tokens / 2;
  const auto valid = gen.documents(valid_tokens, &flat, &out.copied_sentences_valid);
  const auto test =
      gen.documents(config.eval_tokens - valid_tokens, &flat, &out.copied_sentences_test);
  out.train = detail::render(train);
  out.valid = detail::render(valid);
  out.test = detail::render(test);
  return out;
}

}  // namespace knnlm
