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

// kNN next-word distribution, interpolation with the base model and
// perplexity.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/error.hpp"

namespace knnlm {

// Probabilities over the distinct retrieved values, sorted by token id.
struct KnnDistribution {
  std::vector<std::pair<TokenId, double>> probs;

  double prob(TokenId w) const {
    auto it = std::lower_bound(probs.begin(), probs.end(), w,
                               [](const auto& e, TokenId t) { return e.first < t; });
    return it != probs.end() && it->first == w ? it->second : 0.0;
  }

  double total() const {
    double s = 0.0;
    for (const auto& e : probs) s += e.second;
    return s;
  }
};

// P(w) proportional to the sum of exp(-d_i) over neighbors with value w.
// Exponents are shifted by the smallest distance.
template <typename Dist>
KnnDistribution knn_distribution(std::span<const Dist> distances, std::span<const TokenId> values) {
  if (distances.empty() || distances.size() != values.size()) {
    throw Error("knn_distribution: need a non-empty neighbor list");
  }
  const double dmin = static_cast<double>(*std::min_element(distances.begin(), distances.end()));
  std::vector<std::pair<TokenId, double>> weighted(values.size());
  double total = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    const double w = std::exp(-(static_cast<double>(distances[i]) - dmin));
    weighted[i] = {values[i], w};
    total += w;
  }
  // Stable sort keeps rank order inside each value, so each per-value sum
  // accumulates exactly like knn_prob's numerator.
  std::stable_sort(weighted.begin(), weighted.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  KnnDistribution out;
  for (size_t i = 0; i < weighted.size();) {
    double s = 0.0;
    size_t j = i;
    for (; j < weighted.size() && weighted[j].first == weighted[i].first; ++j) s += weighted[j].second;
    out.probs.emplace_back(weighted[i].first, s / total);
    i = j;
  }
  return out;
}

inline KnnDistribution knn_distribution(const NeighborSet& nbrs) {
  return knn_distribution<double>(nbrs.distances, nbrs.values);
}

// P_kNN(gold) without materializing the distribution; bit-identical to
// knn_distribution(...).prob(gold).
template <typename Dist>
double knn_prob(std::span<const Dist> distances, std::span<const TokenId> values, TokenId gold) {
  if (distances.empty() || distances.size() != values.size()) {
    throw Error("knn_prob: need a non-empty neighbor list");
  }
  const double dmin = static_cast<double>(*std::min_element(distances.begin(), distances.end()));
  double total = 0.0, hit = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    const double w = std::exp(-(static_cast<double>(distances[i]) - dmin));
    total += w;
    if (values[i] == gold) hit += w;
  }
  return hit / total;
}

inline double interpolate(double p_knn, double p_base, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw Error("interpolate: lambda " + std::to_string(lambda) + " outside [0, 1]");
  }
  return lambda * p_knn + (1.0 - lambda) * p_base;
}

// ln(lambda * p_knn + (1 - lambda) * exp(base_logprob)).
// lambda == 0 returns base_logprob unchanged, and equal component
// probabilities give the same result for every lambda.
inline double interpolated_logprob(double p_knn, double base_logprob, double lambda) {
  if (lambda == 0.0) return base_logprob;
  if (p_knn == 0.0) return std::log1p(-lambda) + base_logprob;
  const double p_base = std::exp(base_logprob);
  if (p_base == 0.0) return std::log(lambda) + std::log(p_knn);
  return std::log(p_base + lambda * (p_knn - p_base));
}

// Compensated summation.
struct KahanSum {
  double sum = 0.0;
  double carry = 0.0;
  void add(double x) {
    const double y = x - carry;
    const double t = sum + y;
    carry = (t - sum) - y;
    sum = t;
  }
};

inline constexpr size_t kReductionChunk = 4096;

// Sum of log-probabilities: Kahan within fixed-size chunks, then Kahan over
// the chunk totals in order. Throws on a non-finite or positive entry.
inline double sum_logprobs(std::span<const double> logprobs) {
  KahanSum outer;
  for (size_t b = 0; b < logprobs.size(); b += kReductionChunk) {
    const size_t e = std::min(logprobs.size(), b + kReductionChunk);
    KahanSum inner;
    for (size_t i = b; i < e; ++i) {
      const double lp = logprobs[i];
      if (!std::isfinite(lp) || lp > 0.0) {
        throw Error("perplexity: invalid probability at token " + std::to_string(i) +
                    " (log-prob " + std::to_string(lp) + ")");
      }
      inner.add(lp);
    }
    outer.add(inner.sum);
  }
  return outer.sum;
}

inline double perplexity_from_logprobs(std::span<const double> logprobs) {
  if (logprobs.empty()) throw Error("perplexity: empty token stream");
  return std::exp(-sum_logprobs(logprobs) / static_cast<double>(logprobs.size()));
}

inline double perplexity(std::span<const double> probs) {
  if (probs.empty()) throw Error("perplexity: empty token stream");
  std::vector<double> logs(probs.size());
  for (size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] > 0.0) || probs[i] > 1.0 + 1e-12) {
      throw Error("perplexity: invalid probability " + std::to_string(probs[i]) + " at token " +
                  std::to_string(i));
    }
    logs[i] = std::min(0.0, std::log(probs[i]));
  }
  return perplexity_from_logprobs(logs);
}

// Percentage reduction of perplexity relative to the base.
inline double relative_improvement(double ppl_base, double ppl_variant) {
  if (!(ppl_base > 0.0) || !(ppl_variant > 0.0)) {
    throw Error("relative_improvement: perplexities must be positive");
  }
  return 100.0 * (ppl_base - ppl_variant) / ppl_base;
}

// ---------------------------------------------------------------------------

enum class SimilarityKind { kDense, kTfidf };

inline std::string_view to_string(SimilarityKind k) {
  return k == SimilarityKind::kDense ? "dense" : "tfidf";
}

inline SimilarityKind parse_similarity_kind(std::string_view s) {
  if (s == "dense") return SimilarityKind::kDense;
  if (s == "tfidf") return SimilarityKind::kTfidf;
  throw Error("unknown similarity kind '" + std::string(s) + "'");
}

// Per-token quantities every scoring routine needs: retrieval similarity of
// the top neighbor, P_kNN of the gold token and the base log-prob.
struct ScoringInputs {
  SimilarityKind kind = SimilarityKind::kDense;
  std::vector<double> similarity;
  std::vector<double> knn_prob;
  std::vector<double> base_logprob;

  size_t size() const { return base_logprob.size(); }

  void push_back(double sim, double p_knn, double base) {
    similarity.push_back(sim);
    knn_prob.push_back(p_knn);
    base_logprob.push_back(base);
  }

  ScoringInputs slice(size_t begin, size_t end) const {
    ScoringInputs out;
    out.kind = kind;
    out.similarity.assign(similarity.begin() + begin, similarity.begin() + end);
    out.knn_prob.assign(knn_prob.begin() + begin, knn_prob.begin() + end);
    out.base_logprob.assign(base_logprob.begin() + begin, base_logprob.begin() + end);
    return out;
  }

  ScoringInputs subset(std::span<const size_t> rows) const {
    ScoringInputs out;
    out.kind = kind;
    for (size_t r : rows) out.push_back(similarity[r], knn_prob[r], base_logprob[r]);
    return out;
  }

  void validate() const {
    if (similarity.size() != size() || knn_prob.size() != size()) {
      throw Error("scoring inputs: column lengths differ");
    }
    for (size_t i = 0; i < size(); ++i) {
      if (!(knn_prob[i] >= 0.0 && knn_prob[i] <= 1.0 + 1e-12)) {
        throw Error("scoring inputs: p_knn out of range at record " + std::to_string(i));
      }
      if (!(base_logprob[i] <= 0.0)) {
        throw Error("scoring inputs: base log-prob > 0 at record " + std::to_string(i));
      }
      if (!std::isfinite(similarity[i])) {
        throw Error("scoring inputs: non-finite similarity at record " + std::to_string(i));
      }
    }
  }
};

inline double base_perplexity(const ScoringInputs& in) {
  return perplexity_from_logprobs(in.base_logprob);
}

inline double static_perplexity(const ScoringInputs& in, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error("lambda outside [0, 1]");
  std::vector<double> lp(in.size());
  for (size_t i = 0; i < in.size(); ++i) {
    lp[i] = interpolated_logprob(in.knn_prob[i], in.base_logprob[i], lambda);
  }
  return perplexity_from_logprobs(lp);
}

}  // namespace knnlm
