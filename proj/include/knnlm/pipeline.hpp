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

// Cache-free scoring: encode, search and interpolate token by token,
// working in probability space. Used to cross-check cached rescoring.

#include <cmath>
#include <span>
#include <vector>

#include "knnlm/adaptive.hpp"
#include "knnlm/base_lm.hpp"
#include "knnlm/corpus.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/encoder.hpp"
#include "knnlm/error.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/scorer.hpp"

namespace knnlm {

struct DirectOptions {
  size_t k = 1024;
  // Round neighbor distances to f32 before use, as the cache stores them.
  bool f32_distances = false;
  size_t threads = 1;
};

// Interpolated probability of every predicted eval token. `table` picks the
// coefficient per token from the dense similarity of its nearest neighbor.
inline std::vector<double> direct_probs(const TokenStream& eval, const Datastore& store,
                                        const DenseEncoder& encoder, const NgramModel& model,
                                        const LambdaTable& table, const DirectOptions& options) {
  if (table.partition.kind != SimilarityKind::kDense) {
    throw Error("direct scoring supports dense similarity only");
  }
  if (encoder.tag() != store.encoder_tag) throw Error("direct scoring: encoder tag mismatch");
  table.validate();
  const auto positions = eval.predicted_positions();
  std::vector<double> probs(positions.size());
  parallel_chunks(positions.size(), 256, options.threads, [&](size_t b, size_t e) {
    for (size_t i = b; i < e; ++i) {
      const uint64_t p = positions[i];
      const uint64_t start = eval.doc_begin(eval.doc_of(p));
      const auto context = std::span<const TokenId>(eval.tokens).subspan(start, p - start);
      NeighborSet nb = search(store, encoder.encode(context), options.k);
      if (options.f32_distances) {
        for (double& d : nb.distances) d = static_cast<double>(static_cast<float>(d));
      }
      const TokenId gold = eval.tokens[p];
      const double p_knn = knn_distribution(nb).prob(gold);
      const double p_base = model.prob(context, gold);
      probs[i] = interpolate(p_knn, p_base, table.lambda_for(dense_similarity(nb.distances[0])));
    }
  });
  return probs;
}

inline double direct_perplexity(const TokenStream& eval, const Datastore& store,
                                const DenseEncoder& encoder, const NgramModel& model,
                                const LambdaTable& table, const DirectOptions& options) {
  return perplexity(direct_probs(eval, store, encoder, model, table, options));
}

}  // namespace knnlm
