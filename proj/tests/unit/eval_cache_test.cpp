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

#include "knnlm/eval_cache.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "knnlm/pipeline.hpp"
#include "test_util.hpp"

namespace knnlm {
namespace {

CacheBuildOptions with_k(size_t k, size_t threads = 1) {
  CacheBuildOptions o;
  o.k = k;
  o.threads = threads;
  return o;
}

// Small train/eval pair with a shared vocabulary and the models built on it.
struct Fixture {
  TokenStream train, eval;
  DenseEncoder encoder{{.dim = 32}};
  NgramModel model;
  Datastore store;
  std::vector<double> base;

  explicit Fixture(uint64_t seed, size_t eval_docs = 40) {
    std::mt19937_64 rng(seed);
    train = testing::random_stream(rng, 30, 120, 2, 60);
    eval = testing::random_stream(rng, 30, eval_docs, 2, 48);
    model = NgramModel::train(train);
    store = build_datastore(train, encoder);
    base = base_logprobs(model, eval);
  }

  EvalCache cache(size_t k, const std::string& path = {}) const {
    return build_cache(eval, store, base, QueryEncoder{&encoder, nullptr},
                       with_k(k), path);
  }
};

EvalCache subset_cache(const EvalCache& cache, std::span<const size_t> rows) {
  EvalCacheHeader h = cache.header();
  h.count = rows.size();
  EvalCacheWriter w(h);
  for (size_t i = 0; i < rows.size(); ++i) {
    EvalRecord r = cache.record(rows[i]).materialize();
    r.token_index = i;
    w.add(r);
  }
  return w.take();
}

TEST(EvalCacheBuild, OneRecordPerPredictedToken) {
  Fixture f(1);
  f.eval = testing::make_stream(30, {{1, 2, 3, 4, 5}});
  f.base = base_logprobs(f.model, f.eval);
  const EvalCache c = f.cache(8);
  EXPECT_EQ(c.size(), 4u);
  c.validate();
  for (size_t i = 0; i < 4; ++i) {
    const RecordView r = c.record(i);
    EXPECT_EQ(r.token_index(), i);
    EXPECT_EQ(r.gold_id(), static_cast<TokenId>(i + 2));
    EXPECT_EQ(r.base_logprob(), f.base[i]);
    EXPECT_EQ(r.k(), 8u);
  }
  EXPECT_EQ(Fixture(2).cache(4).size(), Fixture(2).eval.predicted_count());
}

TEST(EvalCacheBuild, RecordsMatchDirectSearch) {
  const Fixture f(3, 10);
  const EvalCache c = f.cache(16);
  const auto positions = f.eval.predicted_positions();
  for (size_t i = 0; i < c.size(); ++i) {
    const uint64_t p = positions[i];
    const uint64_t start = f.eval.doc_begin(f.eval.doc_of(p));
    const auto nb = search(f.store,
                           f.encoder.encode(std::span<const TokenId>(f.eval.tokens).subspan(
                               start, p - start)),
                           16);
    const EvalRecord r = c.record(i).materialize();
    ASSERT_EQ(r.k(), nb.size());
    for (size_t j = 0; j < nb.size(); ++j) {
      EXPECT_EQ(r.distances[j], static_cast<float>(nb.distances[j]));
      EXPECT_EQ(r.values[j], nb.values[j]);
      EXPECT_EQ(r.positions[j], nb.positions[j]);
    }
  }
}

TEST(EvalCacheBuild, RebuildIsBitIdentical) {
  testing::TempDir dir;
  const Fixture f(4);
  f.cache(32, dir.file("a.cache"));
  Fixture(4).cache(32, dir.file("b.cache"));
  const auto a = FileBytes::open(dir.file("a.cache"));
  const auto b = FileBytes::open(dir.file("b.cache"));
  ASSERT_EQ(a.bytes().size(), b.bytes().size());
  EXPECT_TRUE(std::ranges::equal(a.bytes(), b.bytes()));
  const EvalCache mem = f.cache(32);
  EXPECT_EQ(EvalCache::open(dir.file("a.cache")).header(), mem.header());
}

TEST(EvalCacheBuild, ThreadCountDoesNotChangeBytes) {
  testing::TempDir dir;
  const Fixture f(5);
  for (size_t t : {1u, 3u}) {
    build_cache(f.eval, f.store, f.base, QueryEncoder{&f.encoder, nullptr},
                with_k(16, t), dir.file("t" + std::to_string(t)));
  }
  const auto a = FileBytes::open(dir.file("t1"));
  const auto b = FileBytes::open(dir.file("t3"));
  EXPECT_TRUE(std::ranges::equal(a.bytes(), b.bytes()));
}

TEST(EvalCacheBuild, StoreSmallerThanKPadsRecords) {
  Fixture f(6, 3);
  f.store = build_datastore(testing::make_stream(30, {{1, 2, 3}}), f.encoder);
  const EvalCache c = f.cache(10);
  c.validate();
  EXPECT_EQ(c.record(0).k(), 2u);
  EXPECT_EQ(c.k(), 10u);
}

TEST(EvalCacheBuild, Errors) {
  const Fixture f(7, 5);
  const DenseEncoder other({.dim = 32, .seed = 99});
  EXPECT_THROW(build_cache(f.eval, f.store, f.base, QueryEncoder{&other, nullptr},
                           with_k(4)),
               Error);
  EXPECT_THROW(build_cache(f.eval, f.store, std::span(f.base).first(f.base.size() - 1),
                           QueryEncoder{&f.encoder, nullptr}, with_k(4)),
               Error);
  EXPECT_THROW(build_cache(f.eval, f.store, f.base, QueryEncoder{}, with_k(4)),
               Error);
  EXPECT_THROW(f.cache(0), Error);
}

TEST(EvalCacheBuild, EmittedQueriesReproduceCache) {
  testing::TempDir dir;
  const Fixture f(8, 10);
  CacheBuildOptions opts = with_k(8);
  opts.emit_queries_path = dir.file("q.vec");
  const EvalCache dense =
      build_cache(f.eval, f.store, f.base, QueryEncoder{&f.encoder, nullptr}, opts);
  const VectorMatrix q = import_vectors(dir.file("q.vec"), 32);
  EXPECT_EQ(q.count, dense.size());
  Datastore imported = f.store;
  imported.encoder_tag = imported_encoder_tag(32);
  const EvalCache again =
      build_cache(f.eval, imported, f.base, QueryEncoder{nullptr, &q}, with_k(8));
  for (size_t i = 0; i < dense.size(); ++i) {
    EXPECT_EQ(dense.record(i).materialize(), again.record(i).materialize());
  }
}

TEST(EvalCacheFile, TruncationAndCorruptionDetected) {
  testing::TempDir dir;
  const Fixture f(9, 5);
  f.cache(4, dir.file("c"));
  const auto size = std::filesystem::file_size(dir.file("c"));
  std::filesystem::copy_file(dir.file("c"), dir.file("short"));
  std::filesystem::resize_file(dir.file("short"), size - 1);
  try {
    EvalCache::open(dir.file("short"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos) << e.what();
  }
  std::filesystem::resize_file(dir.file("short"), 10);
  EXPECT_THROW(EvalCache::open(dir.file("short")), Error);

  // Second record: swap in a NaN distance at rank 0.
  const EvalCache good = EvalCache::open(dir.file("c"));
  const size_t offset = kCacheHeaderSize + good.header().record_size() + 22;
  {
    std::fstream out(dir.file("c"), std::ios::in | std::ios::out | std::ios::binary);
    out.seekp(static_cast<std::streamoff>(offset));
    const float nan = std::nanf("");
    out.write(reinterpret_cast<const char*>(&nan), sizeof nan);
  }
  const EvalCache bad = EvalCache::open(dir.file("c"));
  try {
    bad.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("record 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(rescore(bad, 0.5), Error);
}

TEST(EvalCacheWriter, RejectsOutOfOrderAndMiscount) {
  EvalCacheHeader h{.vocab_size = 10, .k = 2, .count = 2};
  EvalCacheWriter w(h);
  const std::vector<float> d{0.1f, 0.2f};
  const std::vector<TokenId> v{1, 2};
  const std::vector<uint64_t> p{5, 6};
  EXPECT_THROW(w.add(1, 3, -1.0, d, v, p), Error);
  w.add(0, 3, -1.0, d, v, p);
  EXPECT_THROW(w.add(1, 10, -1.0, d, v, p), Error);
  EXPECT_THROW(w.add(1, 3, 0.5, d, v, p), Error);
  EXPECT_THROW(w.take(), Error);
}

TEST(Rescore, ZeroLambdaIsBaseExactly) {
  const Fixture f(10);
  const EvalCache c = f.cache(16);
  EXPECT_EQ(rescore(c, 0.0), perplexity_from_logprobs(f.base));
  EXPECT_EQ(rescore(c, LambdaTable::constant(0.0)), perplexity_from_logprobs(f.base));
}

TEST(Rescore, MatchesDirectPipeline) {
  // About 1k predicted tokens.
  const Fixture f(11, 42);
  ASSERT_GT(f.eval.predicted_count(), 900u);
  const EvalCache c = f.cache(32);
  for (double lambda : {0.05, 0.25, 0.7}) {
    const LambdaTable t = LambdaTable::constant(lambda);
    const double cached = rescore(c, lambda);
    const double f32 = direct_perplexity(f.eval, f.store, f.encoder, f.model, t,
                                         DirectOptions{.k = 32, .f32_distances = true});
    EXPECT_NEAR(cached, f32, 1e-9 * f32);
    const double f64 = direct_perplexity(f.eval, f.store, f.encoder, f.model, t,
                                         DirectOptions{.k = 32});
    EXPECT_NEAR(cached, f64, 1e-6 * f64);
  }
  // Adaptive tables go through the same lookup on both paths.
  const auto in = scoring_inputs(c, SimilarityKind::kDense);
  LambdaTable t;
  t.partition = make_partition(in.similarity, 4);
  t.lambdas = {0.6, 0.4, 0.2, 0.1};
  const double direct = direct_perplexity(f.eval, f.store, f.encoder, f.model, t,
                                          DirectOptions{.k = 32, .f32_distances = true});
  EXPECT_NEAR(rescore(c, t), direct, 1e-9 * direct);
}

TEST(Rescore, SmallerKUsesPrefix) {
  const Fixture f(12, 10);
  const EvalCache c64 = f.cache(64);
  const EvalCache c8 = f.cache(8);
  const auto a = scoring_inputs(c64, SimilarityKind::kDense, 8);
  const auto b = scoring_inputs(c8, SimilarityKind::kDense);
  EXPECT_EQ(a.knn_prob, b.knn_prob);
  EXPECT_EQ(a.similarity, b.similarity);
  EXPECT_EQ(rescore(c64, 0.3, 8), rescore(c8, 0.3));
  try {
    scoring_inputs(c8, SimilarityKind::kDense, 64);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("exceeds cached k=8"), std::string::npos);
  }
}

TEST(Rescore, BucketSubsetMatchesDecomposition) {
  const Fixture f(13);
  const EvalCache c = f.cache(16);
  const auto in = scoring_inputs(c, SimilarityKind::kDense);
  const BucketPartition p = make_partition(in.similarity, 4);
  for (uint32_t j = 0; j < 4; ++j) {
    std::vector<size_t> rows;
    for (size_t i = 0; i < in.size(); ++i) {
      if (p.assign(in.similarity[i]) == j) rows.push_back(i);
    }
    const EvalCache sub = subset_cache(c, rows);
    long double nll = 0.0L;
    for (size_t r : rows) nll -= interpolated_logprob(in.knn_prob[r], in.base_logprob[r], 0.4);
    const double expect = static_cast<double>(std::exp(nll / rows.size()));
    EXPECT_NEAR(rescore(sub, 0.4), expect, 1e-12 * expect);
    EXPECT_EQ(rescore(sub, 0.4), static_perplexity(in.subset(rows), 0.4));
  }
}

TEST(Rescore, TfidfSimilarityFromStoredPositions) {
  const Fixture f(14, 10);
  const EvalCache c = f.cache(4);
  const TfidfContext ctx = TfidfContext::make(f.train, f.eval);
  const auto in = scoring_inputs(c, SimilarityKind::kTfidf, 0, &ctx);
  const auto positions = f.eval.predicted_positions();
  const IdfTable idf = build_idf(f.train);
  for (size_t i = 0; i < in.size(); ++i) {
    EXPECT_GE(in.similarity[i], 0.0);
    EXPECT_LE(in.similarity[i], 1.0);
    const auto q = trailing_window(f.eval, positions[i]);
    const auto n = trailing_window(f.train, c.record(i).position(0));
    EXPECT_EQ(in.similarity[i], cosine_similarity(encode_tfidf(q, idf), encode_tfidf(n, idf)));
  }
  EXPECT_EQ(in.kind, SimilarityKind::kTfidf);
  EXPECT_THROW(scoring_inputs(c, SimilarityKind::kTfidf), Error);
  const TfidfContext wrong = TfidfContext::make(f.train, f.train);
  EXPECT_THROW(scoring_inputs(c, SimilarityKind::kTfidf, 0, &wrong), Error);
}

TEST(Rescore, IdenticalWindowsHaveUnitTfidf) {
  // Eval is a copy of a train document, so its exact-context neighbors are
  // the train positions with the same prefix.
  Fixture f(15);
  f.train = testing::make_stream(30, {{1, 2, 3, 4, 5, 6, 7, 8}, {9, 9, 9, 9}});
  f.eval = testing::make_stream(30, {{1, 2, 3, 4, 5, 6, 7, 8}});
  f.model = NgramModel::train(f.train);
  f.store = build_datastore(f.train, f.encoder);
  f.base = base_logprobs(f.model, f.eval);
  const EvalCache c = f.cache(1);
  const TfidfContext ctx = TfidfContext::make(f.train, f.eval);
  const auto in = scoring_inputs(c, SimilarityKind::kTfidf, 0, &ctx);
  for (size_t i = 0; i < in.size(); ++i) {
    EXPECT_EQ(c.record(i).distance(0), 0.0f);
    EXPECT_NEAR(in.similarity[i], 1.0, 1e-12);
    EXPECT_EQ(in.knn_prob[i], 1.0);
  }
}

TEST(TuneCache, MatchesInputsPath) {
  const Fixture f(16);
  const EvalCache c = f.cache(16);
  const auto grid = default_lambda_grid();
  const auto bs = default_b_grid();
  const TuneResult a = tune(c, bs, grid, SimilarityKind::kDense);
  const TuneResult b = tune(scoring_inputs(c, SimilarityKind::kDense), bs, grid);
  EXPECT_EQ(a.table, b.table);
  EXPECT_EQ(rescore(c, a.table), a.dev_ppl);
}

}  // namespace
}  // namespace knnlm
