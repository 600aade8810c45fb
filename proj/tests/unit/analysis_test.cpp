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

#include "knnlm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace knnlm {
namespace {

// Knn helps exactly when the similarity is above the median.
ScoringInputs median_fixture(std::mt19937_64& rng, size_t n) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ScoringInputs in;
  for (size_t i = 0; i < n; ++i) {
    const double sim = -u(rng);
    in.push_back(sim, sim > -0.5 ? 0.9 : 0.0, std::log(0.1 + 0.2 * u(rng)));
  }
  return in;
}

// In-memory cache of random records over a small vocabulary.
EvalCache random_cache(std::mt19937_64& rng, size_t n, uint16_t k, uint32_t vocab = 12) {
  EvalCacheHeader h{.vocab_size = vocab, .k = k, .count = n};
  EvalCacheWriter w(h);
  std::uniform_real_distribution<float> u(0.0f, 1.5f);
  std::uniform_int_distribution<TokenId> tok(0, vocab - 1);
  std::vector<float> d(k);
  std::vector<TokenId> v(k);
  std::vector<uint64_t> p(k, 0);
  for (size_t i = 0; i < n; ++i) {
    for (auto& x : d) x = u(rng);
    std::sort(d.begin(), d.end());
    for (auto& x : v) x = tok(rng);
    TokenId gold = tok(rng);
    if (d[0] < 0.5f) gold = v[0];  // close neighbors tend to be right
    w.add(i, gold, std::log(1.0 / vocab) - 0.1 * u(rng), d, v, p);
  }
  return w.take();
}

TEST(Curve, MedianFixtureHelpsOnTopOnly) {
  std::mt19937_64 rng(1);
  const ScoringInputs in = median_fixture(rng, 4000);
  const auto curve = bucket_improvement_curve(in, 0.5, 20);
  ASSERT_EQ(curve.size(), 20u);
  for (size_t j = 0; j < 8; ++j) EXPECT_GT(curve[j].totals.improvement(), 0.0) << j;
  for (size_t j = 12; j < 20; ++j) EXPECT_LT(curve[j].totals.improvement(), 0.0) << j;
  for (size_t j = 1; j < 20; ++j) EXPECT_LE(curve[j].similarity_max, curve[j - 1].similarity_min);
}

TEST(Curve, SingleBucketIsOverall) {
  std::mt19937_64 rng(2);
  const ScoringInputs in = median_fixture(rng, 1000);
  const auto curve = bucket_improvement_curve(in, 0.3, 1);
  ASSERT_EQ(curve.size(), 1u);
  const double overall = relative_improvement(base_perplexity(in), static_perplexity(in, 0.3));
  EXPECT_NEAR(curve[0].totals.improvement(), overall, 1e-9);
  EXPECT_EQ(curve[0].totals.count, 1000u);
}

TEST(Curve, BucketCountsDifferByAtMostOne) {
  std::mt19937_64 rng(3);
  const ScoringInputs in = median_fixture(rng, 1013);
  for (size_t b : {3u, 20u, 64u}) {
    const auto curve = bucket_improvement_curve(in, 0.5, b);
    size_t lo = SIZE_MAX, hi = 0, total = 0;
    for (const auto& c : curve) {
      lo = std::min(lo, c.totals.count);
      hi = std::max(hi, c.totals.count);
      total += c.totals.count;
    }
    EXPECT_LE(hi - lo, 1u);
    EXPECT_EQ(total, 1013u);
  }
  EXPECT_THROW(bucket_improvement_curve(in, 0.5, 0), Error);
  EXPECT_THROW(bucket_improvement_curve(in, 0.5, 2000), Error);
}

TEST(Curve, TsvHasHeaderAndRows) {
  std::mt19937_64 rng(4);
  const auto tsv = curve_tsv(bucket_improvement_curve(median_fixture(rng, 100), 0.5, 4));
  EXPECT_EQ(std::count(tsv.begin(), tsv.end(), '\n'), 6);
  EXPECT_NE(tsv.find("improvement_pct"), std::string::npos);
  EXPECT_NE(tsv_to_table(tsv).find("sim_max"), std::string::npos);
}

TEST(Groups, SingleLabelEqualsOverall) {
  std::mt19937_64 rng(5);
  const ScoringInputs in = median_fixture(rng, 500);
  const std::vector<std::string> labels(500, "NOUN");
  const GroupReport rep = group_report(in, labels, 0.4, 1);
  ASSERT_EQ(rep.groups.size(), 1u);
  EXPECT_EQ(rep.groups[0].totals.count, 500u);
  EXPECT_EQ(rep.groups[0].totals.base_nll, rep.overall.base_nll);
  EXPECT_EQ(rep.groups[0].totals.variant_nll, rep.overall.variant_nll);
  EXPECT_NEAR(rep.overall.base_ppl(), base_perplexity(in), 1e-9);
  EXPECT_NEAR(rep.overall.variant_ppl(), static_perplexity(in, 0.4), 1e-9);
}

TEST(Groups, TwoLabelsDecomposeOverall) {
  std::mt19937_64 rng(6);
  const ScoringInputs in = median_fixture(rng, 3000);
  std::vector<std::string> labels(3000);
  for (size_t i = 0; i < 3000; ++i) labels[i] = rng() % 3 == 0 ? "VERB" : "DET";
  const GroupReport rep = group_report(in, labels, 0.25, 1);
  ASSERT_EQ(rep.groups.size(), 2u);
  EXPECT_EQ(rep.groups[0].label, "DET");
  double weighted_base = 0.0, weighted_var = 0.0;
  for (const auto& g : rep.groups) {
    weighted_base += g.totals.count * std::log(g.totals.base_ppl());
    weighted_var += g.totals.count * std::log(g.totals.variant_ppl());
  }
  EXPECT_NEAR(std::exp(weighted_base / 3000), base_perplexity(in), 1e-9);
  EXPECT_NEAR(std::exp(weighted_var / 3000), static_perplexity(in, 0.25), 1e-9);
}

TEST(Groups, RareLabelsOmitted) {
  std::mt19937_64 rng(7);
  const ScoringInputs in = median_fixture(rng, 100);
  std::vector<std::string> labels(100, "A");
  labels[3] = labels[50] = "B";
  labels[7] = "C";
  const GroupReport rep = group_report(in, labels, 0.5, 3);
  ASSERT_EQ(rep.groups.size(), 1u);
  EXPECT_EQ(rep.groups[0].label, "A");
  EXPECT_EQ(rep.omitted_groups, 2u);
  EXPECT_EQ(rep.omitted_tokens, 3u);
  EXPECT_EQ(rep.overall.count, 100u);
  EXPECT_NE(group_tsv(rep).find("# omitted 2 groups (3 tokens)"), std::string::npos);
}

TEST(Groups, LabelCountMustMatch) {
  std::mt19937_64 rng(8);
  const ScoringInputs in = median_fixture(rng, 10);
  EXPECT_THROW(group_report(in, std::vector<std::string>(9, "A"), 0.5, 1), Error);
  const TokenStream eval = testing::make_stream(5, {{1, 2, 3}, {4, 1}});
  const std::vector<std::string> tok{"a", "b", "c", "d", "e"};
  EXPECT_EQ(labels_for_records(eval, tok), (std::vector<std::string>{"b", "c", "e"}));
  EXPECT_THROW(labels_for_records(eval, std::vector<std::string>(4, "x")), Error);
}

TEST(Groups, DefaultMinCountScales) {
  EXPECT_EQ(default_min_count(217000), 1000u);
  EXPECT_EQ(default_min_count(21700), 100u);
  EXPECT_EQ(default_min_count(10), 1u);
}

TEST(Groups, ReadLabelsOnePerLine) {
  testing::TempDir dir;
  write_text_file(dir.file("l.txt"), "NOUN\nVERB\n\nDET\n");
  EXPECT_EQ(read_labels(dir.file("l.txt")), (std::vector<std::string>{"NOUN", "VERB", "", "DET"}));
}

TEST(Ablation, SingleBucketEqualsStaticSearch) {
  std::mt19937_64 rng(9);
  const EvalCache c = random_cache(rng, 2000, 16);
  const std::vector<SimilarityKind> kinds{SimilarityKind::kDense};
  const std::vector<size_t> ks{16};
  const std::vector<uint32_t> one{1};
  const auto grid = default_lambda_grid();
  const auto cells = ablation_grid(c, kinds, ks, one, grid);
  ASSERT_EQ(cells.size(), 1u);
  const auto in = scoring_inputs(c, SimilarityKind::kDense);
  const double expect = static_perplexity(in, grid_search_lambda(in, grid));
  EXPECT_EQ(cells[0].dev_ppl, expect);
  EXPECT_EQ(cells[0].static_dev_ppl, expect);
  EXPECT_EQ(cells[0].chosen_b, 1u);
}

TEST(Ablation, GridCoversRequestedCells) {
  std::mt19937_64 rng(10);
  const EvalCache c = random_cache(rng, 3000, 64);
  const std::vector<SimilarityKind> kinds{SimilarityKind::kDense};
  const std::vector<size_t> ks{1, 8, 64};
  const auto cells = ablation_grid(c, kinds, ks, default_b_grid(), default_lambda_grid());
  ASSERT_EQ(cells.size(), 3u);
  for (const auto& cell : cells) {
    EXPECT_LE(cell.dev_ppl, cell.static_dev_ppl * (1 + 1e-12));
    EXPECT_GE(cell.chosen_b, 1u);
  }
  EXPECT_EQ(ablation_tsv(cells).find("kind\tk\tchosen_b"), 0u);
  EXPECT_EQ(default_ablation_ks(), (std::vector<size_t>{1, 8, 64, 1024}));
}

TEST(Ablation, KOneIsTopNeighborIndicator) {
  std::mt19937_64 rng(11);
  const EvalCache c = random_cache(rng, 500, 8);
  const auto in = scoring_inputs(c, SimilarityKind::kDense, 1);
  for (size_t i = 0; i < c.size(); ++i) {
    const RecordView r = c.record(i);
    EXPECT_EQ(in.knn_prob[i], r.value(0) == r.gold_id() ? 1.0 : 0.0);
  }
}

TEST(Ablation, KBeyondCacheThrows) {
  std::mt19937_64 rng(12);
  const EvalCache c = random_cache(rng, 50, 8);
  const std::vector<SimilarityKind> kinds{SimilarityKind::kDense};
  const std::vector<size_t> ks{1, 1024};
  try {
    ablation_grid(c, kinds, ks, default_b_grid(), default_lambda_grid());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("k=1024 exceeds cached k=8"), std::string::npos);
  }
}

}  // namespace
}  // namespace knnlm
