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

// Adaptive interpolation coefficient: queries are split into equal-size
// buckets by the similarity of their top retrieved item, each bucket gets
// its own grid-searched coefficient, and the bucket count is chosen on a
// held-out half of the validation data.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "knnlm/binary_io.hpp"
#include "knnlm/encoder.hpp"
#include "knnlm/error.hpp"
#include "knnlm/parallel.hpp"
#include "knnlm/scorer.hpp"

namespace knnlm {

// Higher is better. 0 is the maximum (an exact key match).
inline double dense_similarity(double top_distance) { return -top_distance; }

inline double tfidf_similarity(std::span<const TokenId> query_window,
                               std::span<const TokenId> neighbor_window, const IdfTable& idf) {
  return cosine_similarity(encode_tfidf(query_window, idf), encode_tfidf(neighbor_window, idf));
}

// b buckets over similarity. boundaries[j-1] is the largest similarity in
// bucket j (j = 1..b-1); bucket 0 holds the most similar queries.
struct BucketPartition {
  uint32_t b = 1;
  std::vector<double> boundaries;  // descending, size b-1
  SimilarityKind kind = SimilarityKind::kDense;

  // Bucket j covers (boundaries[j], boundaries[j-1]] with the outer
  // boundaries at -inf and +inf: the number of boundaries >= similarity.
  // Binary search, O(log b).
  uint32_t assign(double similarity) const {
    auto it = std::partition_point(boundaries.begin(), boundaries.end(),
                                   [similarity](double x) { return x >= similarity; });
    return static_cast<uint32_t>(it - boundaries.begin());
  }

  bool operator==(const BucketPartition&) const = default;
};

// Sorts descending and cuts at ranks floor(j*n/b): the query at each cut
// rank opens bucket j.
inline BucketPartition make_partition(std::span<const double> similarities, uint32_t b,
                                      SimilarityKind kind = SimilarityKind::kDense) {
  if (b < 1) throw Error("make_partition: b must be >= 1");
  if (similarities.empty()) throw Error("make_partition: no similarities");
  if (b > similarities.size()) {
    throw Error("make_partition: b=" + std::to_string(b) + " exceeds " +
                std::to_string(similarities.size()) + " queries");
  }
  std::vector<double> sorted(similarities.begin(), similarities.end());
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  BucketPartition p;
  p.b = b;
  p.kind = kind;
  const uint64_t n = sorted.size();
  for (uint64_t j = 1; j < b; ++j) p.boundaries.push_back(sorted[j * n / b]);
  return p;
}

inline uint32_t assign_bucket(const BucketPartition& partition, double similarity) {
  return partition.assign(similarity);
}

struct LambdaTable {
  BucketPartition partition;
  std::vector<double> lambdas;  // one per bucket

  double lambda_for(double similarity) const { return lambdas[partition.assign(similarity)]; }

  static LambdaTable constant(double lambda, SimilarityKind kind = SimilarityKind::kDense) {
    LambdaTable t;
    t.partition.kind = kind;
    t.lambdas = {lambda};
    return t;
  }

  void validate() const {
    if (partition.b < 1 || partition.boundaries.size() + 1 != partition.b ||
        lambdas.size() != partition.b) {
      throw Error("lambda table: inconsistent bucket count");
    }
    for (size_t j = 1; j < partition.boundaries.size(); ++j) {
      if (partition.boundaries[j] > partition.boundaries[j - 1]) {
        throw Error("lambda table: boundaries must be descending");
      }
    }
    for (double l : lambdas) {
      if (!(l >= 0.0 && l <= 1.0)) throw Error("lambda table: coefficient outside [0, 1]");
    }
  }

  // Header "b=<int> kind=<dense|tfidf>", then b-1 boundaries, then b
  // coefficients, one per line with 17 significant digits.
  std::string serialize() const {
    std::string out = "b=" + std::to_string(partition.b) + " kind=" +
                      std::string(to_string(partition.kind)) + "\n";
    char buf[64];
    for (double x : partition.boundaries) {
      std::snprintf(buf, sizeof buf, "%.17g\n", x);
      out += buf;
    }
    for (double x : lambdas) {
      std::snprintf(buf, sizeof buf, "%.17g\n", x);
      out += buf;
    }
    return out;
  }

  static LambdaTable parse(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string header;
    if (!std::getline(in, header)) throw Error("lambda table: missing header");
    unsigned b = 0;
    char kind[16] = {};
    if (std::sscanf(header.c_str(), "b=%u kind=%15s", &b, kind) != 2 || b < 1) {
      throw Error("lambda table: malformed header '" + header + "'");
    }
    LambdaTable t;
    t.partition.b = b;
    t.partition.kind = parse_similarity_kind(kind);
    auto next = [&](const char* what) {
      std::string line;
      if (!std::getline(in, line)) throw Error(std::string("lambda table: missing ") + what);
      char* end = nullptr;
      const double v = std::strtod(line.c_str(), &end);
      if (end == line.c_str()) throw Error("lambda table: bad number '" + line + "'");
      return v;
    };
    for (unsigned j = 1; j < b; ++j) t.partition.boundaries.push_back(next("boundary"));
    for (unsigned j = 0; j < b; ++j) t.lambdas.push_back(next("coefficient"));
    t.validate();
    return t;
  }

  void save(const std::string& path) const { write_text_file(path, serialize()); }
  static LambdaTable load(const std::string& path) { return parse(read_text_file(path)); }

  bool operator==(const LambdaTable&) const = default;
};

// ---------------------------------------------------------------------------
// Grids

// {0.05, 0.10, ..., 0.95}
inline std::vector<double> default_lambda_grid(bool include_zero = false) {
  std::vector<double> g;
  if (include_zero) g.push_back(0.0);
  for (int i = 1; i <= 19; ++i) g.push_back(i * 5 / 100.0);
  return g;
}

inline std::vector<uint32_t> default_b_grid() { return {1, 2, 4, 8, 16, 32, 64, 128}; }

// "start:stop:step" or a comma-separated list. Values are rounded to 12
// decimals so 0.05:0.95:0.05 yields exactly the literals 0.05 ... 0.95.
inline std::vector<double> parse_lambda_grid(std::string_view spec) {
  auto to_double = [](std::string_view s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw Error("lambda grid: bad number '" + std::string(s) + "'");
    }
    return v;
  };
  auto clean = [](double v) { return std::round(v * 1e12) / 1e12; };
  std::vector<double> out;
  if (spec.find(':') != std::string_view::npos) {
    const size_t c1 = spec.find(':'), c2 = spec.find(':', c1 + 1);
    if (c2 == std::string_view::npos) throw Error("lambda grid: expected start:stop:step");
    const double start = to_double(spec.substr(0, c1));
    const double stop = to_double(spec.substr(c1 + 1, c2 - c1 - 1));
    const double step = to_double(spec.substr(c2 + 1));
    if (!(step > 0.0)) throw Error("lambda grid: step must be positive");
    for (int i = 0;; ++i) {
      const double v = clean(start + i * step);
      if (v > stop + 1e-9) break;
      out.push_back(v);
    }
  } else {
    size_t pos = 0;
    while (pos <= spec.size()) {
      size_t comma = spec.find(',', pos);
      if (comma == std::string_view::npos) comma = spec.size();
      out.push_back(clean(to_double(spec.substr(pos, comma - pos))));
      pos = comma + 1;
    }
  }
  for (double v : out) {
    if (!(v >= 0.0 && v <= 1.0)) throw Error("lambda grid: value outside [0, 1]");
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw Error("lambda grid: empty");
  return out;
}

inline std::vector<uint32_t> parse_b_grid(std::string_view spec) {
  std::vector<uint32_t> out;
  size_t pos = 0;
  while (pos <= spec.size()) {
    size_t comma = spec.find(',', pos);
    if (comma == std::string_view::npos) comma = spec.size();
    const auto item = spec.substr(pos, comma - pos);
    uint32_t v = 0;
    auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc() || p != item.data() + item.size() || v == 0) {
      throw Error("b grid: bad bucket count '" + std::string(item) + "'");
    }
    out.push_back(v);
    pos = comma + 1;
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Grid search

namespace detail {

// Per-token negative log-likelihoods are rounded to multiples of 2^-40 and
// summed as integers. Sums are then exact and order-free, so refining a
// partition can never lose to the coarser optimum through rounding.
inline constexpr double kNllScale = 1099511627776.0;  // 2^40

inline int64_t quantize_nll(double logprob, size_t record) {
  if (!std::isfinite(logprob) || logprob > 0.0) {
    throw Error("tune: invalid interpolated probability at record " + std::to_string(record));
  }
  return std::llround(-logprob * kNllScale);
}

// Row-major records x grid matrix of quantized NLLs.
struct NllMatrix {
  size_t records = 0;
  size_t grid = 0;
  std::vector<int64_t> q;

  int64_t at(size_t record, size_t g) const { return q[record * grid + g]; }
};

inline NllMatrix nll_matrix(const ScoringInputs& in, std::span<const double> grid, size_t threads) {
  NllMatrix m;
  m.records = in.size();
  m.grid = grid.size();
  m.q.resize(m.records * m.grid);
  parallel_chunks(m.records, 8192, threads, [&](size_t b, size_t e) {
    for (size_t i = b; i < e; ++i) {
      for (size_t g = 0; g < grid.size(); ++g) {
        m.q[i * m.grid + g] =
            quantize_nll(interpolated_logprob(in.knn_prob[i], in.base_logprob[i], grid[g]), i);
      }
    }
  });
  return m;
}

// First index of the minimum; grid is ascending, so ties go to the smaller
// coefficient.
inline size_t argmin_first(std::span<const __int128> sums) {
  size_t best = 0;
  for (size_t g = 1; g < sums.size(); ++g) {
    if (sums[g] < sums[best]) best = g;
  }
  return best;
}

struct BucketFit {
  std::vector<size_t> best;  // grid index per bucket
  __int128 total = 0;        // quantized NLL at the chosen coefficients
};

// Fits one coefficient per bucket over records [begin, end).
inline BucketFit fit_buckets(const NllMatrix& m, std::span<const uint32_t> bucket_of, size_t begin,
                             size_t end, uint32_t b) {
  std::vector<__int128> sums(static_cast<size_t>(b) * m.grid, 0);
  for (size_t i = begin; i < end; ++i) {
    __int128* row = sums.data() + static_cast<size_t>(bucket_of[i - begin]) * m.grid;
    for (size_t g = 0; g < m.grid; ++g) row[g] += m.at(i, g);
  }
  BucketFit fit;
  fit.best.resize(b);
  for (uint32_t j = 0; j < b; ++j) {
    std::span<const __int128> row(sums.data() + static_cast<size_t>(j) * m.grid, m.grid);
    fit.best[j] = argmin_first(row);
    fit.total += row[fit.best[j]];
  }
  return fit;
}

inline double quantized_perplexity(__int128 total, size_t n) {
  return std::exp(static_cast<double>(total) / kNllScale / static_cast<double>(n));
}

inline std::vector<double> sorted_grid(std::span<const double> grid) {
  if (grid.empty()) throw Error("grid search: empty lambda grid");
  std::vector<double> g(grid.begin(), grid.end());
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  for (double l : g) {
    if (!(l >= 0.0 && l <= 1.0)) throw Error("grid search: lambda outside [0, 1]");
  }
  return g;
}

}  // namespace detail

// Coefficient in `grid` minimizing perplexity over `in`; ties go to the
// smaller coefficient.
inline double grid_search_lambda(const ScoringInputs& in, std::span<const double> grid,
                                 size_t threads = 1) {
  if (in.size() == 0) throw Error("grid search: empty slice");
  const auto g = detail::sorted_grid(grid);
  const auto m = detail::nll_matrix(in, g, threads);
  std::vector<uint32_t> zeros(in.size(), 0);
  return g[detail::fit_buckets(m, zeros, 0, in.size(), 1).best[0]];
}

inline std::vector<double> adaptive_logprobs(const ScoringInputs& in, const LambdaTable& table) {
  if (in.kind != table.partition.kind) {
    throw Error("score_adaptive: table kind " + std::string(to_string(table.partition.kind)) +
                " does not match inputs kind " + std::string(to_string(in.kind)));
  }
  std::vector<double> lp(in.size());
  for (size_t i = 0; i < in.size(); ++i) {
    lp[i] = interpolated_logprob(in.knn_prob[i], in.base_logprob[i],
                                 table.lambda_for(in.similarity[i]));
  }
  return lp;
}

inline double score_adaptive(const ScoringInputs& in, const LambdaTable& table) {
  return perplexity_from_logprobs(adaptive_logprobs(in, table));
}

struct TuneRow {
  uint32_t b = 0;
  bool skipped = false;
  double dev0_ppl = 0.0;  // fitted on Dev0, scored on Dev0
  double dev1_ppl = 0.0;  // fitted on Dev0, scored on Dev1
  double dev_ppl = 0.0;   // refit on all of dev, scored on dev
  LambdaTable dev0_table;
  LambdaTable dev_table;
};

struct TuneResult {
  uint32_t chosen_b = 0;
  LambdaTable table;  // refit on all of dev at chosen_b
  double dev_ppl = 0.0;
  std::vector<TuneRow> rows;
  std::vector<std::string> warnings;

  const TuneRow* row(uint32_t b) const {
    for (const auto& r : rows) {
      if (r.b == b && !r.skipped) return &r;
    }
    return nullptr;
  }
};

namespace detail {

inline LambdaTable fit_table(const ScoringInputs& dev, const NllMatrix& m, size_t begin, size_t end,
                             uint32_t b, std::span<const double> grid, __int128* total = nullptr) {
  std::span<const double> sims(dev.similarity.data() + begin, end - begin);
  LambdaTable t;
  t.partition = make_partition(sims, b, dev.kind);
  std::vector<uint32_t> bucket_of(end - begin);
  for (size_t i = 0; i < bucket_of.size(); ++i) bucket_of[i] = t.partition.assign(sims[i]);
  const BucketFit fit = fit_buckets(m, bucket_of, begin, end, b);
  for (size_t gi : fit.best) t.lambdas.push_back(grid[gi]);
  if (total) *total = fit.total;
  return t;
}

}  // namespace detail

// Chooses the bucket count: for each b, boundaries and per-bucket
// coefficients are fit on the first half of dev (Dev0) and scored on the
// second half (Dev1); the b with the lowest Dev1 perplexity wins (ties to
// the smaller b) and is refit on all of dev.
inline TuneResult tune(const ScoringInputs& dev, std::span<const uint32_t> b_grid,
                       std::span<const double> lambda_grid, size_t threads = 1) {
  dev.validate();
  const size_t n = dev.size();
  const size_t n0 = n / 2;
  if (n0 < 1) throw Error("tune: need at least 2 dev records");
  if (b_grid.empty()) throw Error("tune: empty b grid");
  const auto grid = detail::sorted_grid(lambda_grid);
  std::vector<uint32_t> bs(b_grid.begin(), b_grid.end());
  std::sort(bs.begin(), bs.end());
  bs.erase(std::unique(bs.begin(), bs.end()), bs.end());

  const auto m = detail::nll_matrix(dev, grid, threads);
  const ScoringInputs dev1 = dev.slice(n0, n);

  TuneResult result;
  const TuneRow* best = nullptr;
  result.rows.reserve(bs.size());
  for (uint32_t b : bs) {
    TuneRow row;
    row.b = b;
    if (b < 1 || b > n0) {
      row.skipped = true;
      result.warnings.push_back("b=" + std::to_string(b) + " skipped: exceeds Dev0 size " +
                                std::to_string(n0));
      result.rows.push_back(std::move(row));
      continue;
    }
    __int128 dev0_total = 0;
    row.dev0_table = detail::fit_table(dev, m, 0, n0, b, grid, &dev0_total);
    row.dev0_ppl = detail::quantized_perplexity(dev0_total, n0);
    row.dev1_ppl = score_adaptive(dev1, row.dev0_table);
    row.dev_table = detail::fit_table(dev, m, 0, n, b, grid);
    row.dev_ppl = score_adaptive(dev, row.dev_table);
    result.rows.push_back(std::move(row));
  }
  for (const auto& row : result.rows) {
    if (!row.skipped && (!best || row.dev1_ppl < best->dev1_ppl)) best = &row;
  }
  if (!best) throw Error("tune: every bucket count exceeds the Dev0 size");
  result.chosen_b = best->b;
  result.table = best->dev_table;
  result.dev_ppl = best->dev_ppl;
  return result;
}

}  // namespace knnlm
