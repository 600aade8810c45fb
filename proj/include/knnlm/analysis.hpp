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

// Diagnostic reports over scoring inputs: improvement by similarity
// bucket, perplexity by token label, and the similarity-kind x k grid.
//
// Relative improvement of a bucket or group is 100 * (base - variant) / base
// where both perplexities are computed over that bucket's tokens.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "knnlm/adaptive.hpp"
#include "knnlm/error.hpp"
#include "knnlm/eval_cache.hpp"
#include "knnlm/scorer.hpp"

namespace knnlm {

// Token-weighted NLL totals of one slice of the eval stream.
struct NllTotals {
  size_t count = 0;
  double base_nll = 0.0;
  double variant_nll = 0.0;

  double base_ppl() const { return std::exp(base_nll / static_cast<double>(count)); }
  double variant_ppl() const { return std::exp(variant_nll / static_cast<double>(count)); }
  double improvement() const { return relative_improvement(base_ppl(), variant_ppl()); }
};

namespace detail {

inline NllTotals totals_over(std::span<const double> base, std::span<const double> variant,
                             std::span<const size_t> rows) {
  NllTotals t;
  t.count = rows.size();
  KahanSum b, v;
  for (size_t r : rows) {
    b.add(-base[r]);
    v.add(-variant[r]);
  }
  t.base_nll = b.sum;
  t.variant_nll = v.sum;
  return t;
}

}  // namespace detail

struct CurveBucket {
  double similarity_max = 0.0;
  double similarity_min = 0.0;
  NllTotals totals;
};

// Sorts tokens by similarity (descending, ties by position), splits them
// into n_buckets rank buckets whose sizes differ by at most one, and
// reports base vs interpolated perplexity per bucket.
inline std::vector<CurveBucket> bucket_improvement_curve(const ScoringInputs& in,
                                                         const LambdaTable& table,
                                                         uint32_t n_buckets = 20) {
  in.validate();
  if (n_buckets < 1) throw Error("improvement curve: need at least one bucket");
  if (n_buckets > in.size()) throw Error("improvement curve: more buckets than tokens");
  const auto variant = adaptive_logprobs(in, table);
  std::vector<size_t> order(in.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return in.similarity[a] > in.similarity[b]; });
  std::vector<CurveBucket> out(n_buckets);
  const size_t n = in.size();
  for (uint32_t j = 0; j < n_buckets; ++j) {
    const size_t lo = j * n / n_buckets;
    const size_t hi = (j + 1) * n / n_buckets;
    std::span<const size_t> rows(order.data() + lo, hi - lo);
    out[j].similarity_max = in.similarity[rows.front()];
    out[j].similarity_min = in.similarity[rows.back()];
    out[j].totals = detail::totals_over(in.base_logprob, variant, rows);
  }
  return out;
}

inline std::vector<CurveBucket> bucket_improvement_curve(const ScoringInputs& in, double lambda,
                                                         uint32_t n_buckets = 20) {
  return bucket_improvement_curve(in, LambdaTable::constant(lambda, in.kind), n_buckets);
}

struct GroupRow {
  std::string label;
  NllTotals totals;
};

struct GroupReport {
  std::vector<GroupRow> groups;  // by descending count, then label
  NllTotals overall;             // every labeled token, omitted groups included
  size_t omitted_groups = 0;
  size_t omitted_tokens = 0;
  size_t min_count = 1;
};

// The frequency floor used when none is given: 1000 tokens per 217k,
// scaled to the eval size.
inline size_t default_min_count(size_t eval_tokens) {
  return std::max<size_t>(
      1, static_cast<size_t>(std::llround(1000.0 * static_cast<double>(eval_tokens) / 217000.0)));
}

// Labels are aligned with the scoring records.
inline GroupReport group_report(const ScoringInputs& in, std::span<const std::string> labels,
                                const LambdaTable& table, size_t min_count) {
  in.validate();
  if (labels.size() != in.size()) {
    throw Error("group report: " + std::to_string(labels.size()) + " labels for " +
                std::to_string(in.size()) + " scored tokens");
  }
  const auto variant = adaptive_logprobs(in, table);
  std::map<std::string, std::vector<size_t>, std::less<>> by_label;
  for (size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);

  GroupReport rep;
  rep.min_count = min_count;
  std::vector<size_t> all(in.size());
  std::iota(all.begin(), all.end(), size_t{0});
  rep.overall = detail::totals_over(in.base_logprob, variant, all);
  for (const auto& [label, rows] : by_label) {
    if (rows.size() < min_count) {
      ++rep.omitted_groups;
      rep.omitted_tokens += rows.size();
      continue;
    }
    rep.groups.push_back({label, detail::totals_over(in.base_logprob, variant, rows)});
  }
  std::stable_sort(rep.groups.begin(), rep.groups.end(), [](const GroupRow& a, const GroupRow& b) {
    return a.totals.count > b.totals.count;
  });
  return rep;
}

inline GroupReport group_report(const ScoringInputs& in, std::span<const std::string> labels,
                                double lambda, size_t min_count) {
  return group_report(in, labels, LambdaTable::constant(lambda, in.kind), min_count);
}

// Reads one label per line.
inline std::vector<std::string> read_labels(const std::string& path) {
  std::vector<std::string> out;
  detail::for_each_line(read_text_file(path), [&](std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.emplace_back(line);
  });
  if (!out.empty() && out.back().empty()) out.pop_back();
  return out;
}

// Maps one-label-per-eval-token to one-label-per-record (the first token of
// every document is never scored).
inline std::vector<std::string> labels_for_records(const TokenStream& eval,
                                                   std::span<const std::string> token_labels) {
  if (token_labels.size() != eval.size()) {
    throw Error("labels: " + std::to_string(token_labels.size()) + " labels for " +
                std::to_string(eval.size()) + " eval tokens");
  }
  std::vector<std::string> out;
  out.reserve(eval.predicted_count());
  for (uint64_t p : eval.predicted_positions()) out.push_back(token_labels[p]);
  return out;
}

struct AblationCell {
  SimilarityKind kind = SimilarityKind::kDense;
  size_t k = 0;
  uint32_t chosen_b = 0;
  double dev_ppl = 0.0;
  double static_dev_ppl = 0.0;  // b = 1 refit on all of dev
};

inline std::vector<size_t> default_ablation_ks() { return {1, 8, 64, 1024}; }

// Truncates every record to k neighbors and tunes, for each (kind, k).
inline std::vector<AblationCell> ablation_grid(const EvalCache& cache,
                                               std::span<const SimilarityKind> kinds,
                                               std::span<const size_t> ks,
                                               std::span<const uint32_t> b_grid,
                                               std::span<const double> lambda_grid,
                                               const TfidfContext* tfidf = nullptr,
                                               size_t threads = 1) {
  for (size_t k : ks) {
    if (k < 1 || k > cache.k()) {
      throw Error("ablation: requested k=" + std::to_string(k) + " exceeds cached k=" +
                  std::to_string(cache.k()));
    }
  }
  std::vector<AblationCell> out;
  for (SimilarityKind kind : kinds) {
    for (size_t k : ks) {
      const ScoringInputs in = scoring_inputs(cache, kind, k, tfidf, threads);
      const TuneResult chosen = tune(in, b_grid, lambda_grid, threads);
      const uint32_t one = 1;
      const TuneResult fixed = tune(in, std::span<const uint32_t>(&one, 1), lambda_grid, threads);
      out.push_back({kind, k, chosen.chosen_b, chosen.dev_ppl, fixed.dev_ppl});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report text.

namespace detail {
inline std::string fmt(double v, const char* f = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}
}  // namespace detail

inline std::string curve_tsv(std::span<const CurveBucket> curve) {
  std::string s =
      "# improvement = 100 * (base_ppl - knn_ppl) / base_ppl over each bucket's tokens\n"
      "bucket\tcount\tsim_max\tsim_min\tbase_ppl\tknn_ppl\timprovement_pct\n";
  for (size_t j = 0; j < curve.size(); ++j) {
    const auto& c = curve[j];
    s += std::to_string(j) + '\t' + std::to_string(c.totals.count) + '\t' +
         detail::fmt(c.similarity_max) + '\t' + detail::fmt(c.similarity_min) + '\t' +
         detail::fmt(c.totals.base_ppl()) + '\t' + detail::fmt(c.totals.variant_ppl()) + '\t' +
         detail::fmt(c.totals.improvement(), "%.4f") + '\n';
  }
  return s;
}

inline std::string group_tsv(const GroupReport& rep) {
  std::string s = "label\tcount\tbase_ppl\tknn_ppl\timprovement_pct\n";
  auto row = [&](const std::string& label, const NllTotals& t) {
    s += label + '\t' + std::to_string(t.count) + '\t' + detail::fmt(t.base_ppl()) + '\t' +
         detail::fmt(t.variant_ppl()) + '\t' + detail::fmt(t.improvement(), "%.4f") + '\n';
  };
  for (const auto& g : rep.groups) row(g.label, g.totals);
  row("<all>", rep.overall);
  s += "# omitted " + std::to_string(rep.omitted_groups) + " groups (" +
       std::to_string(rep.omitted_tokens) + " tokens) below min_count " +
       std::to_string(rep.min_count) + '\n';
  return s;
}

inline std::string ablation_tsv(std::span<const AblationCell> cells) {
  std::string s = "kind\tk\tchosen_b\tdev_ppl\tstatic_dev_ppl\n";
  for (const auto& c : cells) {
    s += std::string(to_string(c.kind)) + '\t' + std::to_string(c.k) + '\t' +
         std::to_string(c.chosen_b) + '\t' + detail::fmt(c.dev_ppl) + '\t' +
         detail::fmt(c.static_dev_ppl) + '\n';
  }
  return s;
}

// Column-aligned rendering of any TSV produced above; '#' lines pass through.
inline std::string tsv_to_table(std::string_view tsv) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> notes;
  detail::for_each_line(tsv, [&](std::string_view line) {
    if (line.empty()) return;
    if (line.front() == '#') {
      notes.emplace_back(line);
      return;
    }
    std::vector<std::string> cells;
    size_t start = 0;
    while (true) {
      const size_t tab = line.find('\t', start);
      cells.emplace_back(line.substr(start, tab - start));
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    rows.push_back(std::move(cells));
  });
  std::vector<size_t> width;
  for (const auto& r : rows) {
    width.resize(std::max(width.size(), r.size()), 0);
    for (size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  std::string out;
  for (const auto& n : notes) out += n + '\n';
  for (const auto& r : rows) {
    for (size_t c = 0; c < r.size(); ++c) {
      out += r[c];
      if (c + 1 < r.size()) out += std::string(width[c] - r[c].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

}  // namespace knnlm
