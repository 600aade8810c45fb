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

// Command-line driver for the kNN-LM pipeline.
//
// Every subcommand ends its stdout with one key=value summary line and
// writes its resolved options to <output>.config.json. Exit status is 0 on
// success, 1 when a stage fails, 2 on usage errors.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "knnlm.hpp"

namespace {

using json = nlohmann::ordered_json;
using namespace knnlm;

std::string g_stage = "startup";

void stage(std::string name) { g_stage = std::move(name); }

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void summary(const std::vector<std::pair<std::string, std::string>>& kv) {
  std::string line;
  for (const auto& [k, v] : kv) {
    if (!line.empty()) line += ' ';
    line += k + '=' + v;
  }
  std::cout << line << std::endl;
}

void echo_config(const std::string& output, const std::string& command, json options) {
  json j;
  j["command"] = command;
  j["options"] = std::move(options);
  write_text_file(output + ".config.json", j.dump(2) + "\n");
}

void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path)) {
    throw Error(std::string(what) + " '" + path + "' does not exist");
  }
}

struct Common {
  size_t threads = 0;
  size_t resolved() const { return resolve_threads(threads); }
};

Common g_common;

struct EncoderFlags {
  uint32_t dim = 256;
  uint64_t seed = 0;
  double decay = 0.9;
  uint32_t window = 32;

  void add(CLI::App* app) {
    app->add_option("--dim", dim, "Dense encoder dimension")->capture_default_str();
    app->add_option("--seed", seed, "Dense encoder hash seed")->capture_default_str();
    app->add_option("--decay", decay, "Per-position weight decay")->capture_default_str();
    app->add_option("--window", window, "Context tokens encoded")->capture_default_str();
  }
  DenseEncoder make() const { return DenseEncoder({dim, seed, decay, window}); }
  json to_json() const {
    return {{"dim", dim}, {"seed", seed}, {"decay", decay}, {"window", window}};
  }
};

// Inputs needed when similarity is TF-IDF.
struct KindFlags {
  std::string kind = "dense";
  std::string train, eval;

  void add(CLI::App* app) {
    app->add_option("--kind", kind, "Similarity: dense or tfidf")
        ->check(CLI::IsMember({"dense", "tfidf"}))
        ->capture_default_str();
    app->add_option("--train", train, "Training token stream (tfidf only)");
    app->add_option("--eval", eval, "Token stream the cache was built from (tfidf only)");
  }
  SimilarityKind parsed() const { return parse_similarity_kind(kind); }
};

struct TfidfInputs {
  TokenStream train, eval;
  std::optional<TfidfContext> ctx;

  const TfidfContext* load(const KindFlags& f, SimilarityKind kind) {
    return load(f.train, f.eval, kind);
  }
  const TfidfContext* load(const std::string& train_path, const std::string& eval_path,
                           SimilarityKind kind) {
    if (kind != SimilarityKind::kTfidf) return nullptr;
    if (train_path.empty() || eval_path.empty()) {
      throw Error("tfidf similarity needs --train and --eval token streams");
    }
    stage("load tfidf streams");
    train = read_token_stream(train_path);
    eval = read_token_stream(eval_path);
    ctx = TfidfContext::make(train, eval);
    return &*ctx;
  }
};

// ---------------------------------------------------------------------------

struct BuildVocab {
  std::string input, out;
  uint64_t min_count = 1;

  void add(CLI::App* app) {
    app->add_option("--input", input, "Training text")->required();
    app->add_option("--out", out, "Vocabulary file")->required();
    app->add_option("--min-count", min_count, "Drop words seen fewer times")->capture_default_str();
  }
  void run() {
    stage("read text");
    require_file(input, "input");
    const std::string text = read_text_file(input);
    stage("build vocab");
    const Vocab v = build_vocab(text, min_count);
    v.save(out);
    echo_config(out, "build-vocab", {{"input", input}, {"out", out}, {"min_count", min_count}});
    summary({{"vocab_size", std::to_string(v.size())}});
  }
};

struct Tokenize {
  std::string vocab, input, out;

  void add(CLI::App* app) {
    app->add_option("--vocab", vocab, "Vocabulary file")->required();
    app->add_option("--input", input, "Text to tokenize")->required();
    app->add_option("--out", out, "Token stream output")->required();
  }
  void run() {
    stage("load vocab");
    require_file(vocab, "vocab");
    const Vocab v = Vocab::load(vocab);
    stage("tokenize");
    require_file(input, "input");
    const TokenStream s = tokenize(read_text_file(input), v);
    write_token_stream(out, s);
    echo_config(out, "tokenize", {{"vocab", vocab}, {"input", input}, {"out", out}});
    const auto unk = std::count(s.tokens.begin(), s.tokens.end(), kUnkId);
    summary({{"tokens", std::to_string(s.size())},
             {"docs", std::to_string(s.doc_count())},
             {"unk", std::to_string(unk)}});
  }
};

struct Filter {
  std::string train, out;
  std::vector<std::string> evals;
  uint32_t n = 8;
  uint32_t window = 200;

  void add(CLI::App* app) {
    app->add_option("--train", train, "Training token stream")->required();
    app->add_option("--eval", evals, "Eval token stream(s) to protect")->required();
    app->add_option("--out", out, "Mask output")->required();
    app->add_option("--n", n, "n-gram length")->capture_default_str();
    app->add_option("--window", window, "Tokens excluded around each match")
        ->capture_default_str();
  }
  void run() {
    stage("load streams");
    const TokenStream tr = read_token_stream(train);
    TokenStream ev = read_token_stream(evals.front());
    for (size_t i = 1; i < evals.size(); ++i) ev = concat(ev, read_token_stream(evals[i]));
    stage("find shared n-grams");
    const auto matches = find_shared_ngrams(tr, ev, n, g_common.resolved());
    stage("build mask");
    const PositionMask mask = build_mask(matches, tr.size(), window);
    write_mask(out, mask);
    echo_config(out, "filter",
                {{"train", train}, {"eval", evals}, {"out", out}, {"n", n}, {"window", window}});
    summary({{"matches", std::to_string(matches.size())},
             {"excluded", std::to_string(mask.excluded_count())},
             {"corpus_len", std::to_string(tr.size())}});
  }
};

struct BuildDatastore {
  EncoderFlags enc;
  std::string train, mask, encoder = "dense", vectors, out;

  void add(CLI::App* app) {
    app->add_option("--corpus,--train", train, "Training token stream")->required();
    app->add_option("--mask", mask, "Exclusion mask from filter");
    app->add_option("--encoder", encoder, "dense, or import keys from --vectors")
        ->check(CLI::IsMember({"dense", "import"}))
        ->capture_default_str();
    app->add_option("--vectors", vectors, "Imported key vectors (one per predicted token)");
    app->add_option("--out", out, "Datastore output")->required();
    enc.add(app);
  }
  void run() {
    stage("load train");
    const TokenStream tr = read_token_stream(train);
    std::optional<PositionMask> m;
    if (!mask.empty()) {
      stage("load mask");
      m = read_mask(mask);
    }
    stage("build datastore");
    Datastore ds;
    if (encoder == "import") {
      if (vectors.empty()) throw Error("--encoder import needs --vectors");
      ds = build_datastore(tr, import_vectors(vectors, enc.dim), m ? &*m : nullptr);
    } else {
      ds = build_datastore(tr, enc.make(), m ? &*m : nullptr, g_common.resolved());
    }
    stage("write datastore");
    write_datastore(out, ds);
    echo_config(out, "build-datastore",
                {{"corpus", train},
                 {"mask", mask},
                 {"encoder_kind", encoder},
                 {"vectors", vectors},
                 {"out", out},
                 {"encoder", enc.to_json()}});
    summary({{"entries", std::to_string(ds.size())}, {"dim", std::to_string(ds.dim)}});
  }
};

struct CacheEval {
  EncoderFlags enc;
  std::string datastore, eval, train, base = "ngram", queries, emit, out;
  uint32_t order = 3;
  double mu = 0.5;
  size_t k = 1024;

  void add(CLI::App* app) {
    app->add_option("--datastore", datastore, "Datastore file")->required();
    app->add_option("--eval", eval, "Eval token stream")->required();
    app->add_option("--train", train, "Training stream for the n-gram base LM");
    app->add_option("--base", base, "ngram (trained on --train) or import:<log-prob file>")
        ->capture_default_str();
    app->add_option("--order", order, "n-gram order")->capture_default_str();
    app->add_option("--mu", mu, "Interpolation weight of each n-gram level")->capture_default_str();
    app->add_option("--query-vectors", queries, "Imported query vectors");
    app->add_option("--emit-queries", emit, "Also write the query vectors here");
    app->add_option("--k", k, "Neighbors per record")->capture_default_str();
    app->add_option("--out", out, "Cache output")->required();
    enc.add(app);
  }
  void run() {
    stage("load eval");
    const TokenStream ev = read_token_stream(eval);
    std::vector<double> lp;
    if (base.starts_with("import:")) {
      stage("import base log-probs");
      lp = import_base_logprobs(base.substr(7), ev.predicted_count());
    } else {
      if (base != "ngram") throw Error("--base must be ngram or import:<path>");
      if (train.empty()) throw Error("--base ngram needs --train");
      stage("train base LM");
      const NgramModel lm = NgramModel::train(read_token_stream(train), order, mu);
      lp = base_logprobs(lm, ev);
    }
    stage("load datastore");
    const Datastore ds = read_datastore(datastore);
    stage("build cache");
    const DenseEncoder dense = enc.make();
    std::optional<VectorMatrix> imported;
    QueryEncoder q;
    if (!queries.empty()) {
      imported = import_vectors(queries, ds.dim);
      q.imported = &*imported;
    } else {
      q.dense = &dense;
    }
    CacheBuildOptions opt;
    opt.k = k;
    opt.threads = g_common.resolved();
    opt.emit_queries_path = emit;
    const EvalCache cache = build_cache(ev, ds, lp, q, opt, out);
    echo_config(out, "cache-eval",
                {{"datastore", datastore},
                 {"eval", eval},
                 {"train", train},
                 {"base", base},
                 {"order", order},
                 {"mu", mu},
                 {"query_vectors", queries},
                 {"emit_queries", emit},
                 {"k", k},
                 {"out", out},
                 {"encoder", enc.to_json()}});
    summary({{"records", std::to_string(cache.size())},
             {"k", std::to_string(cache.k())},
             {"base_ppl", num(perplexity_from_logprobs(lp))}});
  }
};

struct GridFlags {
  std::string lambdas = "0.05:0.95:0.05";
  std::string bs = "1,2,4,8,16,32,64,128";

  void add(CLI::App* app) {
    app->add_option("--lambda-grid", lambdas, "start:stop:step or comma list")
        ->capture_default_str();
    app->add_option("--b-grid", bs, "Comma list of bucket counts")->capture_default_str();
  }
};

struct Tune {
  KindFlags kind;
  GridFlags grid;
  std::string cache, out;
  size_t k = 0;

  void add(CLI::App* app) {
    app->add_option("--cache", cache, "Dev cache")->required();
    app->add_option("--out", out, "Coefficient table output")->required();
    app->add_option("--k", k, "Use the first k neighbors (0 = all)")->capture_default_str();
    kind.add(app);
    grid.add(app);
  }
  void run() {
    stage("load cache");
    const EvalCache c = EvalCache::open(cache);
    const SimilarityKind sk = kind.parsed();
    TfidfInputs tf;
    const TfidfContext* ctx = tf.load(kind, sk);
    stage("tune");
    const auto lambdas = parse_lambda_grid(grid.lambdas);
    const auto bs = parse_b_grid(grid.bs);
    const TuneResult r = tune(c, bs, lambdas, sk, k, ctx, g_common.resolved());
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << "b\tdev0_ppl\tdev1_ppl\tdev_ppl\n";
    for (const auto& row : r.rows) {
      if (row.skipped) continue;
      std::cout << row.b << '\t' << num(row.dev0_ppl) << '\t' << num(row.dev1_ppl) << '\t'
                << num(row.dev_ppl) << '\n';
    }
    r.table.save(out);
    echo_config(out, "tune",
                {{"cache", cache},
                 {"out", out},
                 {"k", k},
                 {"kind", kind.kind},
                 {"train", kind.train},
                 {"eval", kind.eval},
                 {"lambda_grid", grid.lambdas},
                 {"b_grid", grid.bs}});
    summary({{"ppl", num(r.dev_ppl)}, {"b", std::to_string(r.chosen_b)}, {"kind", kind.kind}});
  }
};

struct ScoreFlags {
  std::optional<double> lambda;
  std::string table;
  size_t k = 0;

  void add(CLI::App* app) {
    auto* l = app->add_option("--lambda", lambda, "Static interpolation coefficient");
    auto* t = app->add_option("--table", table, "Coefficient table from tune");
    l->excludes(t);
    app->add_option("--k", k, "Use the first k neighbors (0 = all)")->capture_default_str();
  }
  LambdaTable resolve(SimilarityKind kind) const {
    if (!table.empty()) return LambdaTable::load(table);
    if (!lambda) throw Error("one of --lambda or --table is required");
    return LambdaTable::constant(*lambda, kind);
  }
};

struct Eval {
  KindFlags kind;
  ScoreFlags score;
  std::string cache;

  void add(CLI::App* app) {
    app->add_option("--cache", cache, "Eval cache")->required();
    kind.add(app);
    score.add(app);
  }
  void run() {
    stage("load cache");
    const EvalCache c = EvalCache::open(cache);
    stage("load table");
    // A table carries its own similarity kind.
    LambdaTable t = score.resolve(kind.parsed());
    TfidfInputs tf;
    const TfidfContext* ctx = tf.load(kind, t.partition.kind);
    stage("score");
    const ScoringInputs in = scoring_inputs(c, t.partition.kind, score.k, ctx, g_common.resolved());
    const double ppl = score_adaptive(in, t);
    summary({{"ppl", num(ppl)},
             {"base_ppl", num(base_perplexity(in))},
             {"b", std::to_string(t.partition.b)},
             {"kind", std::string(to_string(t.partition.kind))}});
  }
};

struct Analyze {
  KindFlags kind;
  ScoreFlags score;
  GridFlags grid;
  std::string cache, out, labels;
  uint32_t buckets = 20;
  std::optional<size_t> min_count;
  std::string ks = "1,8,64,1024";
  std::string kinds = "dense,tfidf";
  std::string report;

  void add(CLI::App* app) {
    app->add_option("report", report, "curve, groups or ablation")
        ->required()
        ->check(CLI::IsMember({"curve", "groups", "ablation"}));
    app->add_option("--cache", cache, "Eval cache")->required();
    app->add_option("--out", out, "Report TSV")->required();
    app->add_option("--buckets", buckets, "curve: rank buckets")->capture_default_str();
    app->add_option("--labels", labels, "groups: one label per eval token");
    app->add_option("--min-count", min_count, "groups: omit smaller groups");
    app->add_option("--ks", ks, "ablation: neighbor counts")->capture_default_str();
    app->add_option("--kinds", kinds, "ablation: similarity kinds")->capture_default_str();
    kind.add(app);
    score.add(app);
    grid.add(app);
    app->footer(
        "curve columns: bucket count sim_max sim_min base_ppl knn_ppl improvement_pct\n"
        "groups columns: label count base_ppl knn_ppl improvement_pct\n"
        "ablation columns: kind k chosen_b dev_ppl static_dev_ppl");
  }

  void run() {
    stage("load cache");
    const EvalCache c = EvalCache::open(cache);
    std::string tsv;
    std::vector<std::pair<std::string, std::string>> kv{{"report", report}};
    if (report == "ablation") {
      std::vector<SimilarityKind> sks;
      for (const auto& s : split(kinds)) sks.push_back(parse_similarity_kind(s));
      std::vector<size_t> kl;
      for (const auto& s : split(ks)) kl.push_back(std::stoul(s));
      const bool any_tfidf =
          std::find(sks.begin(), sks.end(), SimilarityKind::kTfidf) != sks.end();
      TfidfInputs tf;
      const TfidfContext* ctx =
          tf.load(kind, any_tfidf ? SimilarityKind::kTfidf : SimilarityKind::kDense);
      stage("ablation");
      const auto cells = ablation_grid(c, sks, kl, parse_b_grid(grid.bs),
                                       parse_lambda_grid(grid.lambdas), ctx, g_common.resolved());
      tsv = ablation_tsv(cells);
      kv.push_back({"cells", std::to_string(cells.size())});
    } else {
      stage("load table");
      const LambdaTable t = score.resolve(kind.parsed());
      TfidfInputs tf;
      const TfidfContext* ctx = tf.load(kind, t.partition.kind);
      stage("score");
      const ScoringInputs in =
          scoring_inputs(c, t.partition.kind, score.k, ctx, g_common.resolved());
      if (report == "curve") {
        stage("curve");
        const auto curve = bucket_improvement_curve(in, t, buckets);
        tsv = curve_tsv(curve);
        kv.push_back({"buckets", std::to_string(curve.size())});
      } else {
        stage("groups");
        if (labels.empty() || kind.eval.empty()) {
          throw Error("groups needs --labels and the eval token stream via --eval");
        }
        const TokenStream ev = read_token_stream(kind.eval);
        const auto rec_labels = labels_for_records(ev, read_labels(labels));
        const size_t floor = min_count ? *min_count : default_min_count(ev.size());
        const GroupReport rep = group_report(in, rec_labels, t, floor);
        tsv = group_tsv(rep);
        kv.push_back({"groups", std::to_string(rep.groups.size())});
        kv.push_back({"omitted", std::to_string(rep.omitted_groups)});
      }
    }
    write_text_file(out, tsv);
    std::cout << tsv_to_table(tsv);
    echo_config(out, "analyze",
                {{"report", report},
                 {"cache", cache},
                 {"out", out},
                 {"kind", kind.kind},
                 {"train", kind.train},
                 {"eval", kind.eval},
                 {"lambda", score.lambda ? json(*score.lambda) : json(nullptr)},
                 {"table", score.table},
                 {"k", score.k},
                 {"buckets", buckets},
                 {"labels", labels},
                 {"min_count", min_count ? json(*min_count) : json(nullptr)},
                 {"ks", ks},
                 {"kinds", kinds},
                 {"lambda_grid", grid.lambdas},
                 {"b_grid", grid.bs}});
    summary(kv);
  }

  static std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
      size_t comma = s.find(',', start);
      if (comma == std::string::npos) comma = s.size();
      if (comma > start) out.push_back(s.substr(start, comma - start));
      start = comma + 1;
    }
    return out;
  }
};

struct Synth {
  SynthConfig config;
  std::string out;

  void add(CLI::App* app) {
    app->add_option("--seed", config.seed, "Generator seed")->capture_default_str();
    app->add_option("--train-tokens", config.train_tokens)->capture_default_str();
    app->add_option("--eval-tokens", config.eval_tokens, "Split evenly into valid and test")
        ->capture_default_str();
    app->add_option("--overlap-rate", config.overlap_rate,
                    "Chance an eval sentence copies a training span")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    app->add_option("--out", out, "Output directory (train.txt, valid.txt, test.txt)")
        ->required();
  }
  void run() {
    stage("generate");
    const SynthCorpus c = synth(config);
    stage("write corpus");
    std::filesystem::create_directories(out);
    const std::filesystem::path dir(out);
    write_text_file((dir / "train.txt").string(), c.train);
    write_text_file((dir / "valid.txt").string(), c.valid);
    write_text_file((dir / "test.txt").string(), c.test);
    echo_config((dir / "synth").string(), "synth",
                {{"seed", config.seed},
                 {"train_tokens", config.train_tokens},
                 {"eval_tokens", config.eval_tokens},
                 {"overlap_rate", config.overlap_rate},
                 {"out", out}});
    summary({{"copied_valid", std::to_string(c.copied_sentences_valid)},
             {"copied_test", std::to_string(c.copied_sentences_test)},
             {"out", out}});
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kNN-LM datastore construction, caching, tuning and analysis"};
  app.require_subcommand(1);
  app.add_option("--threads", g_common.threads, "Worker threads (0 = KLM_THREADS or all cores)")
      ->capture_default_str();

  BuildVocab build_vocab_cmd;
  Tokenize tokenize_cmd;
  Filter filter_cmd;
  BuildDatastore datastore_cmd;
  CacheEval cache_cmd;
  Tune tune_cmd;
  Eval eval_cmd;
  Analyze analyze_cmd;
  Synth synth_cmd;

  std::vector<std::pair<CLI::App*, std::function<void()>>> commands;
  auto reg = [&](const char* name, const char* help, auto& cmd) {
    CLI::App* sub = app.add_subcommand(name, help);
    // Accept --threads after the subcommand name too.
    sub->add_option("--threads", g_common.threads, "Worker threads");
    cmd.add(sub);
    commands.emplace_back(sub, [&cmd] { cmd.run(); });
  };
  reg("build-vocab", "Build a vocabulary from training text", build_vocab_cmd);
  reg("tokenize", "Map text to a token stream", tokenize_cmd);
  reg("filter", "Mask training positions near n-grams shared with eval", filter_cmd);
  reg("build-datastore", "Encode training contexts into a datastore", datastore_cmd);
  reg("cache-eval", "Retrieve neighbors for every eval token and cache them", cache_cmd);
  reg("tune", "Choose bucket count and per-bucket coefficients on dev", tune_cmd);
  reg("eval", "Score a cache with a static coefficient or a table", eval_cmd);
  reg("analyze", "Improvement curve, label groups, or kind x k ablation", analyze_cmd);
  reg("synth", "Generate a synthetic train/valid/test corpus", synth_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  for (auto& [sub, run] : commands) {
    if (!sub->parsed()) continue;
    try {
      run();
      return 0;
    } catch (const std::exception& e) {
      std::cerr << "error: " << sub->get_name() << ": " << g_stage << ": " << e.what() << "\n";
      return 1;
    }
  }
  return 2;
}
