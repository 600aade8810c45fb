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

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

namespace {

namespace fs = std::filesystem;

struct Result {
  int rc = -1;
  std::string out;  // stdout and stderr interleaved

  // key=value pairs of the last non-empty line.
  std::map<std::string, std::string> summary() const {
    std::istringstream lines(out);
    std::string line, last;
    while (std::getline(lines, line)) {
      if (!line.empty()) last = line;
    }
    std::map<std::string, std::string> kv;
    std::istringstream words(last);
    std::string w;
    while (words >> w) {
      const auto eq = w.find('=');
      if (eq != std::string::npos) kv[w.substr(0, eq)] = w.substr(eq + 1);
    }
    return kv;
  }
};

Result knnlm(const std::string& args) {
  const std::string cmd = std::string(KNNLM_CLI) + " --threads 1 " + args + " 2>&1";
  Result r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.rc = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// One small synthetic pipeline shared by every test.
class Pipeline : public ::testing::Test {
 protected:
  static fs::path dir;

  static std::string at(const std::string& name) { return (dir / name).string(); }

  static void SetUpTestSuite() {
    dir = fs::temp_directory_path() / "knnlm_cli_test";
    fs::remove_all(dir);
    fs::create_directories(dir);
    auto must = [](const std::string& args) {
      const Result r = knnlm(args);
      ASSERT_EQ(r.rc, 0) << args << "\n" << r.out;
    };
    must("synth --seed 3 --train-tokens 20000 --eval-tokens 4000 --out " + at("corpus"));
    must("build-vocab --input " + at("corpus/train.txt") + " --out " + at("vocab.txt"));
    for (const char* f : {"train", "valid", "test"}) {
      must("tokenize --vocab " + at("vocab.txt") + " --input " + at("corpus/") + f +
           ".txt --out " + at(std::string(f) + ".tok"));
    }
    must("build-datastore --train " + at("train.tok") + " --dim 64 --out " + at("ds.bin"));
    for (const char* f : {"valid", "test"}) {
      must("cache-eval --datastore " + at("ds.bin") + " --eval " + at(std::string(f) + ".tok") +
           " --train " + at("train.tok") + " --dim 64 --k 16 --out " +
           at(std::string(f) + ".cache"));
    }
  }

  static void TearDownTestSuite() { fs::remove_all(dir); }
};

fs::path Pipeline::dir;

TEST_F(Pipeline, ConfigEchoNextToOutputs) {
  for (const char* f : {"vocab.txt", "train.tok", "ds.bin", "valid.cache", "corpus/synth"}) {
    const fs::path echo = at(std::string(f) + ".config.json");
    ASSERT_TRUE(fs::exists(echo)) << echo;
    EXPECT_NE(slurp(echo).find("\"command\""), std::string::npos);
  }
  EXPECT_NE(slurp(at("ds.bin.config.json")).find("\"dim\": 64"), std::string::npos);
}

TEST_F(Pipeline, SummaryLines) {
  const Result tok = knnlm("tokenize --vocab " + at("vocab.txt") + " --input " +
                        at("corpus/valid.txt") + " --out " + at("v2.tok"));
  ASSERT_EQ(tok.rc, 0) << tok.out;
  const auto kv = tok.summary();
  EXPECT_TRUE(kv.count("tokens") && kv.count("docs") && kv.count("unk")) << tok.out;
  EXPECT_EQ(slurp(at("v2.tok")), slurp(at("valid.tok")));
}

TEST_F(Pipeline, ZeroLambdaIsBase) {
  const Result r = knnlm("eval --cache " + at("valid.cache") + " --lambda 0");
  ASSERT_EQ(r.rc, 0) << r.out;
  const auto kv = r.summary();
  EXPECT_EQ(kv.at("ppl"), kv.at("base_ppl"));
  // The base perplexity printed by cache-eval is the same number.
  const Result c = knnlm("cache-eval --datastore " + at("ds.bin") + " --eval " + at("valid.tok") +
                      " --train " + at("train.tok") + " --dim 64 --k 4 --out " + at("k4.cache"));
  ASSERT_EQ(c.rc, 0) << c.out;
  EXPECT_EQ(c.summary().at("base_ppl"), kv.at("base_ppl"));
  EXPECT_EQ(c.summary().at("k"), "4");
}

TEST_F(Pipeline, TuneThenEvalAgree) {
  const Result t = knnlm("tune --cache " + at("valid.cache") + " --out " + at("table.txt"));
  ASSERT_EQ(t.rc, 0) << t.out;
  const Result e = knnlm("eval --cache " + at("valid.cache") + " --table " + at("table.txt"));
  ASSERT_EQ(e.rc, 0) << e.out;
  EXPECT_EQ(t.summary().at("ppl"), e.summary().at("ppl"));
  EXPECT_EQ(t.summary().at("b"), e.summary().at("b"));
  const Result test = knnlm("eval --cache " + at("test.cache") + " --table " + at("table.txt"));
  EXPECT_EQ(test.rc, 0) << test.out;
}

TEST_F(Pipeline, TfidfTuning) {
  const Result t = knnlm("tune --cache " + at("valid.cache") + " --kind tfidf --train " +
                      at("train.tok") + " --eval " + at("valid.tok") + " --out " +
                      at("tfidf.txt"));
  ASSERT_EQ(t.rc, 0) << t.out;
  EXPECT_EQ(t.summary().at("kind"), "tfidf");
  EXPECT_EQ(slurp(at("tfidf.txt")).rfind("b=", 0), 0u);
  // Without the streams tfidf similarity cannot be computed.
  const Result bad = knnlm("eval --cache " + at("valid.cache") + " --table " + at("tfidf.txt"));
  EXPECT_EQ(bad.rc, 1) << bad.out;
}

TEST_F(Pipeline, IdempotentOutputs) {
  ASSERT_EQ(knnlm("build-datastore --train " + at("train.tok") + " --dim 64 --out " +
                  at("ds2.bin")).rc,
            0);
  EXPECT_EQ(slurp(at("ds2.bin")), slurp(at("ds.bin")));
  const std::string echo = slurp(at("ds2.bin.config.json"));
  ASSERT_EQ(knnlm("build-datastore --train " + at("train.tok") + " --dim 64 --out " +
                  at("ds2.bin")).rc,
            0);
  EXPECT_EQ(slurp(at("ds2.bin.config.json")), echo);
  ASSERT_EQ(knnlm("cache-eval --datastore " + at("ds2.bin") + " --eval " + at("valid.tok") +
                  " --train " + at("train.tok") + " --dim 64 --k 16 --out " + at("v2.cache"))
                .rc,
            0);
  EXPECT_EQ(slurp(at("v2.cache")), slurp(at("valid.cache")));
  knnlm("synth --seed 3 --train-tokens 20000 --eval-tokens 4000 --out " + at("corpus2"));
  EXPECT_EQ(slurp(at("corpus2/train.txt")), slurp(at("corpus/train.txt")));
}

TEST_F(Pipeline, FilteredDatastore) {
  const Result f = knnlm("filter --train " + at("train.tok") + " --eval " + at("valid.tok") + " " +
                      at("test.tok") + " --n 8 --window 200 --out " + at("mask.bin"));
  ASSERT_EQ(f.rc, 0) << f.out;
  const auto kv = f.summary();
  EXPECT_GT(std::stoull(kv.at("matches")), 0u);
  EXPECT_GT(std::stoull(kv.at("excluded")), 0u);
  const Result d = knnlm("build-datastore --train " + at("train.tok") + " --mask " + at("mask.bin") +
                      " --dim 64 --out " + at("ds_f.bin"));
  ASSERT_EQ(d.rc, 0) << d.out;
  const Result full = knnlm("build-datastore --train " + at("train.tok") + " --dim 64 --out " +
                         at("ds3.bin"));
  EXPECT_LT(std::stoull(d.summary().at("entries")), std::stoull(full.summary().at("entries")));
}

TEST_F(Pipeline, AnalyzeReports) {
  const Result curve = knnlm("analyze curve --cache " + at("valid.cache") + " --lambda 0.25 --out " +
                          at("curve.tsv"));
  ASSERT_EQ(curve.rc, 0) << curve.out;
  EXPECT_NE(slurp(at("curve.tsv")).find("improvement_pct"), std::string::npos);

  // Labels: one per eval token, alternating.
  const auto tokens = std::stoull(knnlm("tokenize --vocab " + at("vocab.txt") + " --input " +
                                        at("corpus/valid.txt") + " --out " + at("v3.tok"))
                                      .summary()
                                      .at("tokens"));
  std::ofstream labels(at("labels.txt"));
  for (size_t i = 0; i < tokens; ++i) labels << (i % 2 ? "ODD\n" : "EVEN\n");
  labels.close();
  const Result groups = knnlm("analyze groups --cache " + at("valid.cache") + " --eval " +
                           at("valid.tok") + " --labels " + at("labels.txt") +
                           " --lambda 0.25 --min-count 1 --out " + at("groups.tsv"));
  ASSERT_EQ(groups.rc, 0) << groups.out;
  const std::string g = slurp(at("groups.tsv"));
  EXPECT_NE(g.find("ODD"), std::string::npos);
  EXPECT_NE(g.find("<all>"), std::string::npos);

  const Result abl = knnlm("analyze ablation --cache " + at("valid.cache") + " --kinds dense --ks 1,8,16 --out " +
                        at("abl.tsv"));
  ASSERT_EQ(abl.rc, 0) << abl.out;
  const Result too_big = knnlm("analyze ablation --cache " + at("valid.cache") +
                            " --kinds dense --ks 1,1024 --out " + at("abl2.tsv"));
  EXPECT_EQ(too_big.rc, 1);
  EXPECT_NE(too_big.out.find("exceeds cached k=16"), std::string::npos) << too_big.out;
}

TEST_F(Pipeline, ExitCodes) {
  EXPECT_EQ(knnlm("").rc, 2);
  EXPECT_EQ(knnlm("--help").rc, 0);
  EXPECT_EQ(knnlm("tune --no-such-flag").rc, 2);
  EXPECT_NE(knnlm("eval --cache " + at("valid.cache")).rc, 0);  // needs --lambda or --table
  const Result missing = knnlm("tokenize --vocab " + at("nope.txt") + " --input " +
                            at("corpus/valid.txt") + " --out " + at("x.tok"));
  EXPECT_EQ(missing.rc, 1);
  EXPECT_EQ(missing.out.rfind("error: tokenize: ", 0), 0u) << missing.out;
  const Result bad_lambda = knnlm("eval --cache " + at("valid.cache") + " --lambda 1.5");
  EXPECT_NE(bad_lambda.rc, 0);
  const Result bad_k = knnlm("eval --cache " + at("valid.cache") + " --lambda 0.5 --k 17");
  EXPECT_EQ(bad_k.rc, 1);
  const Result bad_synth =
      knnlm("synth --overlap-rate 2 --train-tokens 100 --eval-tokens 10 --out " + at("bad"));
  EXPECT_NE(bad_synth.rc, 0);
}

}  // namespace
