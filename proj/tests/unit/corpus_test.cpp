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

#include "knnlm/corpus.hpp"

#include <fstream>

#include <gtest/gtest.h>

#include "test_util.hpp"

namespace knnlm {
namespace {

using testing::TempDir;

TEST(BuildVocab, OrdersByCountThenFirstOccurrence) {
  const Vocab v = build_vocab("a b a", 1);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_EQ(v.surface(0), "<unk>");
  EXPECT_EQ(v.surface(1), "a");
  EXPECT_EQ(v.surface(2), "b");
}

TEST(BuildVocab, MinCountSendsRareWordsToUnk) {
  const Vocab v = build_vocab("a b a", 2);
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.lookup("a"), 1u);
  EXPECT_EQ(v.lookup("b"), kUnkId);
}

TEST(BuildVocab, TiesKeepFirstOccurrence) {
  const Vocab v = build_vocab("z y x y z x", 1);
  EXPECT_EQ(v.surface(1), "z");
  EXPECT_EQ(v.surface(2), "y");
  EXPECT_EQ(v.surface(3), "x");
}

TEST(BuildVocab, EmptyCorpusThrows) {
  EXPECT_THROW(build_vocab(""), Error);
  EXPECT_THROW(build_vocab(" \n\n\t\n"), Error);
}

TEST(BuildVocab, LiteralUnkIsNotDuplicated) {
  const Vocab v = build_vocab("<unk> a <unk>", 1);
  EXPECT_EQ(v.size(), 2u);
  EXPECT_EQ(v.lookup("<unk>"), kUnkId);
}

TEST(BuildVocab, DeterministicOnDisk) {
  TempDir dir;
  const std::string text = "the cat sat on the mat\n\nthe dog sat\n";
  build_vocab(text).save(dir.file("a.txt"));
  build_vocab(text).save(dir.file("b.txt"));
  EXPECT_EQ(read_text_file(dir.file("a.txt")), read_text_file(dir.file("b.txt")));
  EXPECT_EQ(Vocab::load(dir.file("a.txt")), build_vocab(text));
}

TEST(Vocab, RejectsMalformedSurfaceLists) {
  EXPECT_THROW(Vocab::from_surfaces({"a", "b"}), Error);
  EXPECT_THROW(Vocab::from_surfaces({"<unk>", "a", "a"}), Error);
  EXPECT_THROW(Vocab::from_surfaces({"<unk>", "a b"}), Error);
}

TEST(Tokenize, BlankLineSeparatesDocuments) {
  const Vocab v = Vocab::from_surfaces({"<unk>", "a", "b", "c"});
  const TokenStream s = tokenize("a b\n\nc", v);
  EXPECT_EQ(s.tokens, (std::vector<TokenId>{1, 2, 3}));
  EXPECT_EQ(s.doc_offsets, (std::vector<uint64_t>{0, 2}));
  EXPECT_EQ(s.vocab_size, 4u);
}

TEST(Tokenize, LinesWithinADocumentJoin) {
  const Vocab v = Vocab::from_surfaces({"<unk>", "a", "b"});
  const TokenStream s = tokenize("a\nb\n \n\n\na\r\n", v);
  EXPECT_EQ(s.tokens, (std::vector<TokenId>{1, 2, 1}));
  EXPECT_EQ(s.doc_offsets, (std::vector<uint64_t>{0, 2}));
}

TEST(Tokenize, UnseenWordIsUnk) {
  const Vocab v = Vocab::from_surfaces({"<unk>", "a"});
  EXPECT_EQ(tokenize("a zebra", v).tokens, (std::vector<TokenId>{1, 0}));
}

TEST(Tokenize, SurfaceRoundTrip) {
  const Vocab v = build_vocab("x y z x y x");
  for (TokenId id = 1; id < v.size(); ++id) EXPECT_EQ(v.lookup(v.surface(id)), id);
  const std::string text = "x y z\n\nz x\n";
  EXPECT_EQ(tokenize(detokenize(tokenize(text, v), v), v), tokenize(text, v));
}

TEST(Tokenize, PreservesWhitespaceTokenCount) {
  const Vocab v = build_vocab("a b c");
  EXPECT_EQ(tokenize("a  b\tc   d\n\ne", v).size(), 5u);
}

TEST(TokenStream, PredictedCountsSkipFirstTokenPerDocument) {
  const TokenStream s = testing::make_stream(9, {{1, 2, 3, 4, 5}, {6}, {7, 8}});
  EXPECT_EQ(s.predicted_count(), 5u);
  EXPECT_EQ(s.predicted_positions(), (std::vector<uint64_t>{1, 2, 3, 4, 7}));
  EXPECT_EQ(s.doc_of(0), 0u);
  EXPECT_EQ(s.doc_of(5), 1u);
  EXPECT_EQ(s.doc_of(7), 2u);
}

TEST(TokenStream, ValidateCatchesBadStreams) {
  TokenStream s = testing::make_stream(3, {{1, 2}, {0}});
  EXPECT_NO_THROW(s.validate());
  s.tokens[1] = 3;
  EXPECT_THROW(s.validate(), Error);
  s.tokens[1] = 2;
  s.doc_offsets = {0, 0};
  EXPECT_THROW(s.validate(), Error);
  s.doc_offsets = {1};
  EXPECT_THROW(s.validate(), Error);
}

TEST(TokenStream, BinaryRoundTripIsExact) {
  TempDir dir;
  std::mt19937_64 rng(7);
  const TokenStream s = testing::random_stream(rng, 1000, 50, 1, 40);
  write_token_stream(dir.file("s.tok"), s);
  EXPECT_EQ(read_token_stream(dir.file("s.tok")), s);
  const std::string bytes = read_text_file(dir.file("s.tok"));
  EXPECT_EQ(bytes.substr(0, 8), "KLMTOKS1");
  EXPECT_EQ(bytes.size(), 8 + 4 + 8 + 8 + 4 * s.size() + 8 * s.doc_count());
}

TEST(TokenStream, TruncatedOrForeignFilesAreRejected) {
  TempDir dir;
  const TokenStream s = testing::make_stream(5, {{1, 2, 3}});
  write_token_stream(dir.file("s.tok"), s);
  std::string bytes = read_text_file(dir.file("s.tok"));
  write_text_file(dir.file("short.tok"), bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_token_stream(dir.file("short.tok")), Error);
  bytes[0] = 'X';
  write_text_file(dir.file("magic.tok"), bytes);
  EXPECT_THROW(read_token_stream(dir.file("magic.tok")), Error);
  EXPECT_THROW(read_token_stream(dir.file("missing.tok")), Error);
}

TEST(TokenStream, ConcatShiftsOffsets) {
  const TokenStream a = testing::make_stream(4, {{1, 2}, {3}});
  const TokenStream b = testing::make_stream(4, {{0, 1, 2}});
  const TokenStream c = concat(a, b);
  EXPECT_EQ(c.tokens, (std::vector<TokenId>{1, 2, 3, 0, 1, 2}));
  EXPECT_EQ(c.doc_offsets, (std::vector<uint64_t>{0, 2, 3}));
  EXPECT_THROW(concat(a, testing::make_stream(5, {{1}})), Error);
}

}  // namespace
}  // namespace knnlm
