#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kgseq/bpe.hpp"
#include "kgseq/errors.hpp"
#include "kgseq/rng.hpp"
#include "kgseq/strutil.hpp"
#include "test_helpers.hpp"

using namespace kgseq;
using namespace kgseq::bpe;
using kgseq::testing::TempDir;

namespace {

std::vector<std::string> toy_corpus() {
  return {
      "predict tail: alpha unit 3 | linked to", "predict tail: bravo unit 3 | linked to",
      "predict head: alpha hub | member of",    "alpha unit 4",
      "bravo unit 4",                           "charlie hub",
      "predict answer: which hub does alpha unit 3 belong to",
  };
}

}  // namespace

TEST_CASE("hand-run merges on a repeated 4-char word") {
  // One occurrence leaves (aa,aa) below the min pair frequency of 2; with the
  // word twice both merges fire: (a,a) -> aa, then (aa,aa) -> aaaa.
  const int base = 4 + 1;  // specials + marker + byte 'a'
  auto v2 = BpeVocab::train({"aaaa", "aaaa"}, base + 2);
  CHECK(v2.size() == base + 2);
  auto enc = v2.encode("aaaa");
  REQUIRE(enc.ids.size() == 2);  // [marker, aaaa]
  CHECK(v2.decode(enc) == "aaaa");

  auto v1 = BpeVocab::train({"aaaa"}, base + 2);
  CHECK(v1.size() == base + 1);  // only (a,a) merges; (aa,aa) occurs once
}

TEST_CASE("single-character corpus learns zero merges") {
  const int base = 4 + 1;
  auto v = BpeVocab::train({"x"}, base + 5);
  CHECK(v.size() == base);  // (marker,x) occurs once; nothing repeats
}

TEST_CASE("target at or below base alphabet is a config error") {
  CHECK_THROWS_AS(BpeVocab::train({"abc"}, 4 + 3), ConfigError);
  CHECK_THROWS_AS(BpeVocab::train({"abc"}, 2), ConfigError);
}

TEST_CASE("vocabulary size never exceeds target") {
  auto corpus = toy_corpus();
  for (int target : {40, 60, 120}) {
    auto v = BpeVocab::train(corpus, target);
    CHECK(v.size() <= target);
  }
}

TEST_CASE("decode-encode identity on every corpus line") {
  auto corpus = toy_corpus();
  auto v = BpeVocab::train(corpus, 80);
  for (const auto& line : corpus) {
    auto seq = v.encode(line);
    CHECK(v.decode(seq) == line);
    for (int id : seq.ids) {
      CHECK(id >= 0);
      CHECK(id < v.size());
    }
  }
}

TEST_CASE("round trip over random recombinations of corpus words") {
  auto corpus = toy_corpus();
  auto v = BpeVocab::train(corpus, 96);
  std::vector<std::string> words;
  for (const auto& line : corpus)
    for (const auto& w : split(line, ' '))
      if (!w.empty()) words.push_back(w);
  Rng rng(4242);
  for (int trial = 0; trial < 1000; ++trial) {
    std::string line;
    const int n = 1 + rng.uniform_int(8);
    for (int i = 0; i < n; ++i) {
      if (i) line += ' ';
      line += words[static_cast<size_t>(rng.uniform_int(static_cast<int>(words.size())))];
    }
    CHECK(v.decode(v.encode(line)) == line);
  }
}

TEST_CASE("empty string encodes to nothing; specials are stripped") {
  auto v = BpeVocab::train(toy_corpus(), 64);
  CHECK(v.encode("").ids.empty());
  CHECK(v.decode({}) == "");
  TokenSequence stop_only;
  stop_only.ids = {v.stop_id()};
  stop_only.terminated = true;
  CHECK(v.decode(stop_only) == "");
}

TEST_CASE("unseen byte maps to the unknown id at its position") {
  auto v = BpeVocab::train({"abc abc"}, 12);
  auto seq = v.encode("a\xc3\xa9");  // é never appeared in training
  REQUIRE(seq.ids.size() >= 2);     // (possibly merged) prefix, then two unknown bytes
  CHECK(seq.ids[seq.ids.size() - 1] == v.unk_id());
  CHECK(seq.ids[seq.ids.size() - 2] == v.unk_id());
}

TEST_CASE("out-of-range id raises on decode") {
  auto v = BpeVocab::train({"ab ab"}, 10);
  TokenSequence bad;
  bad.ids = {v.size()};
  CHECK_THROWS_AS(v.decode(bad), DomainError);
}

TEST_CASE("retraining writes byte-identical vocab files") {
  TempDir tmp("bpe");
  auto corpus = toy_corpus();
  auto a = BpeVocab::train(corpus, 100);
  auto b = BpeVocab::train(corpus, 100);
  a.save(tmp.path("a.vocab"));
  b.save(tmp.path("b.vocab"));
  CHECK(read_file(tmp.path("a.vocab")) == read_file(tmp.path("b.vocab")));
  CHECK(a == b);
}

TEST_CASE("vocab file round-trips and encodes identically") {
  TempDir tmp("bpe");
  auto corpus = toy_corpus();
  auto v = BpeVocab::train(corpus, 100);
  v.save(tmp.path("v.vocab"));
  auto loaded = BpeVocab::load(tmp.path("v.vocab"));
  CHECK(loaded == v);
  for (const auto& line : corpus) CHECK(loaded.encode(line).ids == v.encode(line).ids);
  loaded.save(tmp.path("v2.vocab"));
  CHECK(read_file(tmp.path("v.vocab")) == read_file(tmp.path("v2.vocab")));
}

TEST_CASE("ties break on the lexicographically smaller pair") {
  // (a,b) and (c,d) both occur twice; every word-initial byte is distinct so
  // marker pairs occur once. Bytes "a" < "c" so (a,b) wins the merge slot.
  auto v = BpeVocab::train({"xab yab wcd zcd"}, 4 + 8 + 1);
  auto seq = v.encode("xab");
  // [marker, x, ab]
  REQUIRE(seq.ids.size() == 3);
  CHECK(v.token_text(seq.ids[2]) == "ab");
}
