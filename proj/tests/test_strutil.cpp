#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "kgseq/strutil.hpp"

using namespace kgseq;

TEST_CASE("normalize_ws collapses runs and trims") {
  CHECK(normalize_ws("  who   directed Inception ") == "who directed Inception");
  CHECK(normalize_ws("a\tb\nc") == "a b c");
  CHECK(normalize_ws("") == "");
  CHECK(normalize_ws("   ") == "");
  CHECK(normalize_ws("x") == "x");
}

TEST_CASE("split keeps empty fields") {
  auto f = split("a\t\tb", '\t');
  REQUIRE(f.size() == 3);
  CHECK(f[0] == "a");
  CHECK(f[1] == "");
  CHECK(f[2] == "b");
  CHECK(split("", '\t').size() == 1);
}

TEST_CASE("fnv1a is stable") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == fnv1a("a"));
  CHECK(fnv1a("a") != fnv1a("b"));
}

TEST_CASE("parse_int") {
  long long v = 0;
  CHECK(parse_int("42", v));
  CHECK(v == 42);
  CHECK(parse_int("-7", v));
  CHECK(v == -7);
  CHECK_FALSE(parse_int("", v));
  CHECK_FALSE(parse_int("4x", v));
  CHECK_FALSE(parse_int("-", v));
}
