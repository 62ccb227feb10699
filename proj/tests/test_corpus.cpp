#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <set>

#include "clm/corpus.hpp"

using namespace clm;

TEST_CASE("build_vocab counts and ordering") {
  Vocab v = build_vocab({"a b a"}, 1);
  CHECK(v.size() == 3);  // a, b, unk
  CHECK(v.lookup("a") == 0);
  CHECK(v.lookup("b") == 1);
  CHECK(v.unk_id == 2);
  CHECK(v.counts[0] == 2);
  CHECK(v.counts[1] == 1);

  SUBCASE("min_count threshold folds rare tokens into unk") {
    Vocab w = build_vocab({"a b a"}, 2);
    CHECK(w.size() == 2);
    CHECK(w.lookup("a") == 0);
    CHECK(w.lookup("b") == w.unk_id);
    CHECK(w.counts[w.unk_id] == 1);  // b's occurrence
  }

  SUBCASE("ties break lexicographically") {
    Vocab w = build_vocab({"c a b", "b"}, 1);
    CHECK(w.lookup("b") == 0);  // count 2
    CHECK(w.lookup("a") == 1);
    CHECK(w.lookup("c") == 2);
  }

  SUBCASE("literal unk token maps onto the reserved id") {
    Vocab w = build_vocab({"a <unk> a"}, 1);
    CHECK(w.size() == 2);
    CHECK(w.lookup("<unk>") == w.unk_id);
    CHECK(w.counts[w.unk_id] == 1);
  }
}

TEST_CASE("build_vocab rejects an empty corpus") {
  CHECK_THROWS_AS(build_vocab({}, 1), value_error);
  CHECK_THROWS_AS(build_vocab({"", "   "}, 1), value_error);
  CHECK_THROWS_AS(build_vocab({"a"}, 0), value_error);
}

TEST_CASE("encode and decode") {
  Vocab v = build_vocab({"a b a"}, 1);  // a:0 b:1 unk:2
  Sentence s = encode(v, "a b");
  CHECK(s.ids == std::vector<int32_t>{0, 1});

  SUBCASE("OOV maps to unk") {
    Sentence t = encode(v, "a z");
    CHECK(t.ids == std::vector<int32_t>{0, 2});
  }

  SUBCASE("round trip on in-vocab tokens") {
    CHECK(decode(v, encode(v, "a b")) == "a b");
    CHECK(decode(v, encode(v, "b a a b")) == "b a a b");
  }

  SUBCASE("empty line is an error") {
    CHECK_THROWS_AS(encode(v, ""), value_error);
    CHECK_THROWS_AS(encode(v, "   "), value_error);
  }
}

static Vocab numbered_vocab(int content_tokens) {
  std::string line;
  for (int i = 0; i < content_tokens; ++i) line += "w" + std::to_string(1000 + i) + " ";
  return build_vocab({line}, 1);
}

TEST_CASE("distort contract") {
  Vocab v = numbered_vocab(1000);
  Sentence s;
  for (int i = 0; i < 10; ++i) s.ids.push_back(i);

  SUBCASE("level zero is the identity") {
    Sentence out = distort(s, {0.0, 123}, v);
    CHECK(out.ids == s.ids);
  }

  SUBCASE("ceil(level*n) positions are resampled") {
    // With 999 candidate replacements, collisions with the original id are
    // unlikely; this seed produces none, so the diff count equals the draw
    // count exactly.
    Sentence out = distort(s, {0.1, 7}, v);
    REQUIRE(out.size() == s.size());
    int diffs = 0;
    for (int i = 0; i < s.size(); ++i) diffs += out.ids[i] != s.ids[i];
    CHECK(diffs == 1);

    Sentence out4 = distort(s, {0.31, 7}, v);  // ceil(3.1) = 4
    diffs = 0;
    for (int i = 0; i < s.size(); ++i) diffs += out4.ids[i] != s.ids[i];
    CHECK(diffs == 4);
  }

  SUBCASE("same inputs give identical outputs") {
    Sentence a = distort(s, {0.4, 99}, v);
    Sentence b = distort(s, {0.4, 99}, v);
    CHECK(a.ids == b.ids);
    Sentence c = distort(s, {0.4, 100}, v);
    CHECK(a.ids != c.ids);
  }

  SUBCASE("full distortion keeps length and never draws unk") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      Sentence out = distort(s, {1.0, seed}, v);
      REQUIRE(out.size() == s.size());
      for (int32_t id : out.ids) {
        CHECK(id != v.unk_id);
        CHECK(id < v.size());
      }
    }
  }

  SUBCASE("level bounds are enforced") {
    CHECK_THROWS_AS(distort(s, {-0.1, 1}, v), value_error);
    CHECK_THROWS_AS(distort(s, {1.5, 1}, v), value_error);
    CHECK_THROWS_AS(distort(Sentence{}, {0.5, 1}, v), value_error);
  }
}

TEST_CASE("distort draw count is exact across levels") {
  Vocab v = numbered_vocab(50);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.next_below(15));
    Sentence s;
    for (int i = 0; i < n; ++i)
      s.ids.push_back(static_cast<int32_t>(rng.next_below(v.size() - 1)));
    const double level = rng.next_double();
    Sentence out = distort(s, {level, rng.next_u64()}, v);
    REQUIRE(out.size() == n);
    const int m = static_cast<int>(std::ceil(level * n - 1e-9));
    int diffs = 0;
    for (int i = 0; i < n; ++i) diffs += out.ids[i] != s.ids[i];
    CHECK(diffs <= m);  // replacements may coincide with the original
  }
}

TEST_CASE("vocab serialization round trips byte for byte") {
  Vocab v = build_vocab({"the cat sat", "the cat", "the"}, 1);
  std::string text = vocab_to_string(v);
  Vocab loaded = vocab_from_string(text);
  CHECK(vocab_to_string(loaded) == text);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.unk_id == v.unk_id);
  CHECK(loaded.hash() == v.hash());
  CHECK(loaded.lookup("the") == v.lookup("the"));

  SUBCASE("malformed files are rejected") {
    CHECK_THROWS_AS(vocab_from_string("garbage"), io_error);
    CHECK_THROWS_AS(vocab_from_string("clm vocab v1\nsize 2 unk 5\n0 a 1\n1 <unk> 0\n"), io_error);
  }
}

TEST_CASE("encode_corpus skips blank lines") {
  Vocab v = build_vocab({"a b"}, 1);
  auto sentences = encode_corpus(v, {"a b", "", "  ", "b"});
  CHECK(sentences.size() == 2);
  CHECK(sentences[1].ids == std::vector<int32_t>{1});
}
