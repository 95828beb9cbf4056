#include <doctest.h>

#include <sstream>

#include "helpers.hpp"
#include "robomt/phonlex.hpp"

using namespace robomt;
using namespace robomt::phonlex;

namespace {

PronLexicon parse(const std::string& text) {
  std::istringstream in(text);
  return parse_cmudict(in);
}

}  // namespace

TEST_SUITE("phonlex") {
  TEST_CASE("comment lines produce no entry") {
    CHECK(parse(";;; comment line\n").size() == 0);
  }

  TEST_CASE("entry line") {
    const auto lex = parse("FLOWER  F L AW1 ER0\n");
    REQUIRE(lex.contains("flower"));
    CHECK(lex.entries.at("flower") == std::vector<Pronunciation>{{"F", "L", "AW1", "ER0"}});
  }

  TEST_CASE("variants fold into the base word") {
    const auto lex = parse("READ  R IY1 D\nREAD(2)  R EH1 D\n");
    REQUIRE(lex.entries.at("read").size() == 2);
    CHECK(lex.entries.at("read")[1] == Pronunciation{"R", "EH1", "D"});
  }

  TEST_CASE("malformed line reports its line number") {
    try {
      parse(";;; header\nGOOD  G UH1 D\nBROKEN\n");
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
    CHECK_THROWS_AS(parse("WORD  G lowercase\n"), ParseError);
  }

  TEST_CASE("punctuation entries are dropped") {
    const auto lex = parse("!EXCLAMATION-POINT  EH2 K S\n'BOUT  B AW1 T\nBOUT  B AW1 T\n");
    CHECK(lex.size() == 1);
    CHECK(lex.contains("bout"));
  }

  TEST_CASE("stress stripping") {
    CHECK(strip_stress("AW1") == "AW");
    CHECK(strip_stress("ER0") == "ER");
    CHECK(strip_stress("T") == "T");
    for (const char* p : {"AW1", "ER0", "IY2", "NG"}) CHECK(strip_stress(strip_stress(p)) == strip_stress(p));
    CHECK(pronunciation_key({"F", "L", "AW1", "ER0"}) == "F L AW ER");
  }

  TEST_CASE("flower and flour share a key") {
    const auto idx = build_homophone_index(parse("FLOWER  F L AW1 ER0\nFLOUR  F L AW1 ER0\nROSE  R OW1 Z\n"));
    CHECK(idx.key_to_words().at("F L AW ER") == std::set<std::string>{"flour", "flower"});
    CHECK(idx.homophones("flower") == std::set<std::string>{"flour"});
    CHECK(idx.homophones("rose").empty());
    CHECK(idx.homophones("xqzzy").empty());
  }

  TEST_CASE("empty lexicon is rejected") { CHECK_THROWS_AS(build_homophone_index(PronLexicon{}), ConfigError); }

  TEST_CASE("shipped dictionary lookups") {
    const auto& lex = test::shipped_lexicon();
    CHECK(lex.size() > 100000);
    const auto idx = build_homophone_index(lex);
    CHECK(idx.homophones("flower").count("flour"));
    CHECK(idx.homophones("ate").count("eight"));
    const auto read = idx.homophones("read");
    CHECK(read.count("reed"));
    CHECK(read.count("red"));
    // read lives under both of its keys
    CHECK(idx.keys_of("read").size() == 2);
  }

  TEST_CASE("homophony is symmetric and keys are consistent") {
    const auto& lex = test::shipped_lexicon();
    const auto idx = build_homophone_index(lex);
    std::size_t checked = 0;
    for (const auto& [key, words] : idx.key_to_words()) {
      for (const auto& w : words) {
        bool has = false;
        for (const auto& p : lex.entries.at(w)) has |= pronunciation_key(p) == key;
        REQUIRE(has);
      }
      if (words.size() > 1 && checked < 2000) {
        for (const auto& w1 : words)
          for (const auto& w2 : idx.homophones(w1)) REQUIRE(idx.homophones(w2).count(w1));
        ++checked;
      }
    }
    CHECK(checked > 100);
  }
}
