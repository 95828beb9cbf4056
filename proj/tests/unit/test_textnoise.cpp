#include <doctest.h>

#include <algorithm>
#include <functional>
#include <sstream>

#include "helpers.hpp"
#include "robomt/corpus.hpp"
#include "robomt/textnoise.hpp"

using namespace robomt;
using namespace robomt::textnoise;

namespace {

// Plain recursive definition, memoised.
std::size_t levenshtein_oracle(const std::string& a, const std::string& b) {
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
  std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
    if (i == 0) return j;
    if (j == 0) return i;
    auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const std::size_t v =
        std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] == b[j - 1] ? 0u : 1u)});
    return memo[key] = v;
  };
  return d(a.size(), b.size());
}

std::string random_word(Rng& rng, std::size_t max_len, const std::string& alphabet = "abcde") {
  const std::size_t len = 1 + rng.below(max_len);
  std::string w;
  for (std::size_t i = 0; i < len; ++i) w += alphabet[rng.below(alphabet.size())];
  return w;
}

phonlex::HomophoneIndex table1_homophones() {
  std::istringstream in("FLOWER  F L AW1 ER0\nFLOUR  F L AW1 ER0\nPINK  P IH1 NG K\nBLOOM  B L UW1 M\n");
  return phonlex::build_homophone_index(phonlex::parse_cmudict(in));
}

const TokenSeq kTable1 = {"a", "pink", "flower", "is", "starting", "to", "bloom", "."};

}  // namespace

TEST_SUITE("textnoise") {
  TEST_CASE("levenshtein matches the recursive definition") {
    Rng rng(1);
    for (int i = 0; i < 2000; ++i) {
      const auto a = random_word(rng, 7), b = random_word(rng, 7);
      REQUIRE(levenshtein(a, b) == levenshtein_oracle(a, b));
    }
    CHECK(levenshtein(std::string(), std::string("abc")) == 3);
    CHECK(levenshtein(std::string("kitten"), std::string("sitting")) == 3);
  }

  TEST_CASE("edit distance candidates") {
    CHECK(edit_distance_candidates("bloom", {"loom", "plume", "bloom"}, 1) == std::set<std::string>{"loom"});
    CHECK(edit_distance_candidates("loom", {"loom"}, 1).empty());
    CHECK(edit_distance_candidates("horse", {"horses", "house", "hose", "mouse"}, 1) ==
          std::set<std::string>{"horses", "house", "hose"});
  }

  TEST_CASE("edit index agrees with brute force") {
    Rng rng(2);
    for (std::size_t dist : {1u, 2u}) {
      std::set<std::string> vocab;
      while (vocab.size() < 400) vocab.insert(random_word(rng, 6));
      const EditIndex idx(vocab, dist);
      for (int q = 0; q < 300; ++q) {
        const auto w = random_word(rng, 7);
        REQUIRE(idx.candidates(w) == edit_distance_candidates(w, vocab, dist));
      }
    }
  }

  TEST_CASE("keyboard table is symmetric and irreflexive") {
    const auto& kb = KeyboardLayout::qwerty();
    for (char a = 'a'; a <= 'z'; ++a) {
      CHECK_FALSE(kb.is_adjacent(a, a));
      CHECK_FALSE(kb.adjacent(a).empty());
      for (char b : kb.adjacent(a)) CHECK(kb.is_adjacent(b, a));
    }
    CHECK(kb.adjacent('q') == std::set<char>{'w', 'a'});
    CHECK(kb.adjacent('m') == std::set<char>{'n', 'j', 'k'});
    CHECK_THROWS_AS(KeyboardLayout({{'A', "b"}}), ConfigError);
  }

  TEST_CASE("keyboard variants") {
    const auto& kb = KeyboardLayout::qwerty();
    CHECK(keyboard_variants("starting", kb).count("starring"));
    CHECK(keyboard_variants("1234", kb).empty());
    const auto quit = keyboard_variants("quit", kb);
    CHECK(quit.count("wuit"));
    CHECK(quit.count("auit"));
    CHECK(quit.count("qyit"));
    // q and s are not neighbours in the shipped table
    CHECK_FALSE(quit.count("suit"));
    // brute force: every variant differs in exactly one adjacent position
    std::size_t expected = 0;
    for (char c : std::string("quit")) expected += kb.adjacent(c).size();
    CHECK(quit.size() == expected);
  }

  TEST_CASE("eligibility") {
    CHECK_FALSE(is_eligible("a"));
    CHECK_FALSE(is_eligible("is"));
    CHECK_FALSE(is_eligible("..."));
    CHECK_FALSE(is_eligible("123"));
    CHECK(is_eligible("pink"));
    CHECK(is_eligible("a1b"));
  }

  TEST_CASE("perturb: trivial cases") {
    const auto hom = table1_homophones();
    NoiseResources res{nullptr, &hom, &KeyboardLayout::qwerty()};
    NoiseSpec spec;
    spec.n = 0;
    Rng rng(1);
    auto r = perturb_sentence(kTable1, NoiseType::keyboard, spec, res, rng);
    CHECK(r.tokens == kTable1);
    CHECK(r.record.type == NoiseType::none);
    spec.n = 3;
    r = perturb_sentence({"a", "is", "to", "."}, NoiseType::keyboard, spec, res, rng);
    CHECK(r.tokens == TokenSeq{"a", "is", "to", "."});
    CHECK(r.record.subs.empty());
  }

  TEST_CASE("perturb: forced homophone draw on the example sentence") {
    const auto hom = table1_homophones();
    NoiseResources res{nullptr, &hom, &KeyboardLayout::qwerty()};
    NoiseSpec spec;
    spec.n = 4;  // every eligible position is drawn; only "flower" has candidates
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto r = perturb_sentence(kTable1, NoiseType::homophone, spec, res, rng);
      REQUIRE(detokenize(r.tokens) == "a pink flour is starting to bloom .");
      REQUIRE(r.record.subs == std::vector<Substitution>{{2, "flower", "flour"}});
      REQUIRE(r.record.type == NoiseType::homophone);
    }
  }

  TEST_CASE("perturb: edit example") {
    const EditIndex idx({"loom", "plume", "bloom"}, 1);
    NoiseResources res{&idx, nullptr, &KeyboardLayout::qwerty()};
    NoiseSpec spec;
    spec.n = 4;
    Rng rng(3);
    const auto r = perturb_sentence(kTable1, NoiseType::edit, spec, res, rng);
    CHECK(detokenize(r.tokens) == "a pink flower is starting to loom .");
  }

  TEST_CASE("noise spec validation") {
    NoiseSpec s;
    CHECK_NOTHROW(s.validate());
    s.type_weights = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(s.validate(), ConfigError);
    s.type_weights = {1.5, -0.5, 0.0};
    CHECK_THROWS_AS(s.validate(), ConfigError);
  }

  TEST_CASE("corpus injection properties") {
    corpus::SyntheticOptions so;
    so.num_sentences = 3000;
    so.seed = 5;
    const auto syn = corpus::gen_synthetic_grounded(so);
    const auto& lex = test::shipped_lexicon();
    const auto hom = phonlex::build_homophone_index(lex);
    std::set<std::string> vocab;
    for (const auto& [w, _] : lex.entries)
      if (std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) vocab.insert(w);
    const EditIndex idx(vocab, 1);
    const NoiseResources res{&idx, &hom, &KeyboardLayout::qwerty()};

    for (std::size_t n : {1u, 2u, 4u}) {
      NoiseSpec spec;
      spec.n = n;
      spec.seed = 77 + n;
      const auto out = inject_corpus(syn.source, spec, res);
      REQUIRE(out.sentences.size() == syn.source.size());
      for (std::size_t i = 0; i < out.sentences.size(); ++i) {
        const auto& x = syn.source[i];
        const auto& y = out.sentences[i];
        const auto& rec = out.records[i];
        REQUIRE(rec.sentence_index == i);
        REQUIRE(y.size() == x.size());
        REQUIRE(rec.subs.size() <= n);
        REQUIRE((rec.type == NoiseType::none) == rec.subs.empty());
        std::size_t changed = 0;
        for (std::size_t p = 0; p < x.size(); ++p) {
          if (x[p] == y[p]) continue;
          ++changed;
          REQUIRE(x[p].size() > 2);
        }
        REQUIRE(changed == rec.subs.size());
        for (std::size_t k = 0; k < rec.subs.size(); ++k) {
          const auto& s = rec.subs[k];
          if (k) REQUIRE(rec.subs[k - 1].pos < s.pos);
          REQUIRE(s.orig == x[s.pos]);
          REQUIRE(s.replacement == y[s.pos]);
          switch (rec.type) {
            case NoiseType::edit:
              REQUIRE(vocab.count(s.replacement));
              REQUIRE(levenshtein(s.orig, s.replacement) == 1);
              break;
            case NoiseType::homophone: {
              bool shared = false;
              for (const auto& k1 : hom.keys_of(s.orig))
                for (const auto& k2 : hom.keys_of(s.replacement)) shared |= k1 == k2;
              REQUIRE(shared);
              break;
            }
            case NoiseType::keyboard: {
              REQUIRE(s.orig.size() == s.replacement.size());
              std::size_t diff = 0;
              for (std::size_t c = 0; c < s.orig.size(); ++c)
                if (s.orig[c] != s.replacement[c]) {
                  ++diff;
                  REQUIRE(KeyboardLayout::qwerty().is_adjacent(s.orig[c], s.replacement[c]));
                }
              REQUIRE(diff == 1);
              break;
            }
            case NoiseType::none: FAIL("substitution under type none");
          }
        }
      }
    }
  }

  TEST_CASE("injection is deterministic and thread independent") {
    corpus::SyntheticOptions so;
    so.num_sentences = 500;
    const auto syn = corpus::gen_synthetic_grounded(so);
    const auto hom = phonlex::build_homophone_index(test::shipped_lexicon());
    const EditIndex idx({"bed", "rod", "bold", "cold", "cane", "king", "ant", "bell", "glue"}, 1);
    const NoiseResources res{&idx, &hom, &KeyboardLayout::qwerty()};
    NoiseSpec spec;
    spec.n = 2;
    spec.seed = 9;
    const auto a = inject_corpus(syn.source, spec, res, 1);
    const auto b = inject_corpus(syn.source, spec, res, 1);
    const auto c = inject_corpus(syn.source, spec, res, 8);
    CHECK(a.sentences == b.sentences);
    CHECK(a.records == b.records);
    CHECK(a.sentences == c.sentences);
    CHECK(a.records == c.records);
    // sentence i does not depend on the rest of the corpus
    const auto tail = inject_corpus(Corpus(syn.source.begin(), syn.source.begin() + 10), spec, res);
    for (std::size_t i = 0; i < 10; ++i) CHECK(tail.sentences[i] == a.sentences[i]);
    spec.seed = 10;
    CHECK(inject_corpus(syn.source, spec, res).sentences != a.sentences);
  }

  TEST_CASE("type weights") {
    corpus::SyntheticOptions so;
    so.num_sentences = 10000;
    so.seed = 21;
    const auto syn = corpus::gen_synthetic_grounded(so);
    const auto hom = phonlex::build_homophone_index(test::shipped_lexicon());
    const EditIndex idx({"bed", "rod", "bold", "cold", "cane", "king", "ant", "bell", "glue", "cubs", "grean"}, 1);
    const NoiseResources res{&idx, &hom, &KeyboardLayout::qwerty()};

    NoiseSpec spec;
    spec.n = 2;
    spec.seed = 4;
    spec.type_weights = {1.0, 0.0, 0.0};
    for (const auto& r : inject_corpus(syn.source, spec, res).records)
      REQUIRE((r.type == NoiseType::edit || r.type == NoiseType::none));

    spec.type_weights = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    std::map<NoiseType, double> counts;
    double total = 0;
    for (const auto& r : inject_corpus(syn.source, spec, res).records)
      if (r.type != NoiseType::none) {
        counts[r.type] += 1;
        total += 1;
      }
    REQUIRE(total > 9000);
    for (auto t : {NoiseType::edit, NoiseType::homophone, NoiseType::keyboard})
      CHECK(std::abs(counts[t] / total - 1.0 / 3) <= 0.02);
  }

  TEST_CASE("homophone noise without a dictionary is a configuration error") {
    const NoiseResources res{nullptr, nullptr, &KeyboardLayout::qwerty()};
    NoiseSpec spec;
    CHECK_THROWS_AS(inject_corpus({{"red", "cube"}}, spec, res), ConfigError);
    spec.type_weights = {0.0, 0.0, 1.0};
    CHECK_NOTHROW(inject_corpus({{"red", "cube"}}, spec, res));
    CHECK_THROWS_AS(inject_corpus({}, spec, res), DataError);
  }

  TEST_CASE("unk masking") {
    const TokenSeq x = {"a", "red", "cube", "and", "a", "blue", "ball"};
    CHECK(mask_unk(x, 0, 1) == x);
    const auto all = mask_unk(x, 100, 1);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(all[i] == (is_eligible(x[i]) ? kUnkToken : x[i]));
    CHECK(mask_unk(x, 2, 5) == mask_unk(x, 2, 5));
    for (std::uint64_t s = 0; s < 50; ++s) {
      const auto m = mask_unk(x, 2, s);
      REQUIRE(std::count(m.begin(), m.end(), std::string(kUnkToken)) == 2);
    }
  }

  TEST_CASE("clean/noisy mixing") {
    Corpus clean(10000, TokenSeq{"clean"}), noisy(10000, TokenSeq{"noisy"});
    CHECK(mix_clean_noisy(clean, noisy, 0.0, 1).sentences == clean);
    CHECK(mix_clean_noisy(clean, noisy, 1.0, 1).sentences == noisy);
    const auto m = mix_clean_noisy(clean, noisy, 0.5, 1);
    const double share = double(std::count(m.noisy.begin(), m.noisy.end(), true)) / 10000.0;
    CHECK(share >= 0.47);
    CHECK(share <= 0.53);
    for (std::size_t i = 0; i < 10000; ++i) REQUIRE(m.sentences[i] == (m.noisy[i] ? noisy[i] : clean[i]));
    CHECK_THROWS_AS(mix_clean_noisy(clean, Corpus(3), 0.5, 1), DataError);
  }

  TEST_CASE("noise records round trip through JSON lines") {
    NoiseRecord r{3, NoiseType::keyboard, {{1, "ring", "rong"}, {4, "cube", "cuve"}}};
    const auto line = record_to_json(r);
    CHECK(line.find("\"idx\":3") != std::string::npos);
    CHECK(line.find("\"new\":\"rong\"") != std::string::npos);
    CHECK(record_from_json(line) == r);
    CHECK(record_from_json(record_to_json(NoiseRecord{})) == NoiseRecord{});
    CHECK_THROWS_AS(record_from_json("{\"idx\": 1}"), DataError);
    const auto dir = test::scratch_dir("records");
    write_records((dir / "r.jsonl").string(), {r, NoiseRecord{4, NoiseType::none, {}}});
    const auto back = read_records((dir / "r.jsonl").string());
    REQUIRE(back.size() == 2);
    CHECK(back[0] == r);
  }
}
