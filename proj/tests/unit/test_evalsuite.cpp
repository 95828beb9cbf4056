#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "robomt/evalsuite.hpp"
#include "robomt/textnoise.hpp"

using namespace robomt;
using namespace robomt::evalsuite;

namespace {

// Straightforward chrF on byte strings (ASCII inputs only).
double chrf_oracle(std::string hyp, std::string ref, int n_max = 6, double beta = 2.0) {
  std::erase_if(hyp, [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
  std::erase_if(ref, [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
  double p = 0, r = 0;
  int np = 0, nr = 0;
  for (int n = 1; n <= n_max; ++n) {
    std::map<std::string, int> hc, rc;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) ++hc[hyp.substr(i, n)];
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++rc[ref.substr(i, n)];
    int match = 0, ht = 0, rt = 0;
    for (const auto& [g, c] : hc) {
      ht += c;
      if (rc.count(g)) match += std::min(c, rc[g]);
    }
    for (const auto& [g, c] : rc) rt += c;
    if (ht) p += double(match) / ht, ++np;
    if (rt) r += double(match) / rt, ++nr;
  }
  p = np ? p / np : 0;
  r = nr ? r / nr : 0;
  const double b2 = beta * beta;
  return b2 * p + r > 0 ? (1 + b2) * p * r / (b2 * p + r) : 0;
}

std::string random_text(Rng& rng, std::size_t max_len) {
  const std::string alphabet = "abc d";
  std::string s;
  const std::size_t len = rng.below(max_len + 1);
  for (std::size_t i = 0; i < len; ++i) s += alphabet[rng.below(alphabet.size())];
  return s;
}

TokenSeq random_tokens(Rng& rng, std::size_t max_len) {
  TokenSeq t;
  const std::size_t len = rng.below(max_len + 1);
  for (std::size_t i = 0; i < len; ++i) t.push_back(std::string(1, char('a' + rng.below(3))));
  return t;
}

// Enumerates every alignment path from the end; keeps the cheapest and,
// among those, the lexicographically smallest op string (0 diag, 1 del, 2 ins).
EditSet edits_oracle(const TokenSeq& a, const TokenSeq& b) {
  std::size_t best_cost = SIZE_MAX;
  std::vector<int> best_ops;
  std::vector<int> ops;
  std::function<void(std::size_t, std::size_t, std::size_t)> walk = [&](std::size_t i, std::size_t j, std::size_t cost) {
    if (cost > best_cost) return;
    if (i == 0 && j == 0) {
      if (cost < best_cost || ops < best_ops) best_cost = cost, best_ops = ops;
      return;
    }
    if (i > 0 && j > 0) {
      ops.push_back(0);
      walk(i - 1, j - 1, cost + (a[i - 1] != b[j - 1]));
      ops.pop_back();
    }
    if (i > 0) {
      ops.push_back(1);
      walk(i - 1, j, cost + 1);
      ops.pop_back();
    }
    if (j > 0) {
      ops.push_back(2);
      walk(i, j - 1, cost + 1);
      ops.pop_back();
    }
  };
  walk(a.size(), b.size(), 0);
  EditSet rev;
  std::size_t i = a.size(), j = b.size();
  for (int op : best_ops) {
    if (op == 0) {
      if (a[i - 1] != b[j - 1]) rev.push_back({i - 1, i, b[j - 1], EditKind::substitute});
      --i, --j;
    } else if (op == 1) {
      rev.push_back({i - 1, i, "", EditKind::remove});
      --i;
    } else {
      rev.push_back({i, i, b[j - 1], EditKind::insert});
      --j;
    }
  }
  return {rev.rbegin(), rev.rend()};
}

}  // namespace

TEST_SUITE("evalsuite") {
  TEST_CASE("chrF agrees with a direct count") {
    Rng rng(21);
    for (int k = 0; k < 400; ++k) {
      const auto ref = random_text(rng, 12);
      if (ref.find_first_not_of(' ') == std::string::npos) continue;
      const auto hyp = random_text(rng, 12);
      REQUIRE(chrf(hyp, ref) == doctest::Approx(chrf_oracle(hyp, ref)).epsilon(1e-12));
    }
    CHECK(chrf("the cat sat", "the cat sat") == 1.0);
    CHECK(chrf("zzz", "abc") == 0.0);
    CHECK(chrf("", "abc") == 0.0);
    CHECK_THROWS_AS(chrf("abc", ""), DataError);
    CHECK_THROWS_AS(chrf("abc", "   "), DataError);
  }

  TEST_CASE("chrF ignores whitespace and counts code points") {
    CHECK(chrf("a b c", "abc") == 1.0);
    CHECK(chrf("ab  c", "a bc") == 1.0);
    const auto st = chrf_stats("\xc3\xa9t\xc3\xa9", "\xc3\xa9t\xc3\xa9");
    CHECK(st.hyp_total[0] == 3);
    CHECK(st.hyp_total[2] == 1);
    CHECK(st.hyp_total[3] == 0);
  }

  TEST_CASE("corpus chrF sums statistics") {
    const std::vector<std::string> h{"abcd", "xy"}, r{"abce", "xyz"};
    ChrfStats sum;
    for (std::size_t i = 0; i < h.size(); ++i) sum += chrf_stats(h[i], r[i]);
    CHECK(corpus_chrf(h, r) == doctest::Approx(sum.score()));
    CHECK(corpus_chrf({"abc"}, {"abc"}) == 1.0);
    CHECK_THROWS_AS(corpus_chrf({"a"}, {"a", "b"}), DataError);
  }

  TEST_CASE("edit extraction matches exhaustive alignment") {
    Rng rng(4);
    for (int k = 0; k < 600; ++k) {
      const auto a = random_tokens(rng, 4), b = random_tokens(rng, 4);
      const auto e = extract_edits(a, b);
      REQUIRE(e == edits_oracle(a, b));
      REQUIRE(apply_edits(a, e) == b);
    }
  }

  TEST_CASE("edit examples") {
    const TokenSeq noisy{"a", "pink", "flour"}, clean{"a", "pink", "flower"};
    const auto e = extract_edits(noisy, clean);
    REQUIRE(e.size() == 1);
    CHECK(e[0] == Edit{2, 3, "flower", EditKind::substitute});
    CHECK(extract_edits(clean, clean).empty());
    const auto ins = extract_edits({"x"}, {"x", "y", "y"});
    REQUIRE(ins.size() == 2);
    CHECK(ins[0] == ins[1]);  // duplicates are kept
    CHECK(ins[0].kind == EditKind::insert);
    CHECK(extract_edits({"x", "y"}, {"x"}) == EditSet{{1, 2, "", EditKind::remove}});
    CHECK_THROWS_AS(apply_edits({"x"}, {{0, 2, "", EditKind::remove}}), DataError);
  }

  TEST_CASE("correction F0.5") {
    const Edit e1{0, 1, "a", EditKind::substitute}, e2{1, 2, "b", EditKind::substitute};
    const auto half = correction_f({e1}, {e1, e2});
    CHECK(half.precision == 1.0);
    CHECK(half.recall == 0.5);
    CHECK(half.f == doctest::Approx(0.8333).epsilon(1e-4));
    const auto none = correction_f({}, {});
    CHECK(none.precision == 1.0);
    CHECK(none.recall == 1.0);
    CHECK(none.f == 1.0);
    CHECK(correction_f({e1}, {}).f == 0.0);
    CHECK(correction_f({}, {e1}).f == 0.0);
    // multiset semantics
    const auto c = count_edits({e1, e1}, {e1});
    CHECK(c.tp == 1);
    CHECK(c.fp == 1);
    CHECK(c.fn == 0);
  }

  TEST_CASE("F-beta swaps precision and recall with 1/beta") {
    Rng rng(6);
    for (int k = 0; k < 200; ++k) {
      const double p = rng.uniform(), r = rng.uniform(), b = 0.1 + 3 * rng.uniform();
      REQUIRE(f_beta(p, r, b).f == doctest::Approx(f_beta(r, p, 1 / b).f).epsilon(1e-12));
      const double f = f_beta(p, r, b).f;
      REQUIRE(f >= std::min(p, r) - 1e-12);
      REQUIRE(f <= std::max(p, r) + 1e-12);
    }
    CHECK(f_beta(0, 0, 0.5).f == 0.0);
  }

  TEST_CASE("scoring corrections over a corpus") {
    const Corpus noisy{{"a", "pink", "flour"}, {"the", "cat"}};
    const Corpus clean{{"a", "pink", "flower"}, {"the", "cat"}};
    CHECK(score_corrections(noisy, clean, clean).corpus_score == 1.0);
    const auto copy = score_corrections(noisy, noisy, clean);
    CHECK(copy.corpus_score == 0.0);
    CHECK(copy.per_sentence == std::vector<double>{0.0, 1.0});
    CHECK(copy.metric == "correction_f0.5");
    CHECK_THROWS_AS(score_corrections(noisy, noisy, {clean[0]}), DataError);
    const auto mt = score_translations(clean, clean);
    CHECK(mt.corpus_score == 1.0);
    CHECK(mt.per_sentence.size() == 2);
  }

  TEST_CASE("cosine probe") {
    graph::Mat<double> a(2, 3), b(2, 3);
    a << 1, 0, 0, 1, 1, 0;
    b << 2, 0, 0, -1, -1, 0;
    CHECK(cosine_probe(a, b) == doctest::Approx(0.0));
    CHECK(cosine_probe(a, a) == doctest::Approx(1.0));
    Rng rng(2);
    for (int k = 0; k < 50; ++k) {
      graph::Mat<float> x(3, 4), y(3, 4);
      for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = float(rng.normal()), y(i) = float(rng.normal());
      const double c = cosine_probe(x, y);
      REQUIRE(c >= -1.0);
      REQUIRE(c <= 1.0);
    }
    CHECK_THROWS_AS(cosine_probe(a, graph::Mat<double>(3, 3)), DataError);
    CHECK_THROWS_AS(cosine_probe(graph::Mat<double>(0, 3), graph::Mat<double>(0, 3)), DataError);
    CHECK_THROWS_AS(cosine_probe(a, graph::Mat<double>(graph::Mat<double>::Zero(2, 3))), DataError);
  }

  TEST_CASE("incongruent shuffle") {
    corpus::FeatureSet two{1, 2, {1, 2, 3, 4}};
    CHECK(incongruent_shuffle(two).values == std::vector<float>{3, 4, 1, 2});
    CHECK_THROWS_AS(incongruent_shuffle(corpus::FeatureSet{1, 2, {1, 2}}), DataError);

    for (std::size_t n : {3, 7, 10}) {
      corpus::FeatureSet f{2, 1, {}};
      for (std::size_t i = 0; i < n; ++i) f.values.insert(f.values.end(), {float(i), float(i) + 0.5f});
      const auto s = incongruent_shuffle(f, 99);
      for (std::size_t i = 0; i < n; ++i) CHECK(s.sample(i)[0] != f.sample(i)[0]);
      auto back = f;
      for (std::size_t k = 0; k < n; ++k) back = incongruent_shuffle(back);
      CHECK(back == f);
      CHECK(incongruent_shuffle(f, 1) == incongruent_shuffle(f, 2));
    }
  }

  TEST_CASE("score report JSON round trip") {
    ScoreReport r;
    r.metric = "chrf";
    r.variant = "MMT-cor";
    r.corpus_score = 0.8125;
    r.n = 2;
    r.seed = 3;
    r.per_sentence = {0.5, 1.0};
    r.config_digest = "abc";
    r.seeds = {1, 2, 3};
    const auto back = ScoreReport::from_json(r.to_json());
    CHECK(back.to_json() == r.to_json());
    CHECK(back.n == std::optional<std::size_t>{2});
    CHECK_FALSE(back.meteor.has_value());
    CHECK_THROWS_AS(ScoreReport::from_json(nlohmann::json{{"metric", "chrf"}}), DataError);
  }
}
