#include "robomt/evalsuite.hpp"

#include <algorithm>
#include <map>

namespace robomt::evalsuite {

namespace {

std::u32string code_points_without_space(const std::string& s) {
  std::u32string out;
  for (std::size_t i = 0; i < s.size();) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    char32_t cp;
    std::size_t len;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c >> 5) == 0x6) {
      cp = c & 0x1f;
      len = 2;
    } else if ((c >> 4) == 0xe) {
      cp = c & 0x0f;
      len = 3;
    } else if ((c >> 3) == 0x1e) {
      cp = c & 0x07;
      len = 4;
    } else {  // stray continuation byte: keep it as its own symbol
      cp = c;
      len = 1;
    }
    for (std::size_t k = 1; k < len && i + k < s.size(); ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3f);
    i += len;
    if (cp == U' ' || cp == U'\t' || cp == U'\n' || cp == U'\r' || cp == U'\v' || cp == U'\f') continue;
    out.push_back(cp);
  }
  return out;
}

std::map<std::u32string, std::size_t> ngram_counts(const std::u32string& s, std::size_t n) {
  std::map<std::u32string, std::size_t> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[s.substr(i, n)];
  return out;
}

}  // namespace

ChrfStats& ChrfStats::operator+=(const ChrfStats& o) {
  for (std::size_t i = 0; i < matches.size(); ++i) {
    matches[i] += o.matches[i];
    hyp_total[i] += o.hyp_total[i];
    ref_total[i] += o.ref_total[i];
  }
  return *this;
}

double ChrfStats::score(double beta) const {
  double p = 0, r = 0;
  int np = 0, nr = 0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (hyp_total[i] > 0) {
      p += matches[i] / hyp_total[i];
      ++np;
    }
    if (ref_total[i] > 0) {
      r += matches[i] / ref_total[i];
      ++nr;
    }
  }
  p = np ? p / np : 0.0;
  r = nr ? r / nr : 0.0;
  const double b2 = beta * beta;
  const double denom = b2 * p + r;
  return denom > 0 ? (1 + b2) * p * r / denom : 0.0;
}

ChrfStats chrf_stats(const std::string& hypothesis, const std::string& reference, int n_max) {
  const auto hyp = code_points_without_space(hypothesis);
  const auto ref = code_points_without_space(reference);
  if (ref.empty()) throw DataError("chrF: empty reference");
  ChrfStats st(n_max);
  for (int n = 1; n <= n_max; ++n) {
    const auto hc = ngram_counts(hyp, static_cast<std::size_t>(n));
    const auto rc = ngram_counts(ref, static_cast<std::size_t>(n));
    double m = 0, ht = 0, rt = 0;
    for (const auto& [g, c] : hc) {
      ht += double(c);
      auto it = rc.find(g);
      if (it != rc.end()) m += double(std::min(c, it->second));
    }
    for (const auto& [g, c] : rc) rt += double(c);
    st.matches[n - 1] = m;
    st.hyp_total[n - 1] = ht;
    st.ref_total[n - 1] = rt;
  }
  return st;
}

double chrf(const std::string& hypothesis, const std::string& reference, int n_max, double beta) {
  return chrf_stats(hypothesis, reference, n_max).score(beta);
}

double corpus_chrf(const std::vector<std::string>& hyps, const std::vector<std::string>& refs, int n_max,
                   double beta) {
  if (hyps.size() != refs.size()) throw DataError("chrF: hypothesis/reference count mismatch");
  ChrfStats total(n_max);
  for (std::size_t i = 0; i < hyps.size(); ++i) total += chrf_stats(hyps[i], refs[i], n_max);
  return total.score(beta);
}

// ---------------------------------------------------------------------------

std::string to_string(EditKind k) {
  switch (k) {
    case EditKind::insert: return "insert";
    case EditKind::remove: return "delete";
    case EditKind::substitute: return "substitute";
  }
  return "?";
}

EditSet extract_edits(const TokenSeq& a, const TokenSeq& b) {
  const std::size_t m = a.size(), n = b.size();
  std::vector<std::vector<std::size_t>> d(m + 1, std::vector<std::size_t>(n + 1));
  for (std::size_t i = 0; i <= m; ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= n; ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= m; ++i)
    for (std::size_t j = 1; j <= n; ++j)
      d[i][j] = std::min({d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1), d[i - 1][j] + 1, d[i][j - 1] + 1});

  EditSet rev;
  std::size_t i = m, j = n;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)) {
      if (a[i - 1] != b[j - 1]) rev.push_back({i - 1, i, b[j - 1], EditKind::substitute});
      --i;
      --j;
    } else if (i > 0 && d[i][j] == d[i - 1][j] + 1) {
      rev.push_back({i - 1, i, "", EditKind::remove});
      --i;
    } else {
      rev.push_back({i, i, b[j - 1], EditKind::insert});
      --j;
    }
  }
  return {rev.rbegin(), rev.rend()};
}

TokenSeq apply_edits(const TokenSeq& noisy, const EditSet& edits) {
  TokenSeq out;
  std::size_t pos = 0;
  for (const auto& e : edits) {
    if (e.start < pos || e.end > noisy.size() || e.end < e.start) throw DataError("edit list is not ordered or out of range");
    while (pos < e.start) out.push_back(noisy[pos++]);
    switch (e.kind) {
      case EditKind::insert:
        out.push_back(e.replacement);
        break;
      case EditKind::remove:
        pos = e.end;
        break;
      case EditKind::substitute:
        out.push_back(e.replacement);
        pos = e.end;
        break;
    }
  }
  while (pos < noisy.size()) out.push_back(noisy[pos++]);
  return out;
}

PRF f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double denom = b2 * precision + recall;
  return {precision, recall, denom > 0 ? (1 + b2) * precision * recall / denom : 0.0};
}

PRF EditCounts::prf(double beta) const {
  const double p = tp + fp ? double(tp) / double(tp + fp) : 1.0;
  const double r = tp + fn ? double(tp) / double(tp + fn) : 1.0;
  return f_beta(p, r, beta);
}

EditCounts count_edits(const EditSet& sys, const EditSet& gold) {
  std::vector<Edit> s(sys), g(gold);
  std::sort(s.begin(), s.end());
  std::sort(g.begin(), g.end());
  std::vector<Edit> common;
  std::set_intersection(s.begin(), s.end(), g.begin(), g.end(), std::back_inserter(common));
  return {common.size(), s.size() - common.size(), g.size() - common.size()};
}

PRF correction_f(const EditSet& sys, const EditSet& gold, double beta) { return count_edits(sys, gold).prf(beta); }

corpus::FeatureSet incongruent_shuffle(const corpus::FeatureSet& features, std::uint64_t /*seed*/) {
  const std::size_t n = features.count();
  if (n < 2) throw DataError("incongruent decoding needs at least two feature samples");
  corpus::FeatureSet out{features.regions, features.dim, std::vector<float>(features.values.size())};
  const std::size_t stride = std::size_t(features.regions) * features.dim;
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(features.sample((i + 1) % n), stride, out.sample(i));
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json ScoreReport::to_json() const {
  nlohmann::json j{{"metric", metric},
                   {"corpus_score", corpus_score},
                   {"variant", variant},
                   {"seed", seed},
                   {"per_sentence", per_sentence},
                   {"config_digest", config_digest},
                   {"seeds", seeds}};
  j["n"] = n ? nlohmann::json(*n) : nlohmann::json(nullptr);
  j["meteor"] = meteor ? nlohmann::json(*meteor) : nlohmann::json(nullptr);
  return j;
}

ScoreReport ScoreReport::from_json(const nlohmann::json& j) {
  ScoreReport r;
  try {
    r.metric = j.at("metric").get<std::string>();
    r.corpus_score = j.at("corpus_score").get<double>();
    r.variant = j.value("variant", std::string());
    r.seed = j.value("seed", std::uint64_t{0});
    r.per_sentence = j.value("per_sentence", std::vector<double>{});
    r.config_digest = j.value("config_digest", std::string());
    r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    if (j.contains("n") && !j["n"].is_null()) r.n = j["n"].get<std::size_t>();
    if (j.contains("meteor") && !j["meteor"].is_null()) r.meteor = j["meteor"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed score report: ") + e.what());
  }
  return r;
}

ScoreReport score_translations(const Corpus& hyps, const Corpus& refs) {
  if (hyps.size() != refs.size()) throw DataError("score-mt: hypothesis/reference count mismatch");
  ScoreReport rep;
  rep.metric = "chrf";
  std::vector<std::string> h, r;
  for (std::size_t i = 0; i < hyps.size(); ++i) {
    h.push_back(detokenize(hyps[i]));
    r.push_back(detokenize(refs[i]));
    rep.per_sentence.push_back(chrf(h.back(), r.back()));
  }
  rep.corpus_score = corpus_chrf(h, r);
  return rep;
}

ScoreReport score_corrections(const Corpus& noisy, const Corpus& corrected, const Corpus& clean) {
  if (noisy.size() != corrected.size() || noisy.size() != clean.size())
    throw DataError("score-cor: corpus size mismatch");
  ScoreReport rep;
  rep.metric = "correction_f0.5";
  EditCounts total;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    const auto c = count_edits(extract_edits(noisy[i], corrected[i]), extract_edits(noisy[i], clean[i]));
    rep.per_sentence.push_back(c.prf().f);
    total += c;
  }
  rep.corpus_score = total.prf().f;
  return rep;
}

}  // namespace robomt::evalsuite
