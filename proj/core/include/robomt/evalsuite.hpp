#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robomt/common.hpp"
#include "robomt/corpus.hpp"
#include "robomt/graph.hpp"

namespace robomt::evalsuite {

// ---------------------------------------------------------------------------
// chrF: character n-gram F-score. Whitespace is removed before n-gram
// extraction; characters are UTF-8 code points.

struct ChrfStats {
  // [n-1] -> matched, hypothesis total, reference total
  std::vector<double> matches, hyp_total, ref_total;

  explicit ChrfStats(int n_max = 6) : matches(n_max, 0), hyp_total(n_max, 0), ref_total(n_max, 0) {}
  ChrfStats& operator+=(const ChrfStats& o);
  double score(double beta = 2.0) const;
};

ChrfStats chrf_stats(const std::string& hypothesis, const std::string& reference, int n_max = 6);

/// Sentence-level chrF in [0, 1]. Throws DataError on an empty reference.
double chrf(const std::string& hypothesis, const std::string& reference, int n_max = 6, double beta = 2.0);

/// Corpus chrF from summed n-gram statistics.
double corpus_chrf(const std::vector<std::string>& hyps, const std::vector<std::string>& refs, int n_max = 6,
                   double beta = 2.0);

// ---------------------------------------------------------------------------
// Edit-based correction scoring.

enum class EditKind { insert, remove, substitute };

std::string to_string(EditKind k);

/// Span edit against the noisy sentence. Inserts have start == end;
/// deletions have an empty replacement.
struct Edit {
  std::size_t start = 0;
  std::size_t end = 0;
  std::string replacement;
  EditKind kind = EditKind::substitute;

  auto operator<=>(const Edit&) const = default;
};

/// Edits in left-to-right order. Duplicate edits can occur (e.g. the same
/// token inserted twice at one position), so this is a list, scored as a
/// multiset.
using EditSet = std::vector<Edit>;

/// Token-level Levenshtein alignment of `noisy` to `other`; every non-copy
/// operation becomes one edit. Among minimum-cost alignments the one chosen
/// prefers, scanning from the end, a diagonal step over a deletion over an
/// insertion.
EditSet extract_edits(const TokenSeq& noisy, const TokenSeq& other);

/// Applies edits to the sentence they were extracted from.
TokenSeq apply_edits(const TokenSeq& noisy, const EditSet& edits);

struct PRF {
  double precision = 1.0;
  double recall = 1.0;
  double f = 1.0;
};

struct EditCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
  EditCounts& operator+=(const EditCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  PRF prf(double beta = 0.5) const;
};

EditCounts count_edits(const EditSet& sys, const EditSet& gold);

/// P = TP/|sys|, R = TP/|gold| (0/0 := 1), F-beta (0 when P + R vanish).
PRF correction_f(const EditSet& sys, const EditSet& gold, double beta = 0.5);
PRF f_beta(double precision, double recall, double beta);

// ---------------------------------------------------------------------------
// Probes

/// Mean cosine similarity of paired rows.
template <class T>
double cosine_probe(const graph::Mat<T>& h_noisy, const graph::Mat<T>& h_clean) {
  if (h_noisy.rows() != h_clean.rows() || h_noisy.cols() != h_clean.cols())
    throw DataError("cosine probe: state matrices differ in shape");
  if (h_noisy.rows() == 0) throw DataError("cosine probe: no rows");
  double sum = 0;
  for (Eigen::Index r = 0; r < h_noisy.rows(); ++r) {
    const auto a = h_noisy.row(r).template cast<double>();
    const auto b = h_clean.row(r).template cast<double>();
    const double na = a.norm(), nb = b.norm();
    if (na == 0.0 || nb == 0.0) throw DataError("cosine probe: zero-norm state row");
    sum += std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
  }
  return sum / double(h_noisy.rows());
}

/// Cyclic shift: sample i receives the features of sample (i + 1) mod N.
/// `seed` is accepted for interface symmetry; the shift is deterministic.
corpus::FeatureSet incongruent_shuffle(const corpus::FeatureSet& features, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------

struct ScoreReport {
  std::string metric;
  std::string variant;
  double corpus_score = 0;
  std::optional<std::size_t> n;
  std::uint64_t seed = 0;
  std::vector<double> per_sentence;
  std::string config_digest;
  std::vector<std::uint64_t> seeds;
  std::optional<double> meteor;  // filled in externally when available

  nlohmann::json to_json() const;
  static ScoreReport from_json(const nlohmann::json& j);
};

ScoreReport score_translations(const Corpus& hyps, const Corpus& refs);
ScoreReport score_corrections(const Corpus& noisy, const Corpus& corrected, const Corpus& clean);

}  // namespace robomt::evalsuite
