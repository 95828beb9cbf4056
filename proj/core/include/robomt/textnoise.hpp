#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "robomt/common.hpp"
#include "robomt/phonlex.hpp"

namespace robomt::textnoise {

enum class NoiseType { edit, homophone, keyboard, none };

std::string to_string(NoiseType t);
NoiseType noise_type_from_string(const std::string& s);

/// Unit-cost Levenshtein distance over any random-access sequence.
template <class Seq>
std::size_t levenshtein(const Seq& a, const Seq& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

struct Substitution {
  std::size_t pos = 0;
  std::string orig;
  std::string replacement;

  bool operator==(const Substitution&) const = default;
};

/// Per-sentence provenance of injected noise.
struct NoiseRecord {
  std::size_t sentence_index = 0;
  NoiseType type = NoiseType::none;
  std::vector<Substitution> subs;  // strictly increasing positions

  bool operator==(const NoiseRecord&) const = default;
};

struct NoiseSpec {
  std::size_t n = 1;
  std::uint64_t seed = 0;
  std::size_t max_edit_distance = 1;
  std::array<double, 3> type_weights{1.0 / 3, 1.0 / 3, 1.0 / 3};  // edit, homophone, keyboard

  /// Throws ConfigError on negative weights or weights not summing to 1.
  void validate() const;
};

/// Letter adjacency on a keyboard. Symmetric, irreflexive.
class KeyboardLayout {
 public:
  /// Builds the symmetric closure of `table`; letters outside a-z are
  /// rejected.
  explicit KeyboardLayout(const std::map<char, std::string>& table);

  static const KeyboardLayout& qwerty();

  const std::set<char>& adjacent(char c) const;
  bool is_adjacent(char a, char b) const;

 private:
  std::array<std::set<char>, 26> adj_;
};

/// Tokens the noise functions may touch: longer than two characters and
/// containing at least one letter.
bool is_eligible(const std::string& token);

/// Brute force over `vocab`: every v != word with Levenshtein(word, v) <= max_dist.
std::set<std::string> edit_distance_candidates(const std::string& word, const std::set<std::string>& vocab,
                                               std::size_t max_dist);

/// Deletion-neighbourhood index over a vocabulary. Same results as
/// edit_distance_candidates, without scanning the vocabulary per query.
class EditIndex {
 public:
  EditIndex() = default;
  EditIndex(const std::set<std::string>& vocab, std::size_t max_dist);

  std::set<std::string> candidates(const std::string& word) const;
  std::size_t max_dist() const { return max_dist_; }
  std::size_t vocab_size() const { return vocab_size_; }

 private:
  std::size_t max_dist_ = 1;
  std::size_t vocab_size_ = 0;
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::vector<std::uint32_t>> deletes_;
};

std::set<std::string> homophone_candidates(const std::string& word, const phonlex::HomophoneIndex& index);

/// All strings obtained by replacing exactly one a-z character with an
/// adjacent key.
std::set<std::string> keyboard_variants(const std::string& word, const KeyboardLayout& layout);

/// Read-only resources shared by all sentences.
struct NoiseResources {
  const EditIndex* edit_index = nullptr;
  const phonlex::HomophoneIndex* homophones = nullptr;
  const KeyboardLayout* layout = &KeyboardLayout::qwerty();

  std::set<std::string> candidates(NoiseType type, const std::string& word) const;
};

struct PerturbResult {
  TokenSeq tokens;
  NoiseRecord record;
};

/// Applies one noise type to one sentence. Samples min(n, #eligible)
/// positions without replacement; positions without candidates are skipped.
PerturbResult perturb_sentence(const TokenSeq& x, NoiseType type, const NoiseSpec& spec,
                               const NoiseResources& res, Rng& rng);

struct NoisyCorpus {
  Corpus sentences;
  std::vector<NoiseRecord> records;
};

/// Per-sentence type draw and perturbation, each sentence on its own RNG
/// stream keyed by (spec.seed, index). Output does not depend on `threads`.
NoisyCorpus inject_corpus(const Corpus& corpus, const NoiseSpec& spec, const NoiseResources& res,
                          unsigned threads = 1);

/// Replaces min(k, #eligible) eligible tokens with "[UNK]".
TokenSeq mask_unk(const TokenSeq& x, std::size_t k, std::uint64_t seed);
Corpus mask_unk_corpus(const Corpus& corpus, std::size_t k, std::uint64_t seed);

inline constexpr const char* kUnkToken = "[UNK]";

struct MixedCorpus {
  Corpus sentences;
  std::vector<bool> noisy;
};

MixedCorpus mix_clean_noisy(const Corpus& clean, const Corpus& noisy, double ratio, std::uint64_t seed);

// JSON Lines: {"idx": int, "type": str, "subs": [{"pos", "orig", "new"}]}
std::string record_to_json(const NoiseRecord& rec);
NoiseRecord record_from_json(const std::string& line);
void write_records(const std::string& path, const std::vector<NoiseRecord>& records);
std::vector<NoiseRecord> read_records(const std::string& path);

}  // namespace robomt::textnoise
