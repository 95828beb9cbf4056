#pragma once

#include <istream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "robomt/common.hpp"

namespace robomt::phonlex {

using Pronunciation = std::vector<std::string>;

/// Lowercased word -> pronunciations (in file order). Every word has at least
/// one pronunciation; phoneme symbols are non-empty and uppercase.
struct PronLexicon {
  std::map<std::string, std::vector<Pronunciation>> entries;

  bool contains(const std::string& word) const { return entries.count(word) != 0; }
  std::size_t size() const { return entries.size(); }
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& what, std::size_t line)
      : DataError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Parses the cmudict-0.7b text layout:
///   ";;;" comment lines are skipped,
///   "WORD  PH1 PH2 ..." entries, "WORD(2)" variants fold into WORD.
/// Entries whose first character is not a letter (punctuation entries) are
/// dropped.
PronLexicon parse_cmudict(std::istream& in);
PronLexicon load_cmudict(const std::string& path);

/// Removes trailing stress digits (0/1/2) from a phoneme.
std::string strip_stress(const std::string& phoneme);
std::string pronunciation_key(const Pronunciation& pron);

/// Stress-stripped pronunciation key -> words having that pronunciation.
class HomophoneIndex {
 public:
  HomophoneIndex() = default;
  explicit HomophoneIndex(const PronLexicon& lex);

  /// Words other than `word` sharing at least one key with it.
  std::set<std::string> homophones(const std::string& word) const;

  const std::map<std::string, std::set<std::string>>& key_to_words() const { return key_to_words_; }
  const std::vector<std::string>& keys_of(const std::string& word) const;
  bool empty() const { return key_to_words_.empty(); }

 private:
  std::map<std::string, std::set<std::string>> key_to_words_;
  std::map<std::string, std::vector<std::string>> word_keys_;
};

HomophoneIndex build_homophone_index(const PronLexicon& lex);

}  // namespace robomt::phonlex
