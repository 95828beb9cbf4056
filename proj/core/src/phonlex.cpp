#include "robomt/phonlex.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace robomt::phonlex {

namespace {

bool is_phoneme(const std::string& p) {
  if (p.empty()) return false;
  for (char c : p) {
    if (!(std::isupper(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)))) return false;
  }
  return std::isupper(static_cast<unsigned char>(p.front()));
}

std::string lowercase(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// "READ(2)" -> "READ"
std::string strip_variant(const std::string& w) {
  if (w.size() >= 3 && w.back() == ')') {
    const auto open = w.rfind('(');
    if (open != std::string::npos && open > 0 &&
        std::all_of(w.begin() + open + 1, w.end() - 1, [](char c) { return std::isdigit(static_cast<unsigned char>(c)); }))
      return w.substr(0, open);
  }
  return w;
}

}  // namespace

PronLexicon parse_cmudict(std::istream& in) {
  PronLexicon lex;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind(";;;", 0) == 0) continue;
    if (line.find_first_not_of(" \t") == std::string::npos) continue;

    std::istringstream fields(line);
    std::string head;
    fields >> head;
    Pronunciation pron;
    for (std::string ph; fields >> ph;) {
      if (!is_phoneme(ph)) throw ParseError("bad phoneme symbol '" + ph + "'", lineno);
      pron.push_back(std::move(ph));
    }
    if (pron.empty()) throw ParseError("entry '" + head + "' has no phonemes", lineno);
    if (!std::isalpha(static_cast<unsigned char>(head.front()))) continue;
    lex.entries[lowercase(strip_variant(head))].push_back(std::move(pron));
  }
  return lex;
}

PronLexicon load_cmudict(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open pronouncing dictionary: " + path);
  return parse_cmudict(in);
}

std::string strip_stress(const std::string& phoneme) {
  std::string out = phoneme;
  while (!out.empty() && (out.back() == '0' || out.back() == '1' || out.back() == '2')) out.pop_back();
  return out;
}

std::string pronunciation_key(const Pronunciation& pron) {
  std::string key;
  for (std::size_t i = 0; i < pron.size(); ++i) {
    if (i) key += ' ';
    key += strip_stress(pron[i]);
  }
  return key;
}

HomophoneIndex::HomophoneIndex(const PronLexicon& lex) {
  for (const auto& [word, prons] : lex.entries) {
    auto& keys = word_keys_[word];
    for (const auto& p : prons) {
      auto key = pronunciation_key(p);
      key_to_words_[key].insert(word);
      if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(std::move(key));
    }
  }
}

const std::vector<std::string>& HomophoneIndex::keys_of(const std::string& word) const {
  static const std::vector<std::string> none;
  auto it = word_keys_.find(word);
  return it == word_keys_.end() ? none : it->second;
}

std::set<std::string> HomophoneIndex::homophones(const std::string& word) const {
  std::set<std::string> out;
  for (const auto& key : keys_of(word)) {
    const auto& words = key_to_words_.at(key);
    out.insert(words.begin(), words.end());
  }
  out.erase(word);
  return out;
}

HomophoneIndex build_homophone_index(const PronLexicon& lex) {
  if (lex.entries.empty()) throw ConfigError("cannot build a homophone index from an empty lexicon");
  return HomophoneIndex(lex);
}

}  // namespace robomt::phonlex
