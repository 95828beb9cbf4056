#include "robomt/textnoise.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>

namespace robomt::textnoise {

using nlohmann::json;

std::string to_string(NoiseType t) {
  switch (t) {
    case NoiseType::edit: return "edit";
    case NoiseType::homophone: return "homophone";
    case NoiseType::keyboard: return "keyboard";
    case NoiseType::none: return "none";
  }
  return "none";
}

NoiseType noise_type_from_string(const std::string& s) {
  if (s == "edit") return NoiseType::edit;
  if (s == "homophone") return NoiseType::homophone;
  if (s == "keyboard") return NoiseType::keyboard;
  if (s == "none") return NoiseType::none;
  throw DataError("unknown noise type '" + s + "'");
}

void NoiseSpec::validate() const {
  double sum = 0;
  for (double w : type_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("noise type weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("noise type weights must sum to 1");
  if (max_edit_distance < 1) throw ConfigError("max_edit_distance must be >= 1");
}

// ---------------------------------------------------------------------------

KeyboardLayout::KeyboardLayout(const std::map<char, std::string>& table) {
  for (const auto& [key, neighbours] : table) {
    if (key < 'a' || key > 'z') throw ConfigError(std::string("keyboard layout key out of range: ") + key);
    for (char n : neighbours) {
      if (n < 'a' || n > 'z') throw ConfigError(std::string("keyboard neighbour out of range: ") + n);
      if (n == key) continue;
      adj_[key - 'a'].insert(n);
      adj_[n - 'a'].insert(key);
    }
  }
}

const KeyboardLayout& KeyboardLayout::qwerty() {
  static const KeyboardLayout layout({
      {'q', "wa"},     {'w', "qeas"},   {'e', "wrsd"},   {'r', "etdf"},   {'t', "ryfg"},   {'y', "tugh"},
      {'u', "yihj"},   {'i', "uojk"},   {'o', "ipkl"},   {'p', "ol"},     {'a', "qwsz"},   {'s', "adwezx"},
      {'d', "sferxc"}, {'f', "dgrtcv"}, {'g', "fhtyvb"}, {'h', "gjyubn"}, {'j', "hkuinm"}, {'k', "jliom"},
      {'l', "kpo"},    {'z', "asx"},    {'x', "zcsd"},   {'c', "xvdf"},   {'v', "cbfg"},   {'b', "vngh"},
      {'n', "bmhj"},   {'m', "njk"},
  });
  return layout;
}

const std::set<char>& KeyboardLayout::adjacent(char c) const {
  static const std::set<char> none;
  if (c < 'a' || c > 'z') return none;
  return adj_[c - 'a'];
}

bool KeyboardLayout::is_adjacent(char a, char b) const { return adjacent(a).count(b) != 0; }

// ---------------------------------------------------------------------------

bool is_eligible(const std::string& token) {
  if (token.size() <= 2) return false;
  return std::any_of(token.begin(), token.end(), [](char c) { return std::isalpha(static_cast<unsigned char>(c)); });
}

std::set<std::string> edit_distance_candidates(const std::string& word, const std::set<std::string>& vocab,
                                               std::size_t max_dist) {
  std::set<std::string> out;
  for (const auto& v : vocab) {
    if (v == word) continue;
    const std::size_t len_gap = v.size() > word.size() ? v.size() - word.size() : word.size() - v.size();
    if (len_gap > max_dist) continue;
    if (levenshtein(word, v) <= max_dist) out.insert(v);
  }
  return out;
}

namespace {

// All strings reachable from `w` by deleting up to `depth` characters.
void collect_deletes(const std::string& w, std::size_t depth, std::set<std::string>& out) {
  if (!out.insert(w).second || depth == 0) return;
  for (std::size_t i = 0; i < w.size(); ++i) {
    std::string shorter = w;
    shorter.erase(i, 1);
    collect_deletes(shorter, depth - 1, out);
  }
}

}  // namespace

EditIndex::EditIndex(const std::set<std::string>& vocab, std::size_t max_dist)
    : max_dist_(max_dist), vocab_size_(vocab.size()), words_(vocab.begin(), vocab.end()) {
  for (std::uint32_t id = 0; id < words_.size(); ++id) {
    std::set<std::string> dels;
    collect_deletes(words_[id], max_dist_, dels);
    for (const auto& d : dels) deletes_[d].push_back(id);
  }
}

std::set<std::string> EditIndex::candidates(const std::string& word) const {
  std::set<std::string> dels;
  collect_deletes(word, max_dist_, dels);
  std::set<std::string> out;
  for (const auto& d : dels) {
    auto it = deletes_.find(d);
    if (it == deletes_.end()) continue;
    for (auto id : it->second) {
      const auto& v = words_[id];
      if (v != word && !out.count(v) && levenshtein(word, v) <= max_dist_) out.insert(v);
    }
  }
  return out;
}

std::set<std::string> homophone_candidates(const std::string& word, const phonlex::HomophoneIndex& index) {
  return index.homophones(word);
}

std::set<std::string> keyboard_variants(const std::string& word, const KeyboardLayout& layout) {
  std::set<std::string> out;
  for (std::size_t i = 0; i < word.size(); ++i) {
    for (char n : layout.adjacent(word[i])) {
      std::string v = word;
      v[i] = n;
      out.insert(std::move(v));
    }
  }
  return out;
}

std::set<std::string> NoiseResources::candidates(NoiseType type, const std::string& word) const {
  switch (type) {
    case NoiseType::edit: return edit_index ? edit_index->candidates(word) : std::set<std::string>{};
    case NoiseType::homophone: return homophones ? homophones->homophones(word) : std::set<std::string>{};
    case NoiseType::keyboard: return keyboard_variants(word, *layout);
    case NoiseType::none: break;
  }
  return {};
}

// ---------------------------------------------------------------------------

PerturbResult perturb_sentence(const TokenSeq& x, NoiseType type, const NoiseSpec& spec,
                               const NoiseResources& res, Rng& rng) {
  PerturbResult out{x, NoiseRecord{}};
  if (type == NoiseType::none || spec.n == 0) return out;

  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (is_eligible(x[i])) eligible.push_back(i);

  for (std::size_t pick : rng.sample_without_replacement(eligible.size(), spec.n)) {
    const std::size_t pos = eligible[pick];
    const auto cands = res.candidates(type, x[pos]);
    if (cands.empty()) continue;
    auto it = cands.begin();
    std::advance(it, static_cast<std::ptrdiff_t>(rng.below(cands.size())));
    out.tokens[pos] = *it;
    out.record.subs.push_back({pos, x[pos], *it});
  }
  std::sort(out.record.subs.begin(), out.record.subs.end(),
            [](const Substitution& a, const Substitution& b) { return a.pos < b.pos; });
  if (!out.record.subs.empty()) out.record.type = type;
  return out;
}

NoisyCorpus inject_corpus(const Corpus& corpus, const NoiseSpec& spec, const NoiseResources& res, unsigned threads) {
  spec.validate();
  if (corpus.empty()) throw DataError("cannot inject noise into an empty corpus");
  if (spec.type_weights[1] > 0 && (res.homophones == nullptr || res.homophones->empty()))
    throw ConfigError("homophone noise requested but no pronouncing dictionary was loaded");

  NoisyCorpus out;
  out.sentences.resize(corpus.size());
  out.records.resize(corpus.size());

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      Rng rng(derive_seed(spec.seed, i));
      const double u = rng.uniform();
      NoiseType type = NoiseType::keyboard;
      if (u < spec.type_weights[0]) {
        type = NoiseType::edit;
      } else if (u < spec.type_weights[0] + spec.type_weights[1]) {
        type = NoiseType::homophone;
      } else if (spec.type_weights[2] == 0.0) {
        // rounding slack when the keyboard weight is zero
        type = spec.type_weights[1] > 0 ? NoiseType::homophone : NoiseType::edit;
      }
      auto r = perturb_sentence(corpus[i], type, spec, res, rng);
      r.record.sentence_index = i;
      out.sentences[i] = std::move(r.tokens);
      out.records[i] = std::move(r.record);
    }
  };

  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(corpus.size())));
  if (threads == 1) {
    work(0, corpus.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (corpus.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = t * chunk, e = std::min(corpus.size(), b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return out;
}

TokenSeq mask_unk(const TokenSeq& x, std::size_t k, std::uint64_t seed) {
  TokenSeq out = x;
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (is_eligible(x[i])) eligible.push_back(i);
  Rng rng(seed);
  for (std::size_t pick : rng.sample_without_replacement(eligible.size(), k)) out[eligible[pick]] = kUnkToken;
  return out;
}

Corpus mask_unk_corpus(const Corpus& corpus, std::size_t k, std::uint64_t seed) {
  Corpus out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) out.push_back(mask_unk(corpus[i], k, derive_seed(seed, i)));
  return out;
}

MixedCorpus mix_clean_noisy(const Corpus& clean, const Corpus& noisy, double ratio, std::uint64_t seed) {
  if (clean.size() != noisy.size())
    throw DataError("clean/noisy corpus size mismatch: " + std::to_string(clean.size()) + " vs " +
                    std::to_string(noisy.size()));
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("mix ratio must lie in [0, 1]");
  MixedCorpus out;
  out.sentences.reserve(clean.size());
  out.noisy.reserve(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    Rng rng(derive_seed(seed, i));
    const bool pick_noisy = rng.bernoulli(ratio);
    out.sentences.push_back(pick_noisy ? noisy[i] : clean[i]);
    out.noisy.push_back(pick_noisy);
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string record_to_json(const NoiseRecord& rec) {
  json subs = json::array();
  for (const auto& s : rec.subs) subs.push_back({{"pos", s.pos}, {"orig", s.orig}, {"new", s.replacement}});
  json j = {{"idx", rec.sentence_index}, {"type", to_string(rec.type)}, {"subs", subs}};
  return j.dump();
}

NoiseRecord record_from_json(const std::string& line) {
  NoiseRecord rec;
  try {
    const json j = json::parse(line);
    rec.sentence_index = j.at("idx").get<std::size_t>();
    rec.type = noise_type_from_string(j.at("type").get<std::string>());
    for (const auto& s : j.at("subs"))
      rec.subs.push_back({s.at("pos").get<std::size_t>(), s.at("orig").get<std::string>(), s.at("new").get<std::string>()});
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed noise record: ") + e.what());
  }
  return rec;
}

void write_records(const std::string& path, const std::vector<NoiseRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write noise records: " + path);
  for (const auto& r : records) out << record_to_json(r) << '\n';
}

std::vector<NoiseRecord> read_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open noise records: " + path);
  std::vector<NoiseRecord> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(record_from_json(line));
  return out;
}

}  // namespace robomt::textnoise
