#include "robomt/corpus.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace robomt::corpus {

namespace {
const char* const kSpecialTokens[kNumSpecials] = {"<pad>", "<s>", "</s>", "<unk>"};
}

Vocab::Vocab() {
  for (auto* s : kSpecialTokens) add(s);
}

std::int32_t Vocab::add(const std::string& token) {
  auto [it, inserted] = ids_.emplace(token, static_cast<std::int32_t>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::int32_t Vocab::id_of(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token_of(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw DataError("token id out of range: " + std::to_string(id));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(const TokenSeq& tokens) const {
  std::vector<std::int32_t> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id_of(t));
  return out;
}

TokenSeq Vocab::decode(const std::vector<std::int32_t>& ids) const {
  TokenSeq out;
  for (auto id : ids) {
    if (id == kEos) break;
    if (id == kBos || id == kPad) continue;
    out.push_back(token_of(id));
  }
  return out;
}

std::string Vocab::digest() const {
  std::string all;
  for (const auto& t : tokens_) {
    all += t;
    all += '\n';
  }
  return fnv1a_hex(all);
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocabulary: " + path);
  for (std::size_t i = kNumSpecials; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open vocabulary: " + path);
  Vocab v;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (!is_valid_token(line) || v.contains(line))
      throw DataError(path + ":" + std::to_string(lineno) + ": invalid or duplicate vocabulary entry");
    v.add(line);
  }
  return v;
}

Vocab build_vocab(const Corpus& sentences, std::size_t min_freq) {
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  std::map<std::string, std::size_t> freq;
  for (const auto& s : sentences)
    for (const auto& t : s) ++freq[t];
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocab v;
  for (const auto& [tok, f] : items)
    if (f >= min_freq) v.add(tok);
  return v;
}

std::vector<std::pair<TokenSeq, TokenSeq>> read_parallel(const std::string& src_path, const std::string& tgt_path) {
  const Corpus src = read_corpus(src_path);
  const Corpus tgt = read_corpus(tgt_path);
  if (src.size() != tgt.size())
    throw DataError("parallel corpus line-count mismatch: " + src_path + " has " + std::to_string(src.size()) +
                    " lines, " + tgt_path + " has " + std::to_string(tgt.size()));
  if (src.empty()) throw DataError("parallel corpus is empty: " + src_path);
  std::vector<std::pair<TokenSeq, TokenSeq>> out;
  out.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out.emplace_back(src[i], tgt[i]);
  return out;
}

// ---------------------------------------------------------------------------

FeatureSet FeatureSet::slice(std::size_t i) const {
  FeatureSet out{regions, dim, {}};
  out.values.assign(sample(i), sample(i) + std::size_t(regions) * dim);
  return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "feature and checkpoint I/O assume a little-endian host");

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  return v;
}

}  // namespace

std::string encode_features(const FeatureSet& f) {
  std::string out = "MMTF";
  put_u32(out, static_cast<std::uint32_t>(f.count()));
  put_u32(out, f.regions);
  put_u32(out, f.dim);
  out.append(reinterpret_cast<const char*>(f.values.data()), f.values.size() * sizeof(float));
  return out;
}

FeatureSet decode_features(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "MMTF") != 0) throw DataError("feature file: bad magic");
  const std::uint64_t count = get_u32(bytes, 4);
  FeatureSet f{get_u32(bytes, 8), get_u32(bytes, 12), {}};
  const std::uint64_t n = count * f.regions * f.dim;
  if (bytes.size() - 16 != n * sizeof(float))
    throw DataError("feature file: payload size " + std::to_string(bytes.size() - 16) + " does not match header (" +
                    std::to_string(n * sizeof(float)) + " bytes expected)");
  f.values.resize(n);
  std::memcpy(f.values.data(), bytes.data() + 16, n * sizeof(float));
  for (float v : f.values)
    if (!std::isfinite(v)) throw DataError("feature file: non-finite value");
  return f;
}

void write_features(const std::string& path, const FeatureSet& features) {
  for (float v : features.values)
    if (!std::isfinite(v)) throw DataError("refusing to write non-finite feature value");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature file: " + path);
  const std::string bytes = encode_features(features);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

FeatureSet read_features(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file: " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_features(bytes);
}

std::vector<Triple> make_triples(const Corpus& clean, const Corpus& noisy, const Corpus& target,
                                 const FeatureSet* features) {
  if (clean.size() != noisy.size() || clean.size() != target.size())
    throw DataError("triple assembly: corpus sizes differ");
  if (features && features->count() != clean.size())
    throw DataError("triple assembly: " + std::to_string(features->count()) + " feature samples for " +
                    std::to_string(clean.size()) + " sentences");
  std::vector<Triple> out(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean[i].size() != noisy[i].size())
      throw DataError("triple " + std::to_string(i) + ": clean and noisy source lengths differ");
    out[i].x_clean = clean[i];
    out[i].x_noisy = noisy[i];
    out[i].y = target[i];
    if (features) out[i].features.assign(features->sample(i), features->sample(i) + features->regions * features->dim);
  }
  return out;
}

// ---------------------------------------------------------------------------

const std::map<std::string, std::string>& synthetic_lexicon() {
  static const std::map<std::string, std::string> lex = {
      {"red", "rouge"}, {"blue", "bleu"},   {"green", "vert"},   {"gold", "dore"}, {"cube", "cube"},
      {"ball", "boule"}, {"ring", "anneau"}, {"cone", "cone"}, {"and", "et"},
  };
  return lex;
}

std::vector<float> attribute_embedding(int color, int shape, std::uint32_t dim) {
  if (dim < 16) throw ConfigError("synthetic features need dim >= 16 for orthogonal attribute embeddings");
  // Rows of a normalised Sylvester-Hadamard matrix of order 16.
  const int row = color * 4 + shape;
  std::vector<float> v(dim, 0.0f);
  for (int col = 0; col < 16; ++col) {
    const int sign = std::popcount(static_cast<unsigned>(row & col)) % 2 ? -1 : 1;
    v[col] = 0.25f * static_cast<float>(sign);
  }
  return v;
}

std::pair<int, int> nearest_attribute(const float* region, std::uint32_t dim) {
  std::pair<int, int> best{0, 0};
  double best_d = INFINITY;
  for (int c = 0; c < 4; ++c) {
    for (int s = 0; s < 4; ++s) {
      const auto e = attribute_embedding(c, s, dim);
      double d = 0;
      for (std::uint32_t k = 0; k < dim; ++k) d += (region[k] - e[k]) * double(region[k] - e[k]);
      if (d < best_d) {
        best_d = d;
        best = {c, s};
      }
    }
  }
  return best;
}

SyntheticCorpus gen_synthetic_grounded(const SyntheticOptions& opts) {
  if (opts.min_objects < 1 || opts.min_objects > opts.max_objects)
    throw ConfigError("synthetic corpus: invalid object count range");
  if (opts.max_objects > opts.regions) throw ConfigError("synthetic corpus: more objects than feature regions");
  const auto& lex = synthetic_lexicon();

  SyntheticCorpus out;
  out.features = FeatureSet{opts.regions, opts.dim, std::vector<float>(opts.num_sentences * opts.regions * opts.dim, 0.0f)};
  for (std::size_t i = 0; i < opts.num_sentences; ++i) {
    Rng rng(derive_seed(opts.seed, i));
    const std::size_t k = opts.min_objects + rng.below(opts.max_objects - opts.min_objects + 1);
    TokenSeq src, tgt;
    std::vector<std::pair<int, int>> objs;
    float* feat = out.features.sample(i);
    for (std::size_t o = 0; o < k; ++o) {
      const int c = static_cast<int>(rng.below(4));
      const int s = static_cast<int>(rng.below(4));
      if (o) {
        src.push_back("and");
        tgt.push_back(lex.at("and"));
      }
      src.push_back(kColors[c]);
      src.push_back(kShapes[s]);
      tgt.push_back(lex.at(kShapes[s]));
      tgt.push_back(lex.at(kColors[c]));
      objs.emplace_back(c, s);

      const auto emb = attribute_embedding(c, s, opts.dim);
      for (std::uint32_t d = 0; d < opts.dim; ++d) {
        float v = emb[d];
        if (opts.jitter > 0) v += static_cast<float>(opts.jitter * rng.normal());
        feat[o * opts.dim + d] = v;
      }
    }
    out.source.push_back(std::move(src));
    out.target.push_back(std::move(tgt));
    out.objects.push_back(std::move(objs));
  }
  return out;
}

}  // namespace robomt::corpus
