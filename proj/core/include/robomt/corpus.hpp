#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "robomt/common.hpp"

namespace robomt::corpus {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kUnk = 3;
inline constexpr std::int32_t kNumSpecials = 4;

/// Token <-> id bijection. Ids 0..3 are <pad>, <s>, </s>, <unk>.
class Vocab {
 public:
  Vocab();

  /// Appends a token, returning its id (existing id if already present).
  std::int32_t add(const std::string& token);

  std::int32_t id_of(const std::string& token) const;  // kUnk when absent
  const std::string& token_of(std::int32_t id) const;
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  std::size_t size() const { return tokens_.size(); }

  std::vector<std::int32_t> encode(const TokenSeq& tokens) const;
  /// Stops at the first </s>; drops <s> and <pad>.
  TokenSeq decode(const std::vector<std::int32_t>& ids) const;

  /// Non-special tokens in id order.
  std::vector<std::string> tokens() const { return {tokens_.begin() + kNumSpecials, tokens_.end()}; }
  std::string digest() const;

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);

  bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Tokens with frequency >= min_freq, ordered by (frequency desc, token asc).
Vocab build_vocab(const Corpus& sentences, std::size_t min_freq = 1);

/// Line i of both files, split on single spaces.
std::vector<std::pair<TokenSeq, TokenSeq>> read_parallel(const std::string& src_path, const std::string& tgt_path);

/// Region features for a collection of samples, stored sample-major then
/// region-major. All samples share (regions, dim).
struct FeatureSet {
  std::uint32_t regions = 0;
  std::uint32_t dim = 0;
  std::vector<float> values;

  std::size_t count() const { return regions && dim ? values.size() / (std::size_t(regions) * dim) : 0; }
  const float* sample(std::size_t i) const { return values.data() + i * regions * dim; }
  float* sample(std::size_t i) { return values.data() + i * regions * dim; }
  /// Copy of sample i as a standalone single-sample set.
  FeatureSet slice(std::size_t i) const;

  bool operator==(const FeatureSet&) const = default;
};

// "MMTF", then u32 count, regions, dim (LE), then float32 payload (LE).
void write_features(const std::string& path, const FeatureSet& features);
FeatureSet read_features(const std::string& path);
std::string encode_features(const FeatureSet& features);
FeatureSet decode_features(const std::string& bytes);

/// Clean source, noisy source, target, optional region features.
struct Triple {
  TokenSeq x_clean;
  TokenSeq x_noisy;
  TokenSeq y;
  std::vector<float> features;  // regions * dim, empty when text-only
};

std::vector<Triple> make_triples(const Corpus& clean, const Corpus& noisy, const Corpus& target,
                                 const FeatureSet* features);

// ---------------------------------------------------------------------------
// Synthetic grounded corpus: short captions of coloured shapes whose
// translation can be checked against region features.

inline const std::array<std::string, 4> kColors{"red", "blue", "green", "gold"};
inline const std::array<std::string, 4> kShapes{"cube", "ball", "ring", "cone"};

struct SyntheticOptions {
  std::size_t num_sentences = 2000;
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  std::uint32_t regions = 4;
  std::uint32_t dim = 16;
  double jitter = 0.05;
  std::uint64_t seed = 0;
};

struct SyntheticCorpus {
  Corpus source;
  Corpus target;
  FeatureSet features;
  /// (color index, shape index) per object, in sentence order.
  std::vector<std::vector<std::pair<int, int>>> objects;
};

/// Source-to-target word lexicon used by the generator (bijective).
const std::map<std::string, std::string>& synthetic_lexicon();

/// Fixed orthonormal embedding of a (color, shape) pair in `dim` dimensions.
std::vector<float> attribute_embedding(int color, int shape, std::uint32_t dim);

SyntheticCorpus gen_synthetic_grounded(const SyntheticOptions& opts);

/// Nearest attribute embedding to a region vector.
std::pair<int, int> nearest_attribute(const float* region, std::uint32_t dim);

}  // namespace robomt::corpus
