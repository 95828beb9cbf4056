#pragma once

#include <optional>
#include <string>
#include <vector>

#include "robomt/corpus.hpp"
#include "robomt/evalsuite.hpp"
#include "robomt/seqmodel.hpp"

namespace robomt::evalsuite {

/// A trained model together with the vocabularies it was trained with.
/// On disk: a directory holding model.ckpt, src.vocab, tgt.vocab,
/// [cor.vocab] and manifest.json (vocabulary digests).
struct System {
  seqmodel::Model<float> model;
  corpus::Vocab src_vocab;
  corpus::Vocab tgt_vocab;
  corpus::Vocab cor_vocab;

  void save(const std::string& dir) const;
  /// Throws DataError when the vocabulary files do not match the manifest
  /// digests or the checkpoint's vocabulary sizes.
  static System load(const std::string& dir);

  seqmodel::Example encode(const corpus::Triple& t) const;
  std::vector<seqmodel::Example> encode(const std::vector<corpus::Triple>& ts) const;
};

/// One evaluation condition: which source the model reads and which
/// references it is scored against.
struct TestVariant {
  std::string name;  // "clean", "noisy", "unk"
  std::optional<std::size_t> level;
  std::vector<corpus::Triple> data;  // x_noisy is the model input

  std::string label() const { return level ? name + ":" + std::to_string(*level) : name; }
};

struct RobustnessOptions {
  std::size_t beam_size = 4;
  std::size_t max_len = 0;  // 0: 2 * source length + 10, per batch maximum
  unsigned threads = 1;
  bool incongruent = false;
  bool cosine = true;
};

/// Per variant: chrF of translations, correction F0.5 when the model has a
/// correction decoder, incongruent chrF and congruent - incongruent delta
/// when requested, and the encoder cosine similarity between noisy and
/// clean inputs.
std::vector<ScoreReport> robustness_report(const System& sys, const std::vector<TestVariant>& variants,
                                           const RobustnessOptions& opts);

/// Mean over sentences of the encoder cosine similarity between noisy and
/// clean source states.
double mean_encoder_similarity(const System& sys, const std::vector<corpus::Triple>& data);

std::vector<TokenSeq> translate(const System& sys, const std::vector<corpus::Triple>& data,
                                seqmodel::DecoderKind decoder, std::size_t beam_size, std::size_t max_len,
                                unsigned threads);

}  // namespace robomt::evalsuite
