#include "robomt/robustness.hpp"

#include <filesystem>
#include <fstream>

namespace robomt::evalsuite {

namespace fs = std::filesystem;
using seqmodel::DecoderKind;

void System::save(const std::string& dir) const {
  fs::create_directories(dir);
  seqmodel::save_checkpoint(dir + "/model.ckpt", model);
  src_vocab.save(dir + "/src.vocab");
  tgt_vocab.save(dir + "/tgt.vocab");
  nlohmann::json manifest{{"src_vocab", src_vocab.digest()}, {"tgt_vocab", tgt_vocab.digest()}};
  if (model.config().correction) {
    cor_vocab.save(dir + "/cor.vocab");
    manifest["cor_vocab"] = cor_vocab.digest();
  }
  std::ofstream out(dir + "/manifest.json", std::ios::binary);
  out << manifest.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + dir + "/manifest.json");
}

System System::load(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json", std::ios::binary);
  if (!in) throw DataError("not a model directory (no manifest.json): " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir + "/manifest.json: " + e.what());
  }
  System sys{seqmodel::load_checkpoint(dir + "/model.ckpt"), corpus::Vocab::load(dir + "/src.vocab"),
             corpus::Vocab::load(dir + "/tgt.vocab"), corpus::Vocab{}};
  const auto& c = sys.model.config();
  auto check = [&](const corpus::Vocab& v, const char* key, std::size_t expected) {
    if (manifest.value(key, std::string()) != v.digest())
      throw DataError(std::string("vocabulary digest mismatch for ") + key + " in " + dir);
    if (v.size() != expected) throw DataError(std::string("vocabulary size for ") + key + " does not match the checkpoint");
  };
  check(sys.src_vocab, "src_vocab", c.src_vocab);
  check(sys.tgt_vocab, "tgt_vocab", c.tgt_vocab);
  if (c.correction) {
    sys.cor_vocab = corpus::Vocab::load(dir + "/cor.vocab");
    check(sys.cor_vocab, "cor_vocab", c.cor_vocab);
  }
  return sys;
}

seqmodel::Example System::encode(const corpus::Triple& t) const {
  seqmodel::Example ex;
  ex.src = src_vocab.encode(t.x_noisy);
  ex.tgt = tgt_vocab.encode(t.y);
  if (model.config().correction) ex.cor = cor_vocab.encode(t.x_clean);
  if (model.config().visual) ex.features = t.features;
  return ex;
}

std::vector<seqmodel::Example> System::encode(const std::vector<corpus::Triple>& ts) const {
  std::vector<seqmodel::Example> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(encode(t));
  return out;
}

std::vector<TokenSeq> translate(const System& sys, const std::vector<corpus::Triple>& data, DecoderKind decoder,
                                std::size_t beam_size, std::size_t max_len, unsigned threads) {
  const auto examples = sys.encode(data);
  std::vector<const seqmodel::Example*> ptrs;
  std::size_t longest = 0;
  for (const auto& e : examples) {
    ptrs.push_back(&e);
    longest = std::max(longest, e.src.size());
  }
  if (max_len == 0) max_len = 2 * longest + 10;
  const auto ids = seqmodel::decode(sys.model, ptrs, decoder, beam_size, max_len, threads);
  const auto& vocab = decoder == DecoderKind::mt ? sys.tgt_vocab : sys.cor_vocab;
  std::vector<TokenSeq> out;
  out.reserve(ids.size());
  for (const auto& s : ids) out.push_back(vocab.decode(s));
  return out;
}

double mean_encoder_similarity(const System& sys, const std::vector<corpus::Triple>& data) {
  if (data.empty()) throw DataError("cosine probe: empty data set");
  double sum = 0;
  for (const auto& t : data) {
    const auto noisy = seqmodel::encode(sys.model, sys.src_vocab.encode(t.x_noisy));
    const auto clean = seqmodel::encode(sys.model, sys.src_vocab.encode(t.x_clean));
    sum += cosine_probe(noisy, clean);
  }
  return sum / double(data.size());
}

std::vector<ScoreReport> robustness_report(const System& sys, const std::vector<TestVariant>& variants,
                                           const RobustnessOptions& opts) {
  const auto& c = sys.model.config();
  if (opts.incongruent && !c.visual) throw ConfigError("incongruent decoding requires a model with a visual pathway");

  std::vector<ScoreReport> out;
  for (const auto& v : variants) {
    if (v.data.empty()) throw DataError("test variant " + v.label() + " is empty");
    Corpus refs, clean, noisy;
    for (const auto& t : v.data) {
      refs.push_back(t.y);
      clean.push_back(t.x_clean);
      noisy.push_back(t.x_noisy);
    }
    auto tag = [&](ScoreReport r) {
      r.variant = v.label();
      r.n = v.level;
      return r;
    };

    const auto hyps = translate(sys, v.data, DecoderKind::mt, opts.beam_size, opts.max_len, opts.threads);
    auto mt = tag(score_translations(hyps, refs));
    out.push_back(mt);

    if (c.correction) {
      const auto fixed = translate(sys, v.data, DecoderKind::cor, opts.beam_size, opts.max_len, opts.threads);
      out.push_back(tag(score_corrections(noisy, fixed, clean)));
    }

    if (opts.incongruent) {
      corpus::FeatureSet fs{static_cast<std::uint32_t>(c.regions), static_cast<std::uint32_t>(c.d_feat), {}};
      for (const auto& t : v.data) fs.values.insert(fs.values.end(), t.features.begin(), t.features.end());
      const auto shuffled = incongruent_shuffle(fs);
      auto swapped = v.data;
      for (std::size_t i = 0; i < swapped.size(); ++i)
        swapped[i].features.assign(shuffled.sample(i), shuffled.sample(i) + fs.regions * fs.dim);
      auto inc = tag(score_translations(
          translate(sys, swapped, DecoderKind::mt, opts.beam_size, opts.max_len, opts.threads), refs));
      inc.metric = "chrf_incongruent";
      ScoreReport delta = tag(ScoreReport{});
      delta.metric = "chrf_delta_congruent_minus_incongruent";
      delta.corpus_score = mt.corpus_score - inc.corpus_score;
      for (std::size_t i = 0; i < inc.per_sentence.size(); ++i)
        delta.per_sentence.push_back(mt.per_sentence[i] - inc.per_sentence[i]);
      out.push_back(std::move(inc));
      out.push_back(std::move(delta));
    }

    if (opts.cosine && v.name != "clean") {
      ScoreReport cos = tag(ScoreReport{});
      cos.metric = "encoder_cosine";
      for (const auto& t : v.data) {
        const auto hn = seqmodel::encode(sys.model, sys.src_vocab.encode(t.x_noisy));
        const auto hc = seqmodel::encode(sys.model, sys.src_vocab.encode(t.x_clean));
        cos.per_sentence.push_back(cosine_probe(hn, hc));
      }
      double s = 0;
      for (double x : cos.per_sentence) s += x;
      cos.corpus_score = s / double(cos.per_sentence.size());
      out.push_back(std::move(cos));
    }
  }
  return out;
}

}  // namespace robomt::evalsuite
