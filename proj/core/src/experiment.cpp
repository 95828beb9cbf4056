#include "robomt/experiment.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include "robomt/corpus.hpp"

#ifndef ROBOMT_DEFAULT_LEXICON
#define ROBOMT_DEFAULT_LEXICON "data/cmudict-0.7b.txt"
#endif

namespace robomt::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::nmt: return "NMT";
    case ModelVariant::mmt: return "MMT";
    case ModelVariant::nmt_cor: return "NMT-cor";
    case ModelVariant::mmt_cor: return "MMT-cor";
  }
  return "?";
}

ModelVariant variant_from_string(const std::string& s) {
  if (s == "NMT") return ModelVariant::nmt;
  if (s == "MMT") return ModelVariant::mmt;
  if (s == "NMT-cor") return ModelVariant::nmt_cor;
  if (s == "MMT-cor") return ModelVariant::mmt_cor;
  throw ConfigError("unknown model variant '" + s + "' (expected NMT, MMT, NMT-cor or MMT-cor)");
}

std::string to_string(Regime r) {
  switch (r) {
    case Regime::clean: return "clean";
    case Regime::noisy: return "noisy";
    case Regime::mixed: return "mixed";
    case Regime::fully_noisy: return "fully-noisy";
  }
  return "?";
}

Regime regime_from_string(const std::string& s) {
  if (s == "clean") return Regime::clean;
  if (s == "noisy") return Regime::noisy;
  if (s == "mixed") return Regime::mixed;
  if (s == "fully-noisy") return Regime::fully_noisy;
  throw ConfigError("unknown training regime '" + s + "'");
}

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("at least one seed is required");
  if (has_correction(variant) && !(effective_lambda() > 0))
    throw ConfigError("correction variants require lambda > 0");
  if (is_visual(variant) && !data.synthetic && (data.train_features.empty() || data.test_features.empty()))
    throw ConfigError("multimodal variants require feature paths");
  if (train_noise.regime != Regime::clean && train_noise.n == 0)
    throw ConfigError("noisy training regimes need n >= 1");
  if (train_noise.regime == Regime::mixed && !(train_noise.ratio >= 0 && train_noise.ratio <= 1))
    throw ConfigError("mix ratio must lie in [0, 1]");
  if (incongruent && !is_visual(variant)) throw ConfigError("incongruent decoding requires a multimodal variant");
  if (tests.empty()) throw ConfigError("no test variants");
  for (const auto& t : tests) {
    if (t.name != "clean" && t.name != "noisy" && t.name != "unk")
      throw ConfigError("unknown test variant '" + t.name + "'");
    if (t.name == "noisy" && t.level == 0) throw ConfigError("noisy test variant needs n >= 1");
  }
  if (preset != "desk" && preset != "paper") throw ConfigError("preset must be desk or paper");
  if (!data.synthetic && (data.train_src.empty() || data.train_tgt.empty() || data.dev_src.empty() ||
                          data.dev_tgt.empty() || data.test_src.empty() || data.test_tgt.empty()))
    throw ConfigError("real-data experiments need train/dev/test source and target paths");
  if (src_min_freq && *src_min_freq < 1) throw ConfigError("src_min_freq must be >= 1");
  if (train.steps < 1 || train.eval_every < 1 || beam_size < 1 || train.dev_beam < 1)
    throw ConfigError("steps, eval_every and beam sizes must be positive");
  model_config();
}

double ExperimentConfig::effective_lambda() const {
  if (!has_correction(variant)) return 0.0;
  if (lambda) return *lambda;
  return seqmodel::default_lambda_for_noise(std::max<std::size_t>(train_noise.n, 1));
}

std::size_t ExperimentConfig::effective_src_min_freq() const {
  if (src_min_freq) return *src_min_freq;
  return preset == "desk" ? kDeskSrcMinFreq : 1;
}

seqmodel::ModelConfig ExperimentConfig::model_config() const {
  seqmodel::ModelConfig c = preset == "paper" ? seqmodel::ModelConfig::paper() : seqmodel::ModelConfig{};
  if (!model_overrides.is_null() && !model_overrides.empty()) {
    json merged = c.to_json();
    merged.update(model_overrides);
    c = seqmodel::ModelConfig::from_json(merged);
  }
  c.visual = is_visual(variant);
  c.correction = has_correction(variant);
  c.lambda = effective_lambda();
  if (c.d_model % c.heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (!(c.lambda >= 0)) throw ConfigError("lambda must be >= 0");
  return c;
}

json ExperimentConfig::to_json() const {
  json tests_j = json::array();
  for (const auto& t : tests) {
    json tj{{"name", t.name}};
    if (t.name != "clean") tj[t.name == "unk" ? "k" : "n"] = t.level;
    tests_j.push_back(tj);
  }
  json j{{"variant", to_string(variant)},
         {"train_noise", {{"regime", to_string(train_noise.regime)}, {"n", train_noise.n}, {"ratio", train_noise.ratio}}},
         {"tests", tests_j},
         {"incongruent", incongruent},
         {"seeds", seeds},
         {"preset", preset},
         {"data",
          {{"synthetic", data.synthetic},
           {"train_size", data.train_size},
           {"dev_size", data.dev_size},
           {"test_size", data.test_size},
           {"seed", data.seed},
           {"train_src", data.train_src},
           {"train_tgt", data.train_tgt},
           {"train_features", data.train_features},
           {"dev_src", data.dev_src},
           {"dev_tgt", data.dev_tgt},
           {"dev_features", data.dev_features},
           {"test_src", data.test_src},
           {"test_tgt", data.test_tgt},
           {"test_features", data.test_features}}},
         {"lexicon", lexicon},
         {"noise_seed", noise_seed},
         {"src_min_freq", src_min_freq ? json(*src_min_freq) : json(nullptr)},
         {"model", model_overrides},
         {"train", {{"steps", train.steps}, {"eval_every", train.eval_every}, {"dev_beam", train.dev_beam}}},
         {"beam_size", beam_size},
         {"out_dir", out_dir},
         {"threads", threads}};
  j["lambda"] = lambda ? json(*lambda) : json(nullptr);
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  try {
    if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
    if (j.contains("variant")) c.variant = variant_from_string(j["variant"].get<std::string>());
    if (j.contains("train_noise")) {
      const auto& t = j["train_noise"];
      c.train_noise.regime = regime_from_string(t.value("regime", std::string("clean")));
      c.train_noise.n = t.value("n", std::size_t{0});
      c.train_noise.ratio = t.value("ratio", 0.5);
    }
    if (j.contains("tests")) {
      c.tests.clear();
      for (const auto& t : j["tests"]) {
        TestSpec s{t.at("name").get<std::string>(), 0};
        if (s.name == "noisy") s.level = t.at("n").get<std::size_t>();
        if (s.name == "unk") s.level = t.at("k").get<std::size_t>();
        c.tests.push_back(s);
      }
    }
    c.incongruent = j.value("incongruent", c.incongruent);
    if (j.contains("lambda") && !j["lambda"].is_null()) c.lambda = j["lambda"].get<double>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.preset = j.value("preset", c.preset);
    if (j.contains("data")) {
      const auto& d = j["data"];
      c.data.synthetic = d.value("synthetic", c.data.synthetic);
      c.data.train_size = d.value("train_size", c.data.train_size);
      c.data.dev_size = d.value("dev_size", c.data.dev_size);
      c.data.test_size = d.value("test_size", c.data.test_size);
      c.data.seed = d.value("seed", c.data.seed);
      c.data.train_src = d.value("train_src", std::string());
      c.data.train_tgt = d.value("train_tgt", std::string());
      c.data.train_features = d.value("train_features", std::string());
      c.data.dev_src = d.value("dev_src", std::string());
      c.data.dev_tgt = d.value("dev_tgt", std::string());
      c.data.dev_features = d.value("dev_features", std::string());
      c.data.test_src = d.value("test_src", std::string());
      c.data.test_tgt = d.value("test_tgt", std::string());
      c.data.test_features = d.value("test_features", std::string());
    }
    c.lexicon = j.value("lexicon", c.lexicon);
    c.noise_seed = j.value("noise_seed", c.noise_seed);
    if (j.contains("src_min_freq") && !j["src_min_freq"].is_null())
      c.src_min_freq = j["src_min_freq"].get<std::size_t>();
    if (j.contains("model")) c.model_overrides = j["model"];
    if (j.contains("train")) {
      const auto& t = j["train"];
      c.train.steps = t.value("steps", c.train.steps);
      c.train.eval_every = t.value("eval_every", c.train.eval_every);
      c.train.dev_beam = t.value("dev_beam", c.train.dev_beam);
    }
    c.beam_size = j.value("beam_size", c.beam_size);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.threads = j.value("threads", c.threads);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  return c;
}

std::string ExperimentConfig::digest() const {
  json j = to_json();
  j.erase("out_dir");
  j.erase("threads");
  j["lambda"] = effective_lambda();
  j["src_min_freq"] = effective_src_min_freq();
  return fnv1a_hex(j.dump());
}

std::string ExperimentConfig::run_name() const {
  std::string regime = to_string(train_noise.regime);
  if (train_noise.regime != Regime::clean) regime += "-n" + std::to_string(train_noise.n);
  return to_string(variant) + "_" + regime + "_" + digest().substr(0, 12);
}

// ---------------------------------------------------------------------------
// Shared resources

std::string default_lexicon_path() {
  if (const char* env = std::getenv("ROBOMT_LEXICON")) return env;
  return ROBOMT_DEFAULT_LEXICON;
}

namespace {

std::mutex g_resource_mu;
std::map<std::string, std::unique_ptr<phonlex::PronLexicon>> g_lexicons;
std::map<std::string, std::unique_ptr<phonlex::HomophoneIndex>> g_indices;

std::string resolve_lexicon(const std::string& path) { return path.empty() ? default_lexicon_path() : path; }

}  // namespace

const phonlex::PronLexicon& lexicon(const std::string& path) {
  const auto p = resolve_lexicon(path);
  std::lock_guard lock(g_resource_mu);
  auto& slot = g_lexicons[p];
  if (!slot) slot = std::make_unique<phonlex::PronLexicon>(phonlex::load_cmudict(p));
  return *slot;
}

const phonlex::HomophoneIndex& homophone_index(const std::string& path) {
  const auto p = resolve_lexicon(path);
  const auto& lex = lexicon(p);
  std::lock_guard lock(g_resource_mu);
  auto& slot = g_indices[p];
  if (!slot) slot = std::make_unique<phonlex::HomophoneIndex>(phonlex::build_homophone_index(lex));
  return *slot;
}

std::set<std::string> edit_vocabulary(const std::string& lexicon_path, const Corpus& extra) {
  std::set<std::string> vocab;
  for (const auto& [w, _] : lexicon(lexicon_path).entries)
    if (std::all_of(w.begin(), w.end(), [](char c) { return c >= 'a' && c <= 'z'; })) vocab.insert(w);
  for (const auto& s : extra)
    for (const auto& t : s) vocab.insert(t);
  return vocab;
}

// ---------------------------------------------------------------------------
// Reports

const evalsuite::ScoreReport* SeedResult::find(const std::string& variant, const std::string& metric) const {
  for (const auto& r : reports)
    if (r.variant == variant && r.metric == metric) return &r;
  return nullptr;
}

const evalsuite::ScoreReport* ReportBundle::mean_of(const std::string& variant, const std::string& metric) const {
  for (const auto& r : mean)
    if (r.variant == variant && r.metric == metric) return &r;
  return nullptr;
}

json ReportBundle::to_json() const {
  json seeds_j = json::array();
  for (const auto& s : per_seed) {
    json reps = json::array();
    for (const auto& r : s.reports) reps.push_back(r.to_json());
    seeds_j.push_back({{"seed", s.seed}, {"best_step", s.best_step}, {"reports", reps}});
  }
  json mean_j = json::array();
  for (const auto& r : mean) mean_j.push_back(r.to_json());
  json cfg = config.to_json();
  cfg.erase("out_dir");
  cfg.erase("threads");
  return {{"config_digest", config_digest}, {"config", cfg}, {"per_seed", seeds_j}, {"mean", mean_j}};
}

ReportBundle ReportBundle::from_json(const json& j) {
  ReportBundle b;
  try {
    b.config_digest = j.at("config_digest").get<std::string>();
    b.config = ExperimentConfig::from_json(j.at("config"));
    for (const auto& s : j.at("per_seed")) {
      SeedResult r{s.at("seed").get<std::uint64_t>(), s.value("best_step", 0L), {}};
      for (const auto& rep : s.at("reports")) r.reports.push_back(evalsuite::ScoreReport::from_json(rep));
      b.per_seed.push_back(std::move(r));
    }
    for (const auto& rep : j.at("mean")) b.mean.push_back(evalsuite::ScoreReport::from_json(rep));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed report bundle: ") + e.what());
  }
  return b;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

class StageError : public Error {
 public:
  StageError(const std::string& stage, std::uint64_t seed, const Error& cause)
      : Error("stage '" + stage + "' failed for seed " + std::to_string(seed) + ": " + cause.what()),
        code_(cause.exit_code()) {}
  int exit_code() const override { return code_; }

 private:
  int code_;
};

template <class F>
auto stage(const std::string& name, std::uint64_t seed, F&& f) {
  try {
    return f();
  } catch (const DivergenceError& e) {
    throw DivergenceError("stage '" + name + "' failed for seed " + std::to_string(seed) + ": " + e.what(), e.step());
  } catch (const Error& e) {
    throw StageError(name, seed, e);
  }
}

struct Split {
  Corpus src, tgt;
  std::optional<corpus::FeatureSet> features;
};

struct Data {
  Split train, dev, test;
};

Split load_split(const std::string& src, const std::string& tgt, const std::string& feats) {
  Split s;
  for (auto& [x, y] : corpus::read_parallel(src, tgt)) {
    s.src.push_back(std::move(x));
    s.tgt.push_back(std::move(y));
  }
  if (!feats.empty()) {
    s.features = corpus::read_features(feats);
    if (s.features->count() != s.src.size()) throw DataError("feature count does not match sentence count: " + feats);
  }
  return s;
}

Data load_data(const ExperimentConfig& c) {
  Data d;
  if (c.data.synthetic) {
    auto gen = [&](std::size_t n, std::uint64_t key) {
      corpus::SyntheticOptions o;
      o.num_sentences = n;
      o.seed = derive_seed(c.data.seed, key);
      auto syn = corpus::gen_synthetic_grounded(o);
      return Split{std::move(syn.source), std::move(syn.target), std::move(syn.features)};
    };
    d.train = gen(c.data.train_size, 1);
    d.dev = gen(c.data.dev_size, 2);
    d.test = gen(c.data.test_size, 3);
  } else {
    d.train = load_split(c.data.train_src, c.data.train_tgt, c.data.train_features);
    d.dev = load_split(c.data.dev_src, c.data.dev_tgt, c.data.dev_features);
    d.test = load_split(c.data.test_src, c.data.test_tgt, c.data.test_features);
  }
  return d;
}

/// Noise resources for one experiment.
struct NoiseKit {
  textnoise::EditIndex edit;
  const phonlex::HomophoneIndex* homophones = nullptr;
  textnoise::NoiseResources res() const { return {&edit, homophones, &textnoise::KeyboardLayout::qwerty()}; }
};

textnoise::NoisyCorpus noisy_copy(const Corpus& clean, std::size_t n, std::uint64_t seed, const NoiseKit& kit,
                                  unsigned threads) {
  textnoise::NoiseSpec spec;
  spec.n = n;
  spec.seed = seed;
  return textnoise::inject_corpus(clean, spec, kit.res(), threads);
}

std::vector<corpus::Triple> triples(const Split& s, const Corpus& inputs) {
  return corpus::make_triples(s.src, inputs, s.tgt, s.features ? &*s.features : nullptr);
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write " + path);
}

}  // namespace

namespace {

ReportBundle run_experiment_impl(const ExperimentConfig& config, bool allow_zero_lambda) {
  if (allow_zero_lambda && config.lambda && *config.lambda == 0.0) {
    // A sweep point at lambda = 0 keeps the correction decoder untrained.
    ExperimentConfig probe = config;
    probe.lambda = 1.0;
    probe.validate();
  } else {
    config.validate();
  }
  const std::string digest = config.digest();
  const fs::path run_dir = fs::path(config.out_dir) / config.run_name();
  fs::create_directories(run_dir / "data");
  {
    json cfg = config.to_json();
    cfg.erase("out_dir");
    cfg.erase("threads");
    write_json((run_dir / "config.json").string(), cfg);
  }

  // inject
  const Data data = stage("load", 0, [&] { return load_data(config); });
  NoiseKit kit;
  Corpus train_in, dev_in;
  std::vector<evalsuite::TestVariant> variants;
  stage("inject", 0, [&] {
    const bool need_noise = config.train_noise.regime != Regime::clean ||
                            std::any_of(config.tests.begin(), config.tests.end(), [](auto& t) { return t.name == "noisy"; });
    if (need_noise) {
      kit.edit = textnoise::EditIndex(edit_vocabulary(config.lexicon, data.train.src), 1);
      kit.homophones = &homophone_index(config.lexicon);
    }
    const std::size_t n = config.train_noise.n;
    switch (config.train_noise.regime) {
      case Regime::clean:
        train_in = data.train.src;
        dev_in = data.dev.src;
        break;
      case Regime::noisy:
      case Regime::fully_noisy: {
        auto tn = noisy_copy(data.train.src, n, derive_seed(config.noise_seed, 1), kit, config.threads);
        textnoise::write_records((run_dir / "data/train.records.jsonl").string(), tn.records);
        train_in = std::move(tn.sentences);
        dev_in = noisy_copy(data.dev.src, n, derive_seed(config.noise_seed, 2), kit, config.threads).sentences;
        break;
      }
      case Regime::mixed: {
        auto tn = noisy_copy(data.train.src, n, derive_seed(config.noise_seed, 1), kit, config.threads);
        textnoise::write_records((run_dir / "data/train.records.jsonl").string(), tn.records);
        train_in = textnoise::mix_clean_noisy(data.train.src, tn.sentences, config.train_noise.ratio,
                                              derive_seed(config.noise_seed, 3)).sentences;
        auto dn = noisy_copy(data.dev.src, n, derive_seed(config.noise_seed, 2), kit, config.threads);
        dev_in = textnoise::mix_clean_noisy(data.dev.src, dn.sentences, config.train_noise.ratio,
                                            derive_seed(config.noise_seed, 4)).sentences;
        break;
      }
    }
    write_corpus((run_dir / "data/train.input.src").string(), train_in);
    for (const auto& t : config.tests) {
      evalsuite::TestVariant v{t.name, std::nullopt, {}};
      Corpus inputs;
      if (t.name == "clean") {
        inputs = data.test.src;
      } else if (t.name == "noisy") {
        v.level = t.level;
        auto tn = noisy_copy(data.test.src, t.level, derive_seed(config.noise_seed, 1000 + t.level), kit, config.threads);
        textnoise::write_records((run_dir / ("data/test.noisy" + std::to_string(t.level) + ".records.jsonl")).string(),
                                 tn.records);
        inputs = std::move(tn.sentences);
      } else {
        v.level = t.level;
        inputs = textnoise::mask_unk_corpus(data.test.src, t.level, derive_seed(config.noise_seed, 2000 + t.level));
      }
      auto file_label = v.label();
      std::replace(file_label.begin(), file_label.end(), ':', '-');
      write_corpus((run_dir / ("data/test." + file_label + ".src")).string(), inputs);
      v.data = triples(data.test, inputs);
      variants.push_back(std::move(v));
    }
    return 0;
  });

  // vocabularies
  const corpus::Vocab src_vocab = corpus::build_vocab(train_in, config.effective_src_min_freq());
  const corpus::Vocab tgt_vocab = corpus::build_vocab(data.train.tgt);
  const corpus::Vocab cor_vocab = corpus::build_vocab(data.train.src);

  seqmodel::ModelConfig mc = config.model_config();
  mc.src_vocab = src_vocab.size();
  mc.tgt_vocab = tgt_vocab.size();
  mc.cor_vocab = mc.correction ? cor_vocab.size() : 0;
  if (mc.visual) {
    const auto& f = data.train.features;
    if (!f) throw ConfigError("multimodal variant without training features");
    mc.regions = static_cast<int>(f->regions);
    mc.d_feat = static_cast<int>(f->dim);
  }

  const auto train_triples = triples(data.train, train_in);
  const auto dev_triples = triples(data.dev, dev_in);
  Corpus dev_refs = data.dev.tgt;

  ReportBundle bundle;
  bundle.config_digest = digest;
  bundle.run_dir = run_dir.string();
  bundle.config = config;

  for (const auto seed : config.seeds) {
    const fs::path seed_dir = run_dir / ("seed-" + std::to_string(seed));
    fs::create_directories(seed_dir);
    evalsuite::System sys{seqmodel::Model<float>(mc, derive_seed(seed, 0x1417)), src_vocab, tgt_vocab,
                          mc.correction ? cor_vocab : corpus::Vocab{}};
    const auto train_examples = sys.encode(train_triples);
    const auto dev_examples = sys.encode(dev_triples);

    // train
    const auto result = stage("train", seed, [&] {
      seqmodel::TrainOptions opts;
      opts.steps = config.train.steps;
      opts.eval_every = config.train.eval_every;
      opts.seed = derive_seed(seed, 0x7a11);
      std::vector<const seqmodel::Example*> dev_ptrs;
      for (const auto& e : dev_examples) dev_ptrs.push_back(&e);
      std::size_t longest = 0;
      for (const auto& e : dev_examples) longest = std::max(longest, e.src.size());
      seqmodel::DevScorer<float> dev = [&](const seqmodel::Model<float>& m) {
        const auto ids = seqmodel::decode(m, dev_ptrs, seqmodel::DecoderKind::mt, config.train.dev_beam,
                                          2 * longest + 10, config.threads);
        std::vector<std::string> hyps, refs;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          hyps.push_back(detokenize(tgt_vocab.decode(ids[i])));
          refs.push_back(detokenize(dev_refs[i]));
        }
        return evalsuite::corpus_chrf(hyps, refs);
      };
      seqmodel::CheckpointSink<float> sink = [&](const seqmodel::Model<float>& m, const seqmodel::EvalPoint& pt) {
        seqmodel::save_checkpoint((seed_dir / ("step-" + std::to_string(pt.step) + ".ckpt")).string(), m);
      };
      return seqmodel::train(sys.model, train_examples, opts, dev, sink);
    });
    sys.model = seqmodel::Model<float>(mc, result.best_params);
    stage("save", seed, [&] {
      sys.save((seed_dir / "system").string());
      return 0;
    });

    // decode + score
    SeedResult sr{seed, result.best_step, {}};
    sr.reports = stage("score", seed, [&] {
      evalsuite::RobustnessOptions ro;
      ro.beam_size = config.beam_size;
      ro.threads = config.threads;
      ro.incongruent = config.incongruent;
      return evalsuite::robustness_report(sys, variants, ro);
    });
    for (auto& r : sr.reports) {
      r.seed = seed;
      r.config_digest = digest;
      r.seeds = {seed};
    }
    json reps = json::array();
    for (const auto& r : sr.reports) reps.push_back(r.to_json());
    write_json((seed_dir / "reports.json").string(), reps);
    bundle.per_seed.push_back(std::move(sr));
  }

  // mean over seeds
  for (const auto& first : bundle.per_seed.front().reports) {
    evalsuite::ScoreReport m;
    m.metric = first.metric;
    m.variant = first.variant;
    m.n = first.n;
    m.config_digest = digest;
    m.seeds = config.seeds;
    m.seed = 0;
    double sum = 0;
    for (const auto& s : bundle.per_seed) sum += s.find(first.variant, first.metric)->corpus_score;
    m.corpus_score = sum / double(bundle.per_seed.size());
    bundle.mean.push_back(std::move(m));
  }
  write_json((run_dir / "bundle.json").string(), bundle.to_json());
  return bundle;
}

}  // namespace

ReportBundle run_experiment(const ExperimentConfig& config) { return run_experiment_impl(config, false); }

// ---------------------------------------------------------------------------
// Lambda sweep

std::vector<SweepRow> sweep_lambda(const ExperimentConfig& config, std::vector<double> lambdas) {
  if (!has_correction(config.variant)) throw ConfigError("lambda sweep requires a *-cor variant");
  if (lambdas.empty()) throw ConfigError("empty lambda list");
  std::sort(lambdas.begin(), lambdas.end());
  if (std::adjacent_find(lambdas.begin(), lambdas.end()) != lambdas.end())
    throw ConfigError("duplicate lambda values in sweep");
  const auto noisy = std::find_if(config.tests.begin(), config.tests.end(), [](auto& t) { return t.name == "noisy"; });
  if (noisy == config.tests.end()) throw ConfigError("lambda sweep needs a noisy test variant");
  const std::string label = "noisy:" + std::to_string(noisy->level);

  std::vector<SweepRow> rows;
  for (double lam : lambdas) {
    if (lam < 0) throw ConfigError("lambda must be >= 0");
    ExperimentConfig c = config;
    c.lambda = lam;
    const auto bundle = run_experiment_impl(c, /*allow_zero_lambda=*/true);
    SweepRow row{lam, 0, 0};
    if (const auto* r = bundle.mean_of(label, "chrf")) row.translation = r->corpus_score;
    if (const auto* r = bundle.mean_of(label, "correction_f0.5")) row.correction = r->corpus_score;
    rows.push_back(row);
  }
  return rows;
}

std::string format_sweep(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << std::left << std::setw(10) << "lambda" << std::setw(14) << "chrF" << "F0.5\n";
  out << std::fixed << std::setprecision(4);
  for (const auto& r : rows) out << std::setw(10) << r.lambda << std::setw(14) << r.translation << r.correction << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Report tables

namespace {

// Tables hold values rounded to the printed precision so the text and JSON
// forms carry the same numbers.
std::optional<double> rounded(const evalsuite::ScoreReport* r) {
  if (!r) return std::nullopt;
  return std::round(r->corpus_score * 1e4) / 1e4;
}

std::string row_label(const ExperimentConfig& c) {
  std::string label = to_string(c.variant);
  const auto& t = c.train_noise;
  if (t.regime == Regime::clean) return label;
  label += " [" + to_string(t.regime);
  if (t.regime == Regime::mixed) {
    std::ostringstream r;
    r << t.ratio;
    label += " " + r.str();
  }
  return label + " n=" + std::to_string(t.n) + "]";
}

std::string format_cell(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << *v;
  return out.str();
}

void table_text(std::ostringstream& out, const Table& t) {
  out << t.title << '\n';
  std::size_t w0 = 5;
  for (const auto& [name, _] : t.rows) w0 = std::max(w0, name.size());
  std::vector<std::size_t> widths;
  for (const auto& c : t.columns) widths.push_back(std::max<std::size_t>(c.size(), 7));
  out << std::left << std::setw(int(w0)) << "model";
  for (std::size_t i = 0; i < t.columns.size(); ++i) out << "  " << std::right << std::setw(int(widths[i])) << t.columns[i];
  out << '\n';
  for (const auto& [name, vals] : t.rows) {
    out << std::left << std::setw(int(w0)) << name;
    for (std::size_t i = 0; i < vals.size(); ++i) out << "  " << std::right << std::setw(int(widths[i])) << format_cell(vals[i]);
    out << '\n';
  }
}

json table_json(const Table& t) {
  json rows = json::array();
  for (const auto& [name, vals] : t.rows) {
    json v = json::array();
    for (const auto& x : vals) v.push_back(x ? json(*x) : json(nullptr));
    rows.push_back({{"model", name}, {"values", v}});
  }
  return {{"title", t.title}, {"columns", t.columns}, {"rows", rows}};
}

}  // namespace

std::string ReportTables::to_text() const {
  std::ostringstream out;
  table_text(out, scores);
  if (!delta.rows.empty()) {
    out << '\n';
    table_text(out, delta);
  }
  if (!clean_drop.rows.empty()) {
    out << '\n';
    table_text(out, clean_drop);
  }
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  return out.str();
}

json ReportTables::to_json() const {
  return {{"scores", table_json(scores)},
          {"delta", table_json(delta)},
          {"clean_drop", table_json(clean_drop)},
          {"warnings", warnings}};
}

ReportTables report_tables(const std::vector<ReportBundle>& bundles) {
  ReportTables out;
  out.scores.title = "chrF (mean over seeds)";
  out.delta.title = "congruent - incongruent chrF";
  out.clean_drop.title = "clean-test drop vs clean-trained NMT";

  // Columns: clean, then noisy levels ascending, then unk levels ascending.
  bool has_clean = false;
  std::set<std::size_t> noisy, unk;
  for (const auto& b : bundles)
    for (const auto& t : b.config.tests) {
      if (t.name == "clean") has_clean = true;
      if (t.name == "noisy") noisy.insert(t.level);
      if (t.name == "unk") unk.insert(t.level);
    }
  std::vector<std::string> labels;
  if (has_clean) {
    labels.push_back("clean");
    out.scores.columns.push_back("clean");
  }
  for (auto n : noisy) {
    labels.push_back("noisy:" + std::to_string(n));
    out.scores.columns.push_back("n=" + std::to_string(n));
  }
  for (auto k : unk) {
    labels.push_back("unk:" + std::to_string(k));
    out.scores.columns.push_back("unk=" + std::to_string(k));
  }
  out.delta.columns = out.scores.columns;
  out.clean_drop.columns = {"clean"};

  const ReportBundle* baseline = nullptr;
  for (const auto& b : bundles)
    if (b.config.variant == ModelVariant::nmt && b.config.train_noise.regime == Regime::clean) {
      baseline = &b;
      break;
    }
  const auto base_clean = baseline ? rounded(baseline->mean_of("clean", "chrf")) : std::nullopt;
  if (has_clean && !base_clean) out.warnings.push_back("no clean-trained NMT run with a clean test; clean-drop table omitted");

  for (const auto& b : bundles) {
    const auto label = row_label(b.config);
    std::vector<std::optional<double>> row, drow;
    for (const auto& l : labels) {
      row.push_back(rounded(b.mean_of(l, "chrf")));
      drow.push_back(rounded(b.mean_of(l, "chrf_delta_congruent_minus_incongruent")));
    }
    out.scores.rows.emplace_back(label, row);
    if (is_visual(b.config.variant) && b.config.incongruent) out.delta.rows.emplace_back(label, drow);
    if (base_clean) {
      const auto mine = rounded(b.mean_of("clean", "chrf"));
      std::optional<double> d;
      if (mine) d = std::round((*base_clean - *mine) * 1e4) / 1e4;
      out.clean_drop.rows.push_back({label, {d}});
    }
  }
  return out;
}

ReportTables report_tables(const std::vector<std::string>& run_dirs) {
  std::vector<ReportBundle> bundles;
  std::vector<std::string> warnings;
  for (const auto& dir : run_dirs) {
    const auto path = fs::path(dir) / "bundle.json";
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      warnings.push_back("missing run " + dir + " (no bundle.json); row omitted");
      continue;
    }
    try {
      json j;
      in >> j;
      auto b = ReportBundle::from_json(j);
      b.run_dir = dir;
      bundles.push_back(std::move(b));
    } catch (const std::exception& e) {
      warnings.push_back("unreadable run " + dir + ": " + e.what() + "; row omitted");
    }
  }
  auto t = report_tables(bundles);
  t.warnings.insert(t.warnings.begin(), warnings.begin(), warnings.end());
  return t;
}

}  // namespace robomt::experiment
