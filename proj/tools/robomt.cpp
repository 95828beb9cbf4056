#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "robomt/corpus.hpp"
#include "robomt/evalsuite.hpp"
#include "robomt/experiment.hpp"
#include "robomt/robustness.hpp"
#include "robomt/seqmodel.hpp"
#include "robomt/textnoise.hpp"

using namespace robomt;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("cannot write " + path);
}

std::string fmt(double v) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4) << v;
  return out.str();
}

std::vector<corpus::Triple> load_triples(const std::string& input, const std::string& clean,
                                         const std::string& target, const std::string& features) {
  const Corpus x = read_corpus(input);
  const Corpus xc = clean.empty() ? x : read_corpus(clean);
  const Corpus y = target.empty() ? Corpus(x.size(), TokenSeq{}) : read_corpus(target);
  std::optional<corpus::FeatureSet> f;
  if (!features.empty()) f = corpus::read_features(features);
  return corpus::make_triples(xc, x, y, f ? &*f : nullptr);
}

// ---------------------------------------------------------------------------

struct InjectArgs {
  std::string input, output, records, lexicon, extra_vocab, weights = "1,1,1";
  std::size_t n = 1;
  std::size_t unk = 0;
  double mix = -1;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

int cmd_inject(const InjectArgs& a) {
  const Corpus clean = read_corpus(a.input);
  if (a.unk > 0) {
    write_corpus(a.output, textnoise::mask_unk_corpus(clean, a.unk, a.seed));
    return 0;
  }
  textnoise::NoiseSpec spec;
  spec.n = a.n;
  spec.seed = a.seed;
  {
    std::vector<double> w;
    std::stringstream ss(a.weights);
    for (std::string item; std::getline(ss, item, ',');) w.push_back(std::stod(item));
    if (w.size() != 3) throw ConfigError("--weights takes three comma-separated values (edit,homophone,keyboard)");
    const double total = w[0] + w[1] + w[2];
    if (!(total > 0)) throw ConfigError("--weights must not all be zero");
    spec.type_weights = {w[0] / total, w[1] / total, w[2] / total};
  }
  spec.validate();
  Corpus extra = clean;
  if (!a.extra_vocab.empty()) {
    const Corpus more = read_corpus(a.extra_vocab);
    extra.insert(extra.end(), more.begin(), more.end());
  }
  const textnoise::EditIndex edit(experiment::edit_vocabulary(a.lexicon, extra), spec.max_edit_distance);
  const auto* homophones = spec.type_weights[1] > 0 ? &experiment::homophone_index(a.lexicon) : nullptr;
  const textnoise::NoiseResources res{&edit, homophones, &textnoise::KeyboardLayout::qwerty()};
  auto noisy = textnoise::inject_corpus(clean, spec, res, a.threads);
  if (!a.records.empty()) textnoise::write_records(a.records, noisy.records);
  if (a.mix >= 0) {
    noisy.sentences = textnoise::mix_clean_noisy(clean, noisy.sentences, a.mix, derive_seed(a.seed, 3)).sentences;
  }
  write_corpus(a.output, noisy.sentences);
  return 0;
}

struct SynthArgs {
  std::string prefix;
  corpus::SyntheticOptions opts;
};

int cmd_synth(const SynthArgs& a) {
  const auto syn = corpus::gen_synthetic_grounded(a.opts);
  write_corpus(a.prefix + ".src", syn.source);
  write_corpus(a.prefix + ".tgt", syn.target);
  corpus::write_features(a.prefix + ".feat", syn.features);
  return 0;
}

struct VocabArgs {
  std::string input, output;
  std::size_t min_freq = 1;
};

int cmd_build_vocab(const VocabArgs& a) {
  if (a.min_freq < 1) throw ConfigError("--min-freq must be >= 1");
  corpus::build_vocab(read_corpus(a.input), a.min_freq).save(a.output);
  return 0;
}

struct TrainArgs {
  std::string src, clean, tgt, features;
  std::string dev_src, dev_clean, dev_tgt, dev_features;
  std::string out, variant = "NMT", preset = "desk", model_json;
  std::optional<double> lambda;
  std::size_t min_freq = 1;
  long steps = 800, eval_every = 200;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

int cmd_train(const TrainArgs& a) {
  experiment::ExperimentConfig ec;
  ec.variant = experiment::variant_from_string(a.variant);
  ec.preset = a.preset;
  ec.lambda = a.lambda;
  if (!a.model_json.empty()) ec.model_overrides = read_json_file(a.model_json);
  if (experiment::has_correction(ec.variant) && !(ec.effective_lambda() > 0))
    throw ConfigError("correction variants require lambda > 0");
  if (experiment::is_visual(ec.variant) && (a.features.empty() || a.dev_features.empty()))
    throw ConfigError("multimodal variants require --features and --dev-features");
  if (a.min_freq < 1) throw ConfigError("--min-freq must be >= 1");
  seqmodel::ModelConfig mc = ec.model_config();

  const auto train = load_triples(a.src, a.clean, a.tgt, mc.visual ? a.features : "");
  const auto dev = load_triples(a.dev_src, a.dev_clean, a.dev_tgt, mc.visual ? a.dev_features : "");
  Corpus inputs, cleans, targets;
  for (const auto& t : train) {
    inputs.push_back(t.x_noisy);
    cleans.push_back(t.x_clean);
    targets.push_back(t.y);
  }
  auto src_vocab = corpus::build_vocab(inputs, a.min_freq);
  auto tgt_vocab = corpus::build_vocab(targets);
  auto cor_vocab = mc.correction ? corpus::build_vocab(cleans) : corpus::Vocab{};
  mc.src_vocab = src_vocab.size();
  mc.tgt_vocab = tgt_vocab.size();
  mc.cor_vocab = mc.correction ? cor_vocab.size() : 0;
  if (mc.visual) {
    const auto f = corpus::read_features(a.features);
    mc.regions = static_cast<int>(f.regions);
    mc.d_feat = static_cast<int>(f.dim);
  }
  evalsuite::System sys{seqmodel::Model<float>(mc, derive_seed(a.seed, 0x1417)), std::move(src_vocab),
                        std::move(tgt_vocab), std::move(cor_vocab)};

  const auto examples = sys.encode(train);
  const auto dev_examples = sys.encode(dev);
  std::vector<const seqmodel::Example*> dev_ptrs;
  std::size_t longest = 0;
  for (const auto& e : dev_examples) {
    dev_ptrs.push_back(&e);
    longest = std::max(longest, e.src.size());
  }
  seqmodel::TrainOptions opts;
  opts.steps = a.steps;
  opts.eval_every = a.eval_every;
  opts.seed = derive_seed(a.seed, 0x7a11);
  seqmodel::DevScorer<float> scorer = [&](const seqmodel::Model<float>& m) {
    const auto ids = seqmodel::decode(m, dev_ptrs, seqmodel::DecoderKind::mt, 1, 2 * longest + 10, a.threads);
    std::vector<std::string> hyps, refs;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      hyps.push_back(detokenize(sys.tgt_vocab.decode(ids[i])));
      refs.push_back(detokenize(dev[i].y));
    }
    return evalsuite::corpus_chrf(hyps, refs);
  };
  seqmodel::CheckpointSink<float> sink = [](const seqmodel::Model<float>&, const seqmodel::EvalPoint& p) {
    std::cerr << "step " << p.step << "  loss " << fmt(p.train_loss) << "  dev chrF " << fmt(p.dev_score) << '\n';
  };
  auto result = seqmodel::train(sys.model, examples, opts, scorer, sink);
  sys.model = seqmodel::Model<float>(mc, std::move(result.best_params));
  sys.save(a.out);
  std::cerr << "best step " << result.best_step << " (dev chrF " << fmt(result.best_dev_score) << ")\n";
  return 0;
}

struct DecodeArgs {
  std::string model, input, features, output;
  std::size_t beam = 4, max_len = 0;
  unsigned threads = 1;
};

int cmd_decode(const DecodeArgs& a, seqmodel::DecoderKind kind) {
  const auto sys = evalsuite::System::load(a.model);
  if (kind == seqmodel::DecoderKind::cor && !sys.model.config().correction)
    throw ConfigError("model has no correction decoder");
  if (sys.model.config().visual && a.features.empty()) throw ConfigError("visual model requires --features");
  const auto data = load_triples(a.input, "", "", sys.model.config().visual ? a.features : "");
  write_corpus(a.output, evalsuite::translate(sys, data, kind, a.beam, a.max_len, a.threads));
  return 0;
}

struct ScoreArgs {
  std::string hyp, ref, noisy, json_out;
};

int emit_report(const evalsuite::ScoreReport& r, const std::string& json_out) {
  std::cout << r.metric << ' ' << fmt(r.corpus_score) << '\n';
  if (!json_out.empty()) write_text(json_out, r.to_json().dump(2) + "\n");
  return 0;
}

struct ProbeArgs {
  std::string model, noisy, clean, features, json_out;
  long attention = -1;
  std::string decoder = "mt";
};

int cmd_probe(const ProbeArgs& a) {
  const auto sys = evalsuite::System::load(a.model);
  if (a.attention >= 0) {
    const auto data = load_triples(a.noisy, "", "", sys.model.config().visual ? a.features : "");
    if (std::size_t(a.attention) >= data.size()) throw DataError("--attention index out of range");
    const auto kind = a.decoder == "cor" ? seqmodel::DecoderKind::cor : seqmodel::DecoderKind::mt;
    if (kind == seqmodel::DecoderKind::cor && !sys.model.config().correction)
      throw ConfigError("model has no correction decoder");
    const auto& t = data[std::size_t(a.attention)];
    const auto ex = sys.encode(t);
    // Greedy output is the target the maps are computed for.
    const auto out = evalsuite::translate(sys, {t}, kind, 1, 0, 1).front();
    seqmodel::Example item = ex;
    item.tgt = (kind == seqmodel::DecoderKind::mt ? sys.tgt_vocab : sys.cor_vocab).encode(out);
    if (kind == seqmodel::DecoderKind::cor) item.cor = item.tgt;
    const auto maps = seqmodel::attention_dump(sys.model, item, kind);
    auto dump = [](const std::vector<std::vector<graph::Mat<float>>>& layers) {
      json j = json::array();
      for (const auto& heads : layers) {
        json lj = json::array();
        for (const auto& m : heads) {
          json rows = json::array();
          for (Eigen::Index r = 0; r < m.rows(); ++r) {
            std::vector<float> row(m.row(r).data(), m.row(r).data() + m.cols());
            rows.push_back(row);
          }
          lj.push_back(rows);
        }
        j.push_back(lj);
      }
      return j;
    };
    json j{{"source", t.x_noisy}, {"output", out}, {"text", dump(maps.text)}};
    if (sys.model.config().visual) j["visual"] = dump(maps.visual);
    write_text(a.json_out, j.dump() + "\n");
    return 0;
  }
  const auto data = load_triples(a.noisy, a.clean, "", "");
  std::cout << "cosine " << fmt(evalsuite::mean_encoder_similarity(sys, data)) << '\n';
  return 0;
}

struct IncongruentArgs {
  std::string model, input, features, ref;
  std::size_t beam = 4;
  unsigned threads = 1;
};

int cmd_incongruent(const IncongruentArgs& a) {
  const auto sys = evalsuite::System::load(a.model);
  if (!sys.model.config().visual) throw ConfigError("incongruent decoding requires a model with a visual pathway");
  evalsuite::TestVariant v{"test", std::nullopt, load_triples(a.input, "", a.ref, a.features)};
  evalsuite::RobustnessOptions ro;
  ro.beam_size = a.beam;
  ro.threads = a.threads;
  ro.incongruent = true;
  ro.cosine = false;
  for (const auto& r : evalsuite::robustness_report(sys, {v}, ro))
    if (r.metric != "correction_f0.5") std::cout << r.metric << ' ' << fmt(r.corpus_score) << '\n';
  return 0;
}

struct RunArgs {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out_dir;
  std::optional<unsigned> threads;
  std::optional<long> steps;
  std::optional<double> lambda;
  std::string variant;
  bool dump = false;
};

experiment::ExperimentConfig load_config(const RunArgs& a) {
  experiment::ExperimentConfig c =
      a.config.empty() ? experiment::ExperimentConfig{} : experiment::ExperimentConfig::from_json(read_json_file(a.config));
  if (!a.seeds.empty()) c.seeds = a.seeds;
  if (!a.out_dir.empty()) c.out_dir = a.out_dir;
  if (a.threads) c.threads = *a.threads;
  if (a.steps) c.train.steps = *a.steps;
  if (a.lambda) c.lambda = *a.lambda;
  if (!a.variant.empty()) c.variant = experiment::variant_from_string(a.variant);
  return c;
}

int cmd_run(const RunArgs& a) {
  const auto c = load_config(a);
  if (a.dump) {
    std::cout << c.to_json().dump(2) << '\n';
    return 0;
  }
  const auto bundle = experiment::run_experiment(c);
  std::cout << "run directory: " << bundle.run_dir << '\n';
  std::cout << experiment::report_tables(std::vector<experiment::ReportBundle>{bundle}).to_text();
  return 0;
}

void add_run_flags(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "experiment config (JSON)");
  cmd->add_option("--seeds", a.seeds, "override seeds")->delimiter(',');
  cmd->add_option("--out-dir", a.out_dir, "override output directory");
  cmd->add_option("--threads", a.threads, "worker threads");
  cmd->add_option("--steps", a.steps, "override training steps");
  cmd->add_option("--variant", a.variant, "override model variant (NMT, MMT, NMT-cor, MMT-cor)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Noise-robust multimodal translation toolkit"};
  app.require_subcommand(1);

  InjectArgs inject;
  auto* c_inject = app.add_subcommand("inject", "inject word-level noise into a corpus");
  c_inject->add_option("-i,--input", inject.input, "clean corpus")->required();
  c_inject->add_option("-o,--output", inject.output, "noisy corpus")->required();
  c_inject->add_option("--records", inject.records, "JSONL noise records");
  c_inject->add_option("-n", inject.n, "substitutions per sentence");
  c_inject->add_option("--seed", inject.seed);
  c_inject->add_option("--weights", inject.weights, "edit,homophone,keyboard type weights");
  c_inject->add_option("--lexicon", inject.lexicon, "cmudict-0.7b path");
  c_inject->add_option("--extra-vocab", inject.extra_vocab, "extra corpus for the edit-noise vocabulary");
  c_inject->add_option("--unk", inject.unk, "mask K tokens with [UNK] instead of injecting noise");
  c_inject->add_option("--mix", inject.mix, "keep each sentence noisy with this probability");
  c_inject->add_option("--threads", inject.threads);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "generate the synthetic grounded corpus (PREFIX.src/.tgt/.feat)");
  c_synth->add_option("-o,--prefix", synth.prefix)->required();
  c_synth->add_option("-n,--sentences", synth.opts.num_sentences);
  c_synth->add_option("--min-objects", synth.opts.min_objects);
  c_synth->add_option("--max-objects", synth.opts.max_objects);
  c_synth->add_option("--regions", synth.opts.regions);
  c_synth->add_option("--dim", synth.opts.dim);
  c_synth->add_option("--jitter", synth.opts.jitter);
  c_synth->add_option("--seed", synth.opts.seed);

  VocabArgs vocab;
  auto* c_vocab = app.add_subcommand("build-vocab", "build a word vocabulary");
  c_vocab->add_option("-i,--input", vocab.input)->required();
  c_vocab->add_option("-o,--output", vocab.output)->required();
  c_vocab->add_option("--min-freq", vocab.min_freq);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "train a model and save it as a model directory");
  c_train->add_option("--src", train.src, "model input (noisy source)")->required();
  c_train->add_option("--clean", train.clean, "clean source (correction target)");
  c_train->add_option("--tgt", train.tgt)->required();
  c_train->add_option("--features", train.features);
  c_train->add_option("--dev-src", train.dev_src)->required();
  c_train->add_option("--dev-clean", train.dev_clean);
  c_train->add_option("--dev-tgt", train.dev_tgt)->required();
  c_train->add_option("--dev-features", train.dev_features);
  c_train->add_option("-o,--out", train.out, "model directory")->required();
  c_train->add_option("--variant", train.variant);
  c_train->add_option("--preset", train.preset);
  c_train->add_option("--model-json", train.model_json, "JSON overrides of model hyperparameters");
  c_train->add_option("--lambda", train.lambda);
  c_train->add_option("--min-freq", train.min_freq, "encoder vocabulary threshold");
  c_train->add_option("--steps", train.steps);
  c_train->add_option("--eval-every", train.eval_every);
  c_train->add_option("--seed", train.seed);
  c_train->add_option("--threads", train.threads);

  DecodeArgs translate, correct;
  auto add_decode = [&](const char* name, const char* help, DecodeArgs& a) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("-m,--model", a.model)->required();
    c->add_option("-i,--input", a.input)->required();
    c->add_option("-o,--output", a.output)->required();
    c->add_option("--features", a.features);
    c->add_option("--beam", a.beam);
    c->add_option("--max-len", a.max_len);
    c->add_option("--threads", a.threads);
    return c;
  };
  auto* c_translate = add_decode("translate", "translate with the translation decoder", translate);
  auto* c_correct = add_decode("correct", "reconstruct clean sources with the correction decoder", correct);

  ScoreArgs smt, scor;
  auto* c_smt = app.add_subcommand("score-mt", "corpus chrF");
  c_smt->add_option("--hyp", smt.hyp)->required();
  c_smt->add_option("--ref", smt.ref)->required();
  c_smt->add_option("--json", smt.json_out);
  auto* c_scor = app.add_subcommand("score-cor", "correction F0.5 over alignment edits");
  c_scor->add_option("--noisy", scor.noisy)->required();
  c_scor->add_option("--hyp", scor.hyp, "system corrections")->required();
  c_scor->add_option("--ref", scor.ref, "clean sources")->required();
  c_scor->add_option("--json", scor.json_out);

  ProbeArgs probe;
  auto* c_probe = app.add_subcommand("probe", "encoder cosine similarity or attention dump");
  c_probe->add_option("-m,--model", probe.model)->required();
  c_probe->add_option("--noisy", probe.noisy)->required();
  c_probe->add_option("--clean", probe.clean);
  c_probe->add_option("--features", probe.features);
  c_probe->add_option("--attention", probe.attention, "dump attention maps for sentence INDEX");
  c_probe->add_option("--decoder", probe.decoder)->check(CLI::IsMember({"mt", "cor"}));
  c_probe->add_option("--json", probe.json_out);

  IncongruentArgs inc;
  auto* c_inc = app.add_subcommand("incongruent", "congruent vs incongruent chrF");
  c_inc->add_option("-m,--model", inc.model)->required();
  c_inc->add_option("-i,--input", inc.input)->required();
  c_inc->add_option("--features", inc.features)->required();
  c_inc->add_option("--ref", inc.ref)->required();
  c_inc->add_option("--beam", inc.beam);
  c_inc->add_option("--threads", inc.threads);

  RunArgs run;
  auto* c_run = app.add_subcommand("run", "run a full experiment from a config file");
  add_run_flags(c_run, run);
  c_run->add_option("--lambda", run.lambda);
  c_run->add_flag("--dump-config", run.dump, "print the effective config and exit");

  RunArgs sweep;
  std::vector<double> lambdas;
  auto* c_sweep = app.add_subcommand("sweep", "one experiment per correction-loss weight");
  add_run_flags(c_sweep, sweep);
  c_sweep->add_option("--lambdas", lambdas)->delimiter(',')->required();

  std::vector<std::string> run_dirs;
  std::string report_json;
  auto* c_report = app.add_subcommand("report", "tables over completed run directories");
  c_report->add_option("dirs", run_dirs)->required();
  c_report->add_option("--json", report_json);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (c_inject->parsed()) return cmd_inject(inject);
    if (c_synth->parsed()) return cmd_synth(synth);
    if (c_vocab->parsed()) return cmd_build_vocab(vocab);
    if (c_train->parsed()) return cmd_train(train);
    if (c_translate->parsed()) return cmd_decode(translate, seqmodel::DecoderKind::mt);
    if (c_correct->parsed()) return cmd_decode(correct, seqmodel::DecoderKind::cor);
    if (c_smt->parsed()) {
      auto r = evalsuite::score_translations(read_corpus(smt.hyp), read_corpus(smt.ref));
      return emit_report(r, smt.json_out);
    }
    if (c_scor->parsed()) {
      auto r = evalsuite::score_corrections(read_corpus(scor.noisy), read_corpus(scor.hyp), read_corpus(scor.ref));
      return emit_report(r, scor.json_out);
    }
    if (c_probe->parsed()) return cmd_probe(probe);
    if (c_inc->parsed()) return cmd_incongruent(inc);
    if (c_run->parsed()) return cmd_run(run);
    if (c_sweep->parsed()) {
      std::cout << experiment::format_sweep(experiment::sweep_lambda(load_config(sweep), lambdas));
      return 0;
    }
    if (c_report->parsed()) {
      const auto tables = experiment::report_tables(run_dirs);
      std::cout << tables.to_text();
      if (!report_json.empty()) write_text(report_json, tables.to_json().dump(2) + "\n");
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
