#include <benchmark/benchmark.h>

#include "robomt/corpus.hpp"
#include "robomt/evalsuite.hpp"
#include "robomt/experiment.hpp"
#include "robomt/seqmodel.hpp"
#include "robomt/textnoise.hpp"

using namespace robomt;

namespace {

const corpus::SyntheticCorpus& synthetic(std::size_t n) {
  static std::map<std::size_t, corpus::SyntheticCorpus> cache;
  auto it = cache.find(n);
  if (it == cache.end()) {
    corpus::SyntheticOptions o;
    o.num_sentences = n;
    it = cache.emplace(n, corpus::gen_synthetic_grounded(o)).first;
  }
  return it->second;
}

void BM_InjectCorpus(benchmark::State& state) {
  const auto& syn = synthetic(2000);
  const auto vocab = experiment::edit_vocabulary(ROBOMT_BENCH_LEXICON, syn.source);
  static const textnoise::EditIndex index(vocab, 1);
  textnoise::NoiseResources res;
  res.edit_index = &index;
  res.homophones = &experiment::homophone_index(ROBOMT_BENCH_LEXICON);
  textnoise::NoiseSpec spec;
  spec.n = std::size_t(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(textnoise::inject_corpus(syn.source, spec, res));
  state.SetItemsProcessed(state.iterations() * std::int64_t(syn.source.size()));
}
BENCHMARK(BM_InjectCorpus)->Arg(1)->Arg(2)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_EditCandidates(benchmark::State& state) {
  const auto& lex = experiment::lexicon(ROBOMT_BENCH_LEXICON);
  (void)lex;
  static const textnoise::EditIndex index(experiment::edit_vocabulary(ROBOMT_BENCH_LEXICON, {}), 1);
  for (auto _ : state) benchmark::DoNotOptimize(index.candidates("flower"));
}
BENCHMARK(BM_EditCandidates);

template <class T>
void BM_TrainStep(benchmark::State& state) {
  const auto& syn = synthetic(256);
  const auto src = corpus::build_vocab(syn.source), tgt = corpus::build_vocab(syn.target);
  seqmodel::ModelConfig c;
  c.visual = true;
  c.correction = true;
  c.lambda = 0.5;
  c.src_vocab = c.cor_vocab = src.size();
  c.tgt_vocab = tgt.size();
  std::vector<seqmodel::Example> data;
  for (std::size_t i = 0; i < 32; ++i) {
    const float* f = syn.features.sample(i);
    data.push_back({src.encode(syn.source[i]), tgt.encode(syn.target[i]), src.encode(syn.source[i]),
                    std::vector<float>(f, f + 64)});
  }
  std::vector<const seqmodel::Example*> batch;
  for (const auto& e : data) batch.push_back(&e);
  const seqmodel::Model<T> model(c, 1);
  Rng rng(3);
  for (auto _ : state) benchmark::DoNotOptimize(seqmodel::batch_loss(model, batch, true, &rng).loss);
}
BENCHMARK_TEMPLATE(BM_TrainStep, float)->Unit(benchmark::kMillisecond);
BENCHMARK_TEMPLATE(BM_TrainStep, double)->Unit(benchmark::kMillisecond);

void BM_BeamDecode(benchmark::State& state) {
  const auto& syn = synthetic(256);
  const auto src = corpus::build_vocab(syn.source), tgt = corpus::build_vocab(syn.target);
  seqmodel::ModelConfig c;
  c.src_vocab = src.size();
  c.tgt_vocab = tgt.size();
  std::vector<seqmodel::Example> data;
  for (std::size_t i = 0; i < 16; ++i) data.push_back({src.encode(syn.source[i]), {}, {}, {}});
  std::vector<const seqmodel::Example*> items;
  for (const auto& e : data) items.push_back(&e);
  const seqmodel::Model<float> model(c, 1);
  for (auto _ : state)
    benchmark::DoNotOptimize(seqmodel::decode(model, items, seqmodel::DecoderKind::mt, std::size_t(state.range(0)), 12));
}
BENCHMARK(BM_BeamDecode)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

void BM_CorpusChrf(benchmark::State& state) {
  const auto& syn = synthetic(2000);
  std::vector<std::string> refs;
  for (const auto& s : syn.target) refs.push_back(detokenize(s));
  for (auto _ : state) benchmark::DoNotOptimize(evalsuite::corpus_chrf(refs, refs));
}
BENCHMARK(BM_CorpusChrf)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
