#include "robomt/seqmodel.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>
#include <iterator>
#include <numeric>
#include <thread>

#include "robomt/corpus.hpp"

namespace robomt::seqmodel {

using graph::Graph;
using graph::ParamRef;
using graph::Segment;
using graph::Var;
using nlohmann::json;

std::string to_string(Group g) {
  switch (g) {
    case Group::encoder: return "encoder";
    case Group::visual: return "visual";
    case Group::mt_decoder: return "mt_decoder";
    case Group::cor_decoder: return "cor_decoder";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (d_model < 2 || heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (d_ff < 1) throw ConfigError("d_ff must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (visual && (regions < 1 || d_feat < 1)) throw ConfigError("visual model needs positive feature geometry");
  if (warmup < 1) throw ConfigError("warmup must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (src_vocab <= corpus::kNumSpecials || tgt_vocab <= corpus::kNumSpecials)
    throw ConfigError("vocabulary sizes must exceed the special tokens");
  if (correction && cor_vocab <= corpus::kNumSpecials) throw ConfigError("correction vocabulary is empty");
}

json ModelConfig::to_json() const {
  return json{{"layers", layers},
              {"d_model", d_model},
              {"d_ff", d_ff},
              {"heads", heads},
              {"dropout", dropout},
              {"pre_norm", pre_norm},
              {"visual", visual},
              {"correction", correction},
              {"regions", regions},
              {"d_feat", d_feat},
              {"lambda", lambda},
              {"warmup", warmup},
              {"batch_size", batch_size},
              {"lr_scale", lr_scale},
              {"precision", precision == Precision::f32 ? "f32" : "f64"},
              {"src_vocab", src_vocab},
              {"tgt_vocab", tgt_vocab},
              {"cor_vocab", cor_vocab}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.layers = j.value("layers", c.layers);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.heads = j.value("heads", c.heads);
    c.dropout = j.value("dropout", c.dropout);
    c.pre_norm = j.value("pre_norm", c.pre_norm);
    c.visual = j.value("visual", c.visual);
    c.correction = j.value("correction", c.correction);
    c.regions = j.value("regions", c.regions);
    c.d_feat = j.value("d_feat", c.d_feat);
    c.lambda = j.value("lambda", c.lambda);
    c.warmup = j.value("warmup", c.warmup);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lr_scale = j.value("lr_scale", c.lr_scale);
    const std::string prec = j.value("precision", std::string("f32"));
    if (prec != "f32" && prec != "f64") throw ConfigError("precision must be f32 or f64");
    c.precision = prec == "f32" ? Precision::f32 : Precision::f64;
    c.src_vocab = j.value("src_vocab", c.src_vocab);
    c.tgt_vocab = j.value("tgt_vocab", c.tgt_vocab);
    c.cor_vocab = j.value("cor_vocab", c.cor_vocab);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::paper() {
  ModelConfig c;
  c.layers = 6;
  c.d_model = 512;
  c.d_ff = 1024;
  c.heads = 4;
  c.dropout = 0.3;
  c.regions = 36;
  c.d_feat = 2048;
  c.warmup = 8000;
  c.batch_size = 64;
  return c;
}

double default_lambda_for_noise(std::size_t n) {
  if (n >= 10) return 0.8;
  if (n >= 4) return 0.4;
  return 0.2;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
std::size_t Params<T>::index_of(const std::string& name) const {
  auto it = lookup_.find(name);
  if (it == lookup_.end()) throw Error("unknown parameter tensor '" + name + "'");
  return it->second;
}

template <class T>
std::size_t Params<T>::count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += static_cast<std::size_t>(t.value.size());
  return n;
}

template <class T>
void Params<T>::add(std::string name, Group group, Mat<T> value) {
  if (lookup_.count(name)) throw Error("duplicate parameter tensor '" + name + "'");
  lookup_[name] = tensors.size();
  tensors.push_back(Tensor<T>{std::move(name), group, std::move(value)});
}

template <class T>
Params<T> Params<T>::zeros_like() const {
  Params<T> out;
  for (const auto& t : tensors) out.add(t.name, t.group, Mat<T>::Zero(t.value.rows(), t.value.cols()));
  return out;
}

namespace {

template <class T>
class Initializer {
 public:
  Initializer(Params<T>& p, std::uint64_t seed) : p_(p), rng_(seed) {}

  void linear(const std::string& name, Group g, int in, int out) {
    const double limit = std::sqrt(6.0 / double(in + out));
    Mat<T> w(in, out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = T((2.0 * rng_.uniform() - 1.0) * limit);
    p_.add(name + ".w", g, std::move(w));
    p_.add(name + ".b", g, Mat<T>::Zero(1, out));
  }

  void norm(const std::string& name, Group g, int d) {
    p_.add(name + ".g", g, Mat<T>::Ones(1, d));
    p_.add(name + ".b", g, Mat<T>::Zero(1, d));
  }

  void embedding(const std::string& name, Group g, std::size_t rows, int d) {
    Mat<T> e(static_cast<Eigen::Index>(rows), d);
    const double sd = 1.0 / std::sqrt(double(d));
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = T(rng_.normal() * sd);
    p_.add(name, g, std::move(e));
  }

  void attention(const std::string& name, Group g, int d) {
    for (const char* part : {".q", ".k", ".v", ".o"}) linear(name + part, g, d, d);
  }

 private:
  Params<T>& p_;
  Rng rng_;
};

std::string layer_prefix(const std::string& stack, int i) { return stack + ".L" + std::to_string(i); }

template <class T>
Params<T> init_params(const ModelConfig& c, std::uint64_t seed) {
  Params<T> p;
  Initializer<T> init(p, seed);
  const int d = c.d_model;
  init.embedding("enc.embed", Group::encoder, c.src_vocab, d);
  for (int i = 0; i < c.layers; ++i) {
    const auto L = layer_prefix("enc", i);
    init.norm(L + ".ln1", Group::encoder, d);
    init.attention(L + ".self", Group::encoder, d);
    init.norm(L + ".ln2", Group::encoder, d);
    init.linear(L + ".ff1", Group::encoder, d, c.d_ff);
    init.linear(L + ".ff2", Group::encoder, c.d_ff, d);
  }
  if (c.pre_norm) init.norm("enc.ln_f", Group::encoder, d);
  if (c.visual) init.linear("vis.proj", Group::visual, c.d_feat, d);

  auto decoder = [&](const std::string& stack, Group g, std::size_t vocab) {
    init.embedding(stack + ".embed", g, vocab, d);
    for (int i = 0; i < c.layers; ++i) {
      const auto L = layer_prefix(stack, i);
      init.norm(L + ".ln1", g, d);
      init.attention(L + ".self", g, d);
      init.norm(L + ".ln2", g, d);
      init.attention(L + ".cross", g, d);
      if (c.visual) {
        init.norm(L + ".ln3", g, d);
        init.attention(L + ".vis", g, d);
      }
      init.norm(L + ".ln4", g, d);
      init.linear(L + ".ff1", g, d, c.d_ff);
      init.linear(L + ".ff2", g, c.d_ff, d);
    }
    if (c.pre_norm) init.norm(stack + ".ln_f", g, d);
    init.linear(stack + ".out", g, d, static_cast<int>(vocab));
  };
  decoder("mt", Group::mt_decoder, c.tgt_vocab);
  if (c.correction) decoder("cor", Group::cor_decoder, c.cor_vocab);
  return p;
}

}  // namespace

template <class T>
Model<T>::Model(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  params_ = init_params<T>(config_, init_seed);
}

template <class T>
Model<T>::Model(const ModelConfig& config, Params<T> params) : config_(config), params_(std::move(params)) {
  config_.validate();
}

// ---------------------------------------------------------------------------
// Forward graph construction

namespace {

template <class T>
class Builder {
 public:
  Builder(const Model<T>& m, Graph<T>& g, Params<T>* grads, Rng* rng)
      : m_(m), c_(m.config()), g_(g), grads_(grads), rng_(rng) {}

  ParamRef<T> ref(const std::string& name) const {
    const std::size_t i = m_.params().index_of(name);
    return {&m_.params().tensors[i].value, grads_ ? &grads_->tensors[i].value : nullptr};
  }

  Var lin(Var x, const std::string& name) { return g_.linear(x, ref(name + ".w"), ref(name + ".b")); }
  Var norm(Var x, const std::string& name) { return g_.layer_norm(x, ref(name + ".g"), ref(name + ".b")); }
  Var drop(Var x) { return g_.dropout(x, T(c_.dropout), rng_); }

  Var mha(Var xq, Var xkv, const std::string& name, std::span<const Segment> qs, std::span<const Segment> ks,
          bool causal) {
    const Var q = lin(xq, name + ".q");
    const Var k = lin(xkv, name + ".k");
    const Var v = lin(xkv, name + ".v");
    return lin(g_.attention(q, k, v, qs, ks, c_.heads, causal), name + ".o");
  }

  template <class F>
  Var sublayer(Var x, const std::string& ln, F&& f) {
    if (c_.pre_norm) return g_.add(x, drop(f(norm(x, ln))));
    return norm(g_.add(x, drop(f(x))), ln);
  }

  Var feed_forward(Var x, const std::string& L) { return lin(g_.relu(lin(x, L + ".ff1")), L + ".ff2"); }

  Var encoder(std::span<const std::int32_t> ids, std::span<const Segment> segs) {
    Var x = drop(g_.embed(ref("enc.embed"), ids, segs, std::sqrt(T(c_.d_model))));
    for (int i = 0; i < c_.layers; ++i) {
      const auto L = layer_prefix("enc", i);
      x = sublayer(x, L + ".ln1", [&](Var h) { return mha(h, h, L + ".self", segs, segs, false); });
      x = sublayer(x, L + ".ln2", [&](Var h) { return feed_forward(h, L); });
    }
    if (c_.pre_norm) x = norm(x, "enc.ln_f");
    return x;
  }

  Var visual_memory(const Mat<T>& feats) { return lin(g_.input(feats), "vis.proj"); }

  /// Returns logits (one row per decoder input position).
  Var decoder(const std::string& stack, std::span<const std::int32_t> ids, std::span<const Segment> segs, Var memory,
              std::span<const Segment> msegs, std::optional<Var> vis, std::span<const Segment> vsegs) {
    Var x = drop(g_.embed(ref(stack + ".embed"), ids, segs, std::sqrt(T(c_.d_model))));
    for (int i = 0; i < c_.layers; ++i) {
      const auto L = layer_prefix(stack, i);
      x = sublayer(x, L + ".ln1", [&](Var h) { return mha(h, h, L + ".self", segs, segs, true); });
      x = sublayer(x, L + ".ln2", [&](Var h) { return mha(h, memory, L + ".cross", segs, msegs, false); });
      if (c_.visual) x = sublayer(x, L + ".ln3", [&](Var h) { return mha(h, *vis, L + ".vis", segs, vsegs, false); });
      x = sublayer(x, L + ".ln4", [&](Var h) { return feed_forward(h, L); });
    }
    if (c_.pre_norm) x = norm(x, stack + ".ln_f");
    return lin(x, stack + ".out");
  }

 private:
  const Model<T>& m_;
  const ModelConfig& c_;
  Graph<T>& g_;
  Params<T>* grads_;
  Rng* rng_;
};

struct Packed {
  std::vector<std::int32_t> ids;
  std::vector<Segment> segs;

  void append(std::span<const std::int32_t> seq) {
    segs.push_back({ids.size(), seq.size()});
    ids.insert(ids.end(), seq.begin(), seq.end());
  }
};

/// Decoder input (<s> + seq) and output (seq + </s>) streams.
struct TeacherForced {
  Packed in;
  std::vector<std::int32_t> out;

  void append(const std::vector<std::int32_t>& seq) {
    std::vector<std::int32_t> i{corpus::kBos};
    i.insert(i.end(), seq.begin(), seq.end());
    in.append(i);
    out.insert(out.end(), seq.begin(), seq.end());
    out.push_back(corpus::kEos);
  }
};

template <class T>
Mat<T> pack_features(const ModelConfig& c, const std::vector<const std::vector<float>*>& feats,
                     std::vector<Segment>& segs) {
  Mat<T> m(static_cast<Eigen::Index>(feats.size()) * c.regions, c.d_feat);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    const auto* f = feats[i];
    if (f == nullptr || f->size() != std::size_t(c.regions) * c.d_feat)
      throw DataError("visual model needs " + std::to_string(c.regions) + "x" + std::to_string(c.d_feat) +
                      " features per sample");
    for (int r = 0; r < c.regions; ++r)
      for (int k = 0; k < c.d_feat; ++k)
        m(static_cast<Eigen::Index>(i) * c.regions + r, k) = T((*f)[std::size_t(r) * c.d_feat + k]);
    segs.push_back({i * std::size_t(c.regions), std::size_t(c.regions)});
  }
  return m;
}

const char* stack_name(DecoderKind k) { return k == DecoderKind::mt ? "mt" : "cor"; }

}  // namespace

template <class T>
EncoderStates<T> encode(const Model<T>& model, const std::vector<std::int32_t>& src) {
  if (src.empty()) throw DataError("cannot encode an empty sentence");
  Graph<T> g(false);
  Builder<T> b(model, g, nullptr, nullptr);
  const Segment seg{0, src.size()};
  return g.value(b.encoder(src, std::span(&seg, 1)));
}

template <class T>
T forward_nll(const Model<T>& model, const EncoderStates<T>& states, const std::vector<float>* features,
              const std::vector<std::int32_t>& target, DecoderKind decoder) {
  const auto& c = model.config();
  if (target.empty()) throw DataError("forward_nll: empty target");
  if (decoder == DecoderKind::cor && !c.correction) throw ConfigError("model has no correction decoder");
  if (c.visual && features == nullptr) throw DataError("visual model requires features");
  Graph<T> g(false);
  Builder<T> b(model, g, nullptr, nullptr);
  const Var mem = g.input(states);
  const Segment mseg{0, static_cast<std::size_t>(states.rows())};
  std::optional<Var> vis;
  std::vector<Segment> vsegs;
  if (c.visual) vis = b.visual_memory(pack_features<T>(c, {features}, vsegs));
  TeacherForced tf;
  tf.append(target);
  const Var logits = b.decoder(stack_name(decoder), tf.in.ids, tf.in.segs, mem, std::span(&mseg, 1), vis, vsegs);
  return g.value(g.cross_entropy(logits, tf.out))(0, 0);
}

template <class T>
BatchResult<T> batch_loss(const Model<T>& model, const std::vector<const Example*>& batch, bool want_grads,
                          Rng* dropout_rng, bool force_cor) {
  const auto& c = model.config();
  if (batch.empty()) throw DataError("empty batch");
  const bool use_cor = c.correction && (c.lambda > 0 || force_cor);

  BatchResult<T> res;
  if (want_grads) res.grads = model.params().zeros_like();
  Graph<T> g(want_grads);
  Builder<T> b(model, g, want_grads ? &res.grads : nullptr, dropout_rng);

  Packed src;
  TeacherForced mt, cor;
  std::vector<const std::vector<float>*> feats;
  for (const auto* ex : batch) {
    if (ex->src.empty() || ex->tgt.empty()) throw DataError("empty sentence in batch");
    src.append(ex->src);
    mt.append(ex->tgt);
    if (use_cor) cor.append(ex->cor);
    feats.push_back(&ex->features);
  }
  const Var H = b.encoder(src.ids, src.segs);
  std::optional<Var> vis;
  std::vector<Segment> vsegs;
  if (c.visual) vis = b.visual_memory(pack_features<T>(c, feats, vsegs));

  const Var mt_logits = b.decoder("mt", mt.in.ids, mt.in.segs, H, src.segs, vis, vsegs);
  const Var mt_nll = g.cross_entropy(mt_logits, mt.out, &res.mt_correct);
  res.mt_tokens = mt.out.size();
  res.mt_loss = g.value(mt_nll)(0, 0) / T(res.mt_tokens);

  std::vector<std::pair<Var, T>> seeds{{mt_nll, T(1) / T(res.mt_tokens)}};
  if (use_cor) {
    const Var cor_logits = b.decoder("cor", cor.in.ids, cor.in.segs, H, src.segs, vis, vsegs);
    const Var cor_nll = g.cross_entropy(cor_logits, cor.out, &res.cor_correct);
    res.cor_tokens = cor.out.size();
    res.cor_loss = g.value(cor_nll)(0, 0) / T(res.cor_tokens);
    seeds.emplace_back(cor_nll, T(c.lambda) / T(res.cor_tokens));
  }
  res.loss = res.mt_loss + T(c.lambda) * res.cor_loss;
  if (want_grads) g.backward(seeds);
  return res;
}

template <class T>
Params<T> backward(const Model<T>& model, const std::vector<const Example*>& batch) {
  auto r = batch_loss(model, batch, true, nullptr);
  if (!std::isfinite(double(r.loss))) throw DivergenceError("non-finite loss in backward pass", 0);
  return std::move(r.grads);
}

// ---------------------------------------------------------------------------
// Optimisation

double noam_lr(long step, int d_model, int warmup) {
  if (step < 1) throw ConfigError("noam schedule starts at step 1");
  const double s = double(step);
  return std::pow(double(d_model), -0.5) * std::min(std::pow(s, -0.5), s * std::pow(double(warmup), -1.5));
}

template <class T>
Adam<T>::Adam(const Params<T>& like, double beta1, double beta2, double eps)
    : m_(like.zeros_like()), v_(like.zeros_like()), beta1_(beta1), beta2_(beta2), eps_(eps) {}

template <class T>
void Adam<T>::step(Params<T>& params, const Params<T>& grads, double lr) {
  ++t_;
  const T b1 = T(beta1_), b2 = T(beta2_);
  const T c1 = T(1.0 - std::pow(beta1_, double(t_)));
  const T c2 = T(1.0 - std::pow(beta2_, double(t_)));
  const T step = T(lr), eps = T(eps_);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& g = grads.tensors[i].value.array();
    auto m = m_.tensors[i].value.array();
    auto v = v_.tensors[i].value.array();
    m = b1 * m + (T(1) - b1) * g;
    v = b2 * v + (T(1) - b2) * g.square();
    params.tensors[i].value.array() -= step * (m / c1) / ((v / c2).sqrt() + eps);
  }
}

template <class T>
std::pair<double, double> teacher_forced_accuracy(const Model<T>& model, const std::vector<Example>& data) {
  std::size_t mt_hit = 0, mt_n = 0, cor_hit = 0, cor_n = 0;
  constexpr std::size_t chunk = 64;
  for (std::size_t i = 0; i < data.size(); i += chunk) {
    std::vector<const Example*> batch;
    for (std::size_t j = i; j < std::min(data.size(), i + chunk); ++j) batch.push_back(&data[j]);
    const auto r = batch_loss(model, batch, false, nullptr, true);
    mt_hit += r.mt_correct;
    mt_n += r.mt_tokens;
    cor_hit += r.cor_correct;
    cor_n += r.cor_tokens;
  }
  return {mt_n ? double(mt_hit) / double(mt_n) : 0.0, cor_n ? double(cor_hit) / double(cor_n) : 1.0};
}

template <class T>
TrainResult<T> train(Model<T>& model, const std::vector<Example>& data, const TrainOptions& opts,
                     const DevScorer<T>& dev, const CheckpointSink<T>& sink) {
  if (data.empty()) throw DataError("training set is empty");
  if (opts.steps < 1 || opts.eval_every < 1) throw ConfigError("steps and eval_every must be positive");
  const auto& c = model.config();
  Adam<T> adam(model.params());
  TrainResult<T> res;

  Rng order_rng(derive_seed(opts.seed, 0x0bd3));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();

  for (long step = 1; step <= opts.steps; ++step) {
    std::vector<const Example*> batch;
    while (batch.size() < std::size_t(c.batch_size) && batch.size() < data.size()) {
      if (cursor == order.size()) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    Rng drop_rng(derive_seed(opts.seed, 0x100000000ULL + std::uint64_t(step)));
    auto r = batch_loss(model, batch, true, c.dropout > 0 ? &drop_rng : nullptr);
    if (!std::isfinite(double(r.loss)))
      throw DivergenceError("training diverged (non-finite loss) at step " + std::to_string(step), step);
    if (step == 1) res.initial_loss = double(r.loss);
    res.final_loss = double(r.loss);
    adam.step(model.params(), r.grads, c.lr_scale * noam_lr(step, c.d_model, c.warmup));
    res.steps_run = step;

    const bool eval_point = step % opts.eval_every == 0 || step == opts.steps;
    if (!eval_point) continue;
    EvalPoint pt{step, double(r.loss), 0.0};
    if (dev) {
      pt.dev_score = dev(model);
      if (pt.dev_score > res.best_dev_score) {
        res.best_dev_score = pt.dev_score;
        res.best_step = step;
        res.best_params = model.params();
      }
    }
    res.history.push_back(pt);
    if (sink) sink(model, pt);
    if (opts.stop_at_train_accuracy > 0) {
      const auto [a_mt, a_cor] = teacher_forced_accuracy(model, data);
      if (a_mt >= opts.stop_at_train_accuracy && a_cor >= opts.stop_at_train_accuracy) break;
    }
  }
  if (!dev) {
    res.best_params = model.params();
    res.best_step = res.steps_run;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Decoding

std::vector<Hypothesis> beam_search(const StepScorer& scorer, std::size_t items, std::size_t beam_size,
                                    std::size_t max_len, std::int32_t eos) {
  if (beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (max_len < 1) throw ConfigError("max_len must be >= 1");
  std::vector<std::vector<Hypothesis>> live(items, std::vector<Hypothesis>(1));
  std::vector<std::vector<Hypothesis>> finished(items);

  for (std::size_t t = 0; t < max_len; ++t) {
    std::vector<std::pair<std::size_t, std::vector<std::int32_t>>> requests;
    for (std::size_t i = 0; i < items; ++i)
      for (const auto& h : live[i]) requests.emplace_back(i, h.tokens);
    if (requests.empty()) break;
    const Mat<double> logp = scorer(requests);

    Eigen::Index row = 0;
    for (std::size_t i = 0; i < items; ++i) {
      if (live[i].empty()) continue;
      struct Cand {
        double score;
        std::size_t hyp;
        std::int32_t tok;
      };
      std::vector<Cand> cands;
      cands.reserve(live[i].size() * static_cast<std::size_t>(logp.cols()));
      for (std::size_t h = 0; h < live[i].size(); ++h, ++row)
        for (Eigen::Index w = 0; w < logp.cols(); ++w)
          cands.push_back({live[i][h].logprob + logp(row, w), h, static_cast<std::int32_t>(w)});
      const std::size_t keep = std::min(beam_size, cands.size());
      std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                        [](const Cand& a, const Cand& b) {
                          if (a.score != b.score) return a.score > b.score;
                          if (a.hyp != b.hyp) return a.hyp < b.hyp;
                          return a.tok < b.tok;
                        });
      std::vector<Hypothesis> next;
      for (std::size_t k = 0; k < keep; ++k) {
        const auto& cd = cands[k];
        if (!std::isfinite(cd.score)) continue;
        Hypothesis h{live[i][cd.hyp].tokens, cd.score, false};
        h.tokens.push_back(cd.tok);
        if (cd.tok == eos) {
          h.finished = true;
          finished[i].push_back(std::move(h));
        } else {
          next.push_back(std::move(h));
        }
      }
      live[i] = std::move(next);
    }
  }

  std::vector<Hypothesis> out(items);
  for (std::size_t i = 0; i < items; ++i) {
    const auto& pool = finished[i].empty() ? live[i] : finished[i];
    if (pool.empty()) continue;
    const Hypothesis* best = &pool.front();
    for (const auto& h : pool)
      if (h.score() > best->score()) best = &h;
    out[i] = *best;
  }
  return out;
}

template <class T>
StepScorer model_scorer(const Model<T>& model, const std::vector<std::vector<std::int32_t>>& sources,
                        const std::vector<const std::vector<float>*>& features, DecoderKind decoder) {
  const auto& c = model.config();
  if (decoder == DecoderKind::cor && !c.correction) throw ConfigError("model has no correction decoder");
  // Encode everything once.
  auto states = std::make_shared<std::vector<Mat<T>>>();
  {
    Graph<T> g(false);
    Builder<T> b(model, g, nullptr, nullptr);
    Packed src;
    for (const auto& s : sources) {
      if (s.empty()) throw DataError("cannot decode an empty sentence");
      src.append(s);
    }
    const Mat<T>& H = g.value(b.encoder(src.ids, src.segs));
    for (const auto& seg : src.segs)
      states->push_back(H.middleRows(static_cast<Eigen::Index>(seg.offset), static_cast<Eigen::Index>(seg.length)));
  }
  return [&model, states, features, decoder](const std::vector<std::pair<std::size_t, std::vector<std::int32_t>>>& reqs) {
    const auto& c = model.config();
    Graph<T> g(false);
    Builder<T> b(model, g, nullptr, nullptr);
    Eigen::Index mem_rows = 0;
    for (const auto& r : reqs) mem_rows += (*states)[r.first].rows();
    Mat<T> mem(mem_rows, c.d_model);
    std::vector<Segment> msegs;
    Packed in;
    std::vector<const std::vector<float>*> feats;
    Eigen::Index at = 0;
    for (const auto& [item, prefix] : reqs) {
      const auto& H = (*states)[item];
      mem.middleRows(at, H.rows()) = H;
      msegs.push_back({static_cast<std::size_t>(at), static_cast<std::size_t>(H.rows())});
      at += H.rows();
      std::vector<std::int32_t> ids{corpus::kBos};
      ids.insert(ids.end(), prefix.begin(), prefix.end());
      in.append(ids);
      if (c.visual) feats.push_back(features.at(item));
    }
    const Var memv = g.input(std::move(mem));
    std::optional<Var> vis;
    std::vector<Segment> vsegs;
    if (c.visual) vis = b.visual_memory(pack_features<T>(c, feats, vsegs));
    const Mat<T>& logits = g.value(b.decoder(stack_name(decoder), in.ids, in.segs, memv, msegs, vis, vsegs));
    Mat<double> out(static_cast<Eigen::Index>(reqs.size()), logits.cols());
    for (std::size_t r = 0; r < reqs.size(); ++r) {
      const auto& seg = in.segs[r];
      const auto last = logits.row(static_cast<Eigen::Index>(seg.offset + seg.length - 1)).template cast<double>();
      const double mx = last.maxCoeff();
      const double lse = mx + std::log((last.array() - mx).exp().sum());
      out.row(static_cast<Eigen::Index>(r)) = last.array() - lse;
    }
    // <pad> and <s> are never generated.
    out.col(corpus::kPad).setConstant(-INFINITY);
    out.col(corpus::kBos).setConstant(-INFINITY);
    return out;
  };
}

template <class T>
std::vector<std::vector<std::int32_t>> decode(const Model<T>& model, const std::vector<const Example*>& items,
                                              DecoderKind decoder, std::size_t beam_size, std::size_t max_len,
                                              unsigned threads) {
  constexpr std::size_t kChunk = 16;
  std::vector<std::vector<std::int32_t>> out(items.size());
  const std::size_t chunks = (items.size() + kChunk - 1) / kChunk;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;

  auto worker = [&] {
    for (std::size_t ch; (ch = next.fetch_add(1)) < chunks;) {
      try {
        const std::size_t b = ch * kChunk, e = std::min(items.size(), b + kChunk);
        std::vector<std::vector<std::int32_t>> srcs;
        std::vector<const std::vector<float>*> feats;
        for (std::size_t i = b; i < e; ++i) {
          srcs.push_back(items[i]->src);
          feats.push_back(&items[i]->features);
        }
        const auto scorer = model_scorer(model, srcs, feats, decoder);
        auto hyps = beam_search(scorer, e - b, beam_size, max_len, corpus::kEos);
        for (std::size_t i = b; i < e; ++i) {
          auto& toks = hyps[i - b].tokens;
          if (!toks.empty() && toks.back() == corpus::kEos) toks.pop_back();
          out[i] = std::move(toks);
        }
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(chunks, 1))));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

template <class T>
AttentionMaps<T> attention_dump(const Model<T>& model, const Example& item, DecoderKind decoder) {
  const auto& c = model.config();
  if (decoder == DecoderKind::cor && !c.correction) throw ConfigError("model has no correction decoder");
  const auto H = encode(model, item.src);
  Graph<T> g(false);
  g.capture_attention = true;
  Builder<T> b(model, g, nullptr, nullptr);
  const Var mem = g.input(H);
  const Segment mseg{0, static_cast<std::size_t>(H.rows())};
  std::optional<Var> vis;
  std::vector<Segment> vsegs;
  if (c.visual) vis = b.visual_memory(pack_features<T>(c, {&item.features}, vsegs));
  TeacherForced tf;
  tf.append(decoder == DecoderKind::mt ? item.tgt : item.cor);
  b.decoder(stack_name(decoder), tf.in.ids, tf.in.segs, mem, std::span(&mseg, 1), vis, vsegs);

  // Captures arrive per layer as: self, text cross, [visual cross].
  const std::size_t per_layer = c.visual ? 3 : 2;
  AttentionMaps<T> maps;
  for (int l = 0; l < c.layers; ++l) {
    maps.text.push_back(g.captures[l * per_layer + 1].probs.at(0));
    if (c.visual) maps.visual.push_back(g.captures[l * per_layer + 2].probs.at(0));
  }
  return maps;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

std::uint32_t take_u32(const std::string& in, std::size_t& at) {
  if (at + 4 > in.size()) throw DataError("checkpoint truncated");
  std::uint32_t v;
  std::memcpy(&v, in.data() + at, 4);
  at += 4;
  return v;
}

}  // namespace

template <class T>
std::string encode_checkpoint(const Model<T>& model) {
  std::string out = "NTCK";
  put_u32(out, kCheckpointVersion);
  const std::string cfg = model.config().to_json().dump();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const auto& ts = model.params().tensors;
  put_u32(out, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.value.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.value.cols()));
    for (Eigen::Index i = 0; i < t.value.size(); ++i) {
      const float f = static_cast<float>(t.value.data()[i]);
      char b[4];
      std::memcpy(b, &f, 4);
      out.append(b, 4);
    }
  }
  return out;
}

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  const auto bytes = encode_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

Model<float> decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 4, "NTCK") != 0) throw DataError("checkpoint: bad magic");
  std::size_t at = 4;
  const auto version = take_u32(bytes, at);
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto cfg_len = take_u32(bytes, at);
  if (at + cfg_len > bytes.size()) throw DataError("checkpoint truncated");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(json::parse(bytes.substr(at, cfg_len)));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: bad config block: ") + e.what());
  }
  at += cfg_len;
  Params<float> params = init_params<float>(cfg, 0);
  const auto count = take_u32(bytes, at);
  if (count != params.tensors.size()) throw DataError("checkpoint: tensor count does not match its config");
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto nlen = take_u32(bytes, at);
    if (at + nlen > bytes.size()) throw DataError("checkpoint truncated");
    const std::string name = bytes.substr(at, nlen);
    at += nlen;
    const auto rows = take_u32(bytes, at), cols = take_u32(bytes, at);
    if (!params.has(name)) throw DataError("checkpoint: unexpected tensor '" + name + "'");
    auto& t = params[name];
    if (t.value.rows() != rows || t.value.cols() != cols) throw DataError("checkpoint: shape mismatch for " + name);
    const std::size_t n = std::size_t(rows) * cols * 4;
    if (at + n > bytes.size()) throw DataError("checkpoint truncated");
    std::memcpy(t.value.data(), bytes.data() + at, n);
    at += n;
  }
  if (at != bytes.size()) throw DataError("checkpoint: trailing bytes");
  return Model<float>(cfg, std::move(params));
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <class T, class U>
Model<U> convert(const Model<T>& model) {
  Params<U> p;
  for (const auto& t : model.params().tensors) p.add(t.name, t.group, t.value.template cast<U>());
  auto cfg = model.config();
  cfg.precision = std::is_same_v<U, double> ? Precision::f64 : Precision::f32;
  return Model<U>(cfg, std::move(p));
}

// ---------------------------------------------------------------------------

#define ROBOMT_INSTANTIATE(T)                                                                                         \
  template class Params<T>;                                                                                           \
  template class Model<T>;                                                                                            \
  template class Adam<T>;                                                                                             \
  template EncoderStates<T> encode(const Model<T>&, const std::vector<std::int32_t>&);                              \
  template T forward_nll(const Model<T>&, const EncoderStates<T>&, const std::vector<float>*,                        \
                         const std::vector<std::int32_t>&, DecoderKind);                                              \
  template BatchResult<T> batch_loss(const Model<T>&, const std::vector<const Example*>&, bool, Rng*, bool);         \
  template Params<T> backward(const Model<T>&, const std::vector<const Example*>&);                                  \
  template std::pair<double, double> teacher_forced_accuracy(const Model<T>&, const std::vector<Example>&);          \
  template TrainResult<T> train(Model<T>&, const std::vector<Example>&, const TrainOptions&, const DevScorer<T>&,    \
                                const CheckpointSink<T>&);                                                            \
  template StepScorer model_scorer(const Model<T>&, const std::vector<std::vector<std::int32_t>>&,                   \
                                   const std::vector<const std::vector<float>*>&, DecoderKind);                       \
  template std::vector<std::vector<std::int32_t>> decode(const Model<T>&, const std::vector<const Example*>&,        \
                                                         DecoderKind, std::size_t, std::size_t, unsigned);            \
  template AttentionMaps<T> attention_dump(const Model<T>&, const Example&, DecoderKind);                            \
  template std::string encode_checkpoint(const Model<T>&);                                                            \
  template void save_checkpoint(const std::string&, const Model<T>&);

ROBOMT_INSTANTIATE(float)
ROBOMT_INSTANTIATE(double)
#undef ROBOMT_INSTANTIATE

template Model<double> convert<float, double>(const Model<float>&);
template Model<float> convert<double, float>(const Model<double>&);
template Model<float> convert<float, float>(const Model<float>&);
template Model<double> convert<double, double>(const Model<double>&);

}  // namespace robomt::seqmodel
