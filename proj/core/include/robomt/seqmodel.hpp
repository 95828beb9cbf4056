#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robomt/graph.hpp"

namespace robomt::seqmodel {

using graph::Mat;

enum class Precision { f32, f64 };
enum class DecoderKind { mt, cor };

/// Parameter partition used for gradient bookkeeping.
enum class Group { encoder, visual, mt_decoder, cor_decoder };

std::string to_string(Group g);

/// Architecture, objective weight and optimisation settings of one model.
struct ModelConfig {
  int layers = 2;
  int d_model = 64;
  int d_ff = 128;
  int heads = 4;
  double dropout = 0.1;
  bool pre_norm = true;
  bool visual = false;
  bool correction = false;  // second decoder present
  int regions = 4;
  int d_feat = 16;
  double lambda = 0.0;
  int warmup = 400;
  int batch_size = 32;
  double lr_scale = 1.0;
  Precision precision = Precision::f32;

  std::size_t src_vocab = 0;  // encoder input vocabulary (noisy source)
  std::size_t tgt_vocab = 0;  // translation decoder vocabulary
  std::size_t cor_vocab = 0;  // correction decoder vocabulary (clean source)

  /// Throws ConfigError when an invariant is violated.
  void validate() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  /// Full-size architecture (6 layers, 512/1024, 4 heads, dropout 0.3,
  /// warmup 8000, batch 64).
  static ModelConfig paper();
};

/// Correction-loss weight tuned per noise level n in {1, 2, 4, 6, 10};
/// nearest lower level otherwise.
double default_lambda_for_noise(std::size_t n);

template <class T>
struct Tensor {
  std::string name;
  Group group;
  Mat<T> value;
};

/// All trainable tensors, in a fixed order.
template <class T>
class Params {
 public:
  std::vector<Tensor<T>> tensors;

  std::size_t index_of(const std::string& name) const;
  Tensor<T>& operator[](const std::string& name) { return tensors[index_of(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return tensors[index_of(name)]; }
  bool has(const std::string& name) const { return lookup_.count(name) != 0; }
  std::size_t count() const;  // scalar parameter count

  void add(std::string name, Group group, Mat<T> value);

  /// Same tensors, all zero.
  Params zeros_like() const;

 private:
  std::map<std::string, std::size_t> lookup_;
};

template <class T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t init_seed);
  Model(const ModelConfig& config, Params<T> params);

  const ModelConfig& config() const { return config_; }
  ModelConfig& mutable_config() { return config_; }
  Params<T>& params() { return params_; }
  const Params<T>& params() const { return params_; }

 private:
  ModelConfig config_;
  Params<T> params_;
};

/// One encoded training/evaluation item.
struct Example {
  std::vector<std::int32_t> src;     // noisy source ids (encoder vocab)
  std::vector<std::int32_t> tgt;     // target ids (no <s>/</s>)
  std::vector<std::int32_t> cor;     // clean source ids (correction vocab)
  std::vector<float> features;       // regions * d_feat when visual
};

/// Per-token hidden states of one sentence (rows = tokens).
template <class T>
using EncoderStates = Mat<T>;

/// Eval-mode encoder pass.
template <class T>
EncoderStates<T> encode(const Model<T>& model, const std::vector<std::int32_t>& src);

/// Eval-mode summed NLL of `target` + </s> given encoder states, teacher
/// forced with a <s> prefix. `features` is required iff the model is visual.
template <class T>
T forward_nll(const Model<T>& model, const EncoderStates<T>& states, const std::vector<float>* features,
              const std::vector<std::int32_t>& target, DecoderKind decoder);

inline double joint_loss(double l_mt, double l_cor, double lambda) { return l_mt + lambda * l_cor; }

template <class T>
struct BatchResult {
  T loss = 0;       // L_mt + lambda * L_cor
  T mt_loss = 0;    // token-mean NLL
  T cor_loss = 0;   // token-mean NLL (0 without correction decoder)
  std::size_t mt_tokens = 0, cor_tokens = 0;
  std::size_t mt_correct = 0, cor_correct = 0;
  Params<T> grads;  // empty unless requested
};

/// Joint loss of a batch and, with `want_grads`, its gradient. A non-null
/// `dropout_rng` enables training-mode dropout. The correction decoder is
/// evaluated only when the model has one and lambda > 0 (or `force_cor`).
template <class T>
BatchResult<T> batch_loss(const Model<T>& model, const std::vector<const Example*>& batch, bool want_grads,
                          Rng* dropout_rng, bool force_cor = false);

/// Convenience: gradients of the joint loss for a batch (eval mode, no dropout).
template <class T>
Params<T> backward(const Model<T>& model, const std::vector<const Example*>& batch);

double noam_lr(long step, int d_model, int warmup);

/// First/second moment adaptive optimiser.
template <class T>
class Adam {
 public:
  explicit Adam(const Params<T>& like, double beta1 = 0.9, double beta2 = 0.98, double eps = 1e-9);
  void step(Params<T>& params, const Params<T>& grads, double lr);
  long steps() const { return t_; }

 private:
  Params<T> m_, v_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
};

struct TrainOptions {
  long steps = 2000;
  long eval_every = 200;
  std::uint64_t seed = 1;
  /// Stop once teacher-forced accuracy on the training batch stream reaches
  /// this value on both decoders (<= 0 disables).
  double stop_at_train_accuracy = 0.0;
};

struct EvalPoint {
  long step = 0;
  double train_loss = 0;
  double dev_score = 0;
};

template <class T>
struct TrainResult {
  Params<T> best_params;
  long best_step = 0;
  double best_dev_score = -1;
  long steps_run = 0;
  double initial_loss = 0;
  double final_loss = 0;
  std::vector<EvalPoint> history;
};

/// Called at every evaluation point with the current model; returns the
/// development metric (higher is better).
template <class T>
using DevScorer = std::function<double(const Model<T>&)>;
/// Called after every evaluation point (e.g. to write a checkpoint).
template <class T>
using CheckpointSink = std::function<void(const Model<T>&, const EvalPoint&)>;

/// Mini-batch training with Adam and the noam schedule. Deterministic for a
/// given seed. Throws DivergenceError on a non-finite loss.
template <class T>
TrainResult<T> train(Model<T>& model, const std::vector<Example>& data, const TrainOptions& opts,
                     const DevScorer<T>& dev = {}, const CheckpointSink<T>& sink = {});

/// Teacher-forced token accuracy over a data set, per decoder.
template <class T>
std::pair<double, double> teacher_forced_accuracy(const Model<T>& model, const std::vector<Example>& data);

// ---------------------------------------------------------------------------
// Decoding

/// Log-probabilities of the next token for a set of prefixes. Each request is
/// (item index, prefix without <s>); the result has one row per request.
using StepScorer = std::function<Mat<double>(const std::vector<std::pair<std::size_t, std::vector<std::int32_t>>>&)>;

struct Hypothesis {
  std::vector<std::int32_t> tokens;  // includes the final </s> when finished
  double logprob = 0;
  bool finished = false;
  double score() const { return tokens.empty() ? logprob : logprob / double(tokens.size()); }
};

/// Length-normalised beam search for `items` inputs in lockstep. Returns the
/// best finished hypothesis per item (best unfinished at max_len if none).
std::vector<Hypothesis> beam_search(const StepScorer& scorer, std::size_t items, std::size_t beam_size,
                                    std::size_t max_len, std::int32_t eos);

/// Scorer backed by a model's decoder for a list of source sentences.
template <class T>
StepScorer model_scorer(const Model<T>& model, const std::vector<std::vector<std::int32_t>>& sources,
                        const std::vector<const std::vector<float>*>& features, DecoderKind decoder);

/// Decodes a list of sentences; output ids exclude </s>. Work is split in
/// fixed-size chunks so results do not depend on `threads`.
template <class T>
std::vector<std::vector<std::int32_t>> decode(const Model<T>& model, const std::vector<const Example*>& items,
                                              DecoderKind decoder, std::size_t beam_size, std::size_t max_len,
                                              unsigned threads = 1);

template <class T>
struct AttentionMaps {
  // [layer][head] -> (|target|+1, |x|) and (|target|+1, regions)
  std::vector<std::vector<Mat<T>>> text;
  std::vector<std::vector<Mat<T>>> visual;
};

template <class T>
AttentionMaps<T> attention_dump(const Model<T>& model, const Example& item, DecoderKind decoder);

// ---------------------------------------------------------------------------
// Checkpoints: "NTCK", u32 version, u32 config length + canonical JSON,
// u32 tensor count, then per tensor: u32 name length + name, u32 rows,
// u32 cols, rows*cols little-endian f32 values.

template <class T>
void save_checkpoint(const std::string& path, const Model<T>& model);
template <class T>
std::string encode_checkpoint(const Model<T>& model);
Model<float> load_checkpoint(const std::string& path);
Model<float> decode_checkpoint(const std::string& bytes);

template <class T, class U>
Model<U> convert(const Model<T>& model);

}  // namespace robomt::seqmodel
