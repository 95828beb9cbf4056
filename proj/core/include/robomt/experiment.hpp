#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "robomt/evalsuite.hpp"
#include "robomt/robustness.hpp"
#include "robomt/seqmodel.hpp"
#include "robomt/textnoise.hpp"

namespace robomt::experiment {

enum class ModelVariant { nmt, mmt, nmt_cor, mmt_cor };

std::string to_string(ModelVariant v);
ModelVariant variant_from_string(const std::string& s);
inline bool is_visual(ModelVariant v) { return v == ModelVariant::mmt || v == ModelVariant::mmt_cor; }
inline bool has_correction(ModelVariant v) { return v == ModelVariant::nmt_cor || v == ModelVariant::mmt_cor; }

enum class Regime { clean, noisy, mixed, fully_noisy };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct TrainNoise {
  Regime regime = Regime::clean;
  std::size_t n = 0;
  double ratio = 0.5;  // mixed only
};

struct TestSpec {
  std::string name;  // clean | noisy | unk
  std::size_t level = 0;
};

struct DataSpec {
  bool synthetic = true;
  std::size_t train_size = 2000, dev_size = 200, test_size = 200;
  std::uint64_t seed = 7;
  // Real-data paths (used when synthetic is false).
  std::string train_src, train_tgt, train_features;
  std::string dev_src, dev_tgt, dev_features;
  std::string test_src, test_tgt, test_features;
};

struct TrainSpec {
  long steps = 800;
  long eval_every = 200;
  std::size_t dev_beam = 1;
};

/// Encoder vocabulary threshold of the desk preset.
inline constexpr std::size_t kDeskSrcMinFreq = 5;

/// Declarative description of one experiment. The canonical JSON form
/// (minus output location and thread count) determines every output byte.
struct ExperimentConfig {
  ModelVariant variant = ModelVariant::nmt;
  TrainNoise train_noise;
  std::vector<TestSpec> tests{{"clean", 0}};
  bool incongruent = false;
  std::optional<double> lambda;  // default: tuned value for the train noise level
  std::vector<std::uint64_t> seeds{1};
  std::string preset = "desk";
  DataSpec data;
  std::string lexicon;  // cmudict-0.7b path
  std::uint64_t noise_seed = 11;
  /// Encoder vocabulary frequency threshold; unset means the preset's value.
  std::optional<std::size_t> src_min_freq;
  nlohmann::json model_overrides = nlohmann::json::object();
  TrainSpec train;
  std::size_t beam_size = 4;
  std::string out_dir = "runs";
  unsigned threads = 1;

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;
  double effective_lambda() const;
  std::size_t effective_src_min_freq() const;
  seqmodel::ModelConfig model_config() const;  // vocabulary sizes left at 0

  nlohmann::json to_json() const;  // full form
  static ExperimentConfig from_json(const nlohmann::json& j);
  std::string digest() const;  // over the hermetic part of the config
  std::string run_name() const;
};

struct SeedResult {
  std::uint64_t seed = 0;
  long best_step = 0;
  std::vector<evalsuite::ScoreReport> reports;

  const evalsuite::ScoreReport* find(const std::string& variant, const std::string& metric) const;
};

struct ReportBundle {
  std::string config_digest;
  std::string run_dir;
  ExperimentConfig config;
  std::vector<SeedResult> per_seed;
  std::vector<evalsuite::ScoreReport> mean;  // corpus_score = mean over seeds

  const evalsuite::ScoreReport* mean_of(const std::string& variant, const std::string& metric) const;
  nlohmann::json to_json() const;
  static ReportBundle from_json(const nlohmann::json& j);
};

/// inject -> train -> decode -> score for every seed. Artifacts are written
/// under out_dir/run_name(). Failures carry the stage name and seed.
ReportBundle run_experiment(const ExperimentConfig& config);

struct SweepRow {
  double lambda = 0;
  double translation = 0;  // mean chrF on the first noisy test variant
  double correction = 0;   // mean correction F0.5 on the same variant
};

/// One experiment per lambda, sorted by lambda. Requires a *-cor variant and
/// distinct lambda values.
std::vector<SweepRow> sweep_lambda(const ExperimentConfig& config, std::vector<double> lambdas);
std::string format_sweep(const std::vector<SweepRow>& rows);

struct Table {
  std::string title;
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::vector<std::optional<double>>>> rows;
};

struct ReportTables {
  Table scores;      // rows = model variants, columns = clean and each noise level
  Table delta;       // congruent - incongruent, visual models only
  Table clean_drop;  // clean-trained NMT clean score minus each run's clean score
  std::vector<std::string> warnings;

  std::string to_text() const;
  nlohmann::json to_json() const;
};

ReportTables report_tables(const std::vector<std::string>& run_dirs);
ReportTables report_tables(const std::vector<ReportBundle>& bundles);

// ---------------------------------------------------------------------------
// Shared resources

/// Loaded once per path and shared read-only.
const phonlex::PronLexicon& lexicon(const std::string& path);
const phonlex::HomophoneIndex& homophone_index(const std::string& path);
/// Edit-noise vocabulary: alphabetic lexicon words plus `extra`.
std::set<std::string> edit_vocabulary(const std::string& lexicon_path, const Corpus& extra);

/// Default location of the shipped pronouncing dictionary (build-time path).
std::string default_lexicon_path();

}  // namespace robomt::experiment
