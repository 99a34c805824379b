#pragma once

// Run configuration, end-to-end pipeline, ablation harness and SVG plots.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/codec.hpp"
#include "cmtraj/dataset.hpp"
#include "cmtraj/metrics.hpp"
#include "cmtraj/sampler.hpp"
#include "cmtraj/trainer.hpp"

namespace cmtraj {

struct ModelShape {
  int model_dim = 64;
  int heads = 2;
  int layers = 3;
  int fourier_dim = 16;
  int mlp_ratio = 2;
};

struct RunConfig {
  std::string tag = "default";
  std::uint64_t seed = 0;       // training, codec and sampling seed
  std::uint64_t data_seed = 7;  // scene generation
  int train_scenes = 2000;
  int val_scenes = 200;
  int test_scenes = 500;
  int plot_scenes = 4;
  int checkpoint_every = 0;  // epochs between intermediate checkpoints (0 = final only)
  std::string codec_path;    // load this codec instead of fitting one
  DataConfig data;
  CodecFitConfig codec;
  ModelShape model;
  TrainConfig train;
  SamplerConfig sampler;
  MetricConfig metrics;
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};

  // Copies `seed` into the train/codec/sampler seeds and syncs shared settings.
  RunConfig resolved() const;
  void validate() const;
  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  // FNV-1a of the canonical JSON of the resolved config.
  std::string hash() const;
};

nlohmann::json codec_fit_to_json(const CodecFitConfig& c);
CodecFitConfig codec_fit_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::string& path);
nlohmann::json read_json_file(const std::string& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);
void write_text_file(const std::filesystem::path& path, const std::string& text);

/// Default output root: $CMTRAJ_OUT_ROOT or ./runs.
std::filesystem::path default_out_root();

struct Datasets {
  std::vector<Scene> train, val, test;
};

Datasets generate_datasets(const RunConfig& config);
LatentCodec fit_run_codec(const RunConfig& config, const std::vector<Scene>& train);
DenoiserConfig model_config(const RunConfig& config, const LatentCodec& codec);

struct TrainedRun {
  TrainResult result;
  LatentCodec codec;
  RunConfig config;
};

using LogSink = std::function<void(const std::string& line)>;

TrainedRun train_run(const RunConfig& config, const LatentCodec& codec, const std::vector<PreparedScene>& train,
                     const std::vector<PreparedScene>& val, const LogSink& log = {});

/// Stage name is carried so callers can report where a pipeline failed.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what) : std::runtime_error(what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct PipelineResult {
  MetricReport report;
  std::string config_hash;
  std::string checkpoint_hash;
  std::filesystem::path dir;
};

/// data -> codec -> train -> sample -> evaluate -> plots, all inside `dir`.
PipelineResult run_pipeline(const RunConfig& config, const std::filesystem::path& dir, const LogSink& log = {});

struct Variant {
  std::string axis;
  std::string name;
  RunConfig config;
};

/// Variants of `axis` derived from `base`. Throws UsageError for an unknown axis.
std::vector<Variant> ablation_variants(const RunConfig& base, const std::string& axis);

struct AblationRow {
  std::string axis;
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  MetricReport report;
  double sample_seconds = 0.0;
  std::string checkpoint_hash;   // trained model the predictions came from
  std::int64_t evaluations = 0;  // denoiser evaluations summed over scenes and modes
  std::int64_t calls = 0;        // batched forward passes
};

std::vector<std::string> ablation_axes();

/// Trains and evaluates each variant once per seed in its ablation_seeds.
/// Variants that differ only in sampling or metric settings share one trained
/// model, so the nfe axis re-samples a single checkpoint. Each run writes its
/// config, training log and metrics to its own subdirectory of `dir`.
std::vector<AblationRow> run_variants(const std::vector<Variant>& variants, const std::filesystem::path& dir,
                                      const LogSink& log = {});

std::vector<AblationRow> run_ablation(const RunConfig& base, const std::string& axis, const std::filesystem::path& dir,
                                      const LogSink& log = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);
/// Mean over seeds, one row per variant in first-seen order.
std::string ablation_summary_csv(const std::vector<AblationRow>& rows);

/// One qualitative scene: map, histories, ground truth and every predicted mode.
std::string scene_svg(const Scene& scene, const ScenePrediction& pred, const std::string& caption);

}  // namespace cmtraj
