#pragma once

// Consistency training with K-shot best-of-K selection and ground-truth fusion.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/codec.hpp"
#include "cmtraj/dataset.hpp"
#include "cmtraj/denoiser.hpp"
#include "cmtraj/optim.hpp"
#include "cmtraj/random.hpp"
#include "cmtraj/schedule.hpp"

namespace cmtraj {

enum class Fusion { kNone, kFull, kRandom2, kProgressive, kMidEnd };

std::string to_string(Fusion fusion);
Fusion fusion_from_string(const std::string& name);

/// Binary mask over waypoints (one entry per waypoint, shared by x and y).
using FusionMask = std::vector<double>;

FusionMask fusion_mask(Fusion fusion, int future_steps, int epoch, Rng& rng);
FusionMask progressive_mask(int epoch, int future_steps);
int progressive_count(int epoch);
FusionMask mid_end_mask(int future_steps);

struct NoiseSchedule {
  double sigma_min = 0.002;
  double sigma_max = 1.0;
  double rho = 7.0;
  double mu = -1.1;
  double spread = 2.0;
  int base_N = 10;
};

struct TrainConfig {
  int epochs = 60;
  int modes = 6;
  double ema = 0.999;
  Fusion fusion = Fusion::kMidEnd;
  TeacherScheduler teacher;  // q, k, b, mode; max_epochs follows `epochs`
  NoiseSchedule noise;
  int batch_size = 16;
  AdamWConfig optimizer;
  double clip_norm = 1.0;
  bool latent_selection = false;  // best-of-K by latent distance instead of decoded ADE
  bool share_noise = true;        // teacher reuses the student's epsilon
  std::uint64_t seed = 0;
  int val_every = 0;              // epochs between validation passes (0 = never)
  int val_scenes = 100;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// x_k = x0 + sigma * eps_k, stacked mode-major (row m * A + a).
Matrix noisy_modes(const Matrix& x0, std::span<const double> agent_sigma, const Matrix& eps, int modes);

/// Decode, overwrite masked waypoints with ground truth, re-encode. Rows are agents.
Matrix fuse_teacher(const Matrix& teacher_latent, const Matrix& future_local, const FusionMask& mask,
                    const LatentCodec& codec);

/// w * ||student - teacher||_2 per row, averaged with row weights. Teacher is a constant.
Tensor consistency_loss(const Tensor& student, const Matrix& teacher, std::span<const double> row_weight);
double consistency_weight(double sigma_t, double sigma_r);

struct EpochLog {
  int epoch = 0;
  int N = 0;
  double mean_loss = 0.0;
  double val_ade = -1.0;
  double val_fde = -1.0;
  double seconds = 0.0;
  double teacher_fraction = 0.0;  // share of scenes whose teacher index was >= 1
};

struct TrainResult {
  Denoiser student;
  Denoiser teacher;
  std::vector<EpochLog> log;
  std::int64_t steps = 0;
};

using EpochCallback = std::function<void(const EpochLog&, const Denoiser& student, const Denoiser& teacher)>;

class Trainer {
 public:
  Trainer(TrainConfig config, const DenoiserConfig& model, LatentCodec codec);

  /// One optimisation step over a batch of scenes. Returns the loss value.
  double step(std::span<const PreparedScene* const> batch, int epoch, const TimestepSampler& sampler,
              const SigmaSchedule& sigmas, const FusionMask& mask);

  /// Loss of a batch without updating anything; the draws come from `seed`.
  double probe_loss(std::span<const PreparedScene* const> batch, int epoch, const TimestepSampler& sampler,
                    const SigmaSchedule& sigmas, const FusionMask& mask, std::uint64_t seed);

  TrainResult fit(const std::vector<PreparedScene>& train, const std::vector<PreparedScene>& val,
                  const EpochCallback& on_epoch = {});

  Denoiser& student() { return student_; }
  Denoiser& teacher() { return teacher_; }
  Rng& rng() { return rng_; }
  const TrainConfig& config() const { return config_; }
  double last_teacher_fraction() const { return last_teacher_fraction_; }

 private:
  Tensor batch_loss(std::span<const PreparedScene* const> batch, int epoch, const TimestepSampler& sampler,
                    const SigmaSchedule& sigmas, const FusionMask& mask);

  // Scene-joint best-of-K: index per scene of the mode with lowest mean agent error.
  std::vector<int> select_modes(const Matrix& outputs, std::span<const PreparedScene* const> batch,
                                const Matrix& futures, const Matrix& latents, int modes) const;

  TrainConfig config_;
  LatentCodec codec_;
  Denoiser student_;
  Denoiser teacher_;
  AdamW optimizer_;
  Rng rng_;
  double last_teacher_fraction_ = 0.0;
};

/// FNV-1a over the raw parameter bytes (student then teacher).
std::uint64_t checkpoint_hash(const Denoiser& student, const Denoiser& teacher);
std::string hex64(std::uint64_t value);

nlohmann::json checkpoint_json(const Denoiser& student, const Denoiser& teacher, const LatentCodec& codec,
                               const nlohmann::json& meta);

struct Checkpoint {
  Denoiser student;
  Denoiser teacher;
  LatentCodec codec;
  nlohmann::json meta;
};

Checkpoint checkpoint_from_json(const nlohmann::json& j);

inline constexpr int kCheckpointFormatVersion = 1;

}  // namespace cmtraj
