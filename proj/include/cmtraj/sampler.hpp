#pragma once

// Single- and multi-step generation from Gaussian noise.

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/codec.hpp"
#include "cmtraj/dataset.hpp"
#include "cmtraj/denoiser.hpp"
#include "cmtraj/metrics.hpp"
#include "cmtraj/schedule.hpp"

namespace cmtraj {

struct SamplerConfig {
  int nfe = 1;
  int modes = 6;
  std::uint64_t seed = 0;
  bool resample_noise = false;  // draw a fresh epsilon at every re-injection
  int grid_steps = 40;          // tau indices refer to this sigma grid
  double sigma_min = 0.002;
  double sigma_max = 1.0;
  double rho = 7.0;
  int batch_size = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static SamplerConfig from_json(const nlohmann::json& j);
};

/// tau_0 < tau_1 < ... < tau_nfe into the grid (index 0 is sigma = 0, index 1 is
/// sigma_min). nfe = 1 gives {0, grid_steps}; otherwise tau_1 = 1, tau_nfe =
/// grid_steps and tau_n = round(n / nfe * grid_steps) in between.
std::vector<int> tau_indices(int nfe, int grid_steps);
std::vector<double> tau_sigmas(const SamplerConfig& config);

/// Runs the denoising loop on latent rows (mode-major, one sigma per scene per step).
/// `eps` is reused at every step unless `fresh_eps` supplies one matrix per step.
Matrix run_sampler(const Denoiser& model, const EncodedCondition& cond, const Matrix& x_init, const Matrix& eps,
                   const std::vector<double>& sigmas, const std::vector<Matrix>& fresh_eps = {});

/// Per-agent probabilities for decoded modes: score of the nearest anchor by ADE,
/// renormalised over modes. Uniform when there are no anchors.
std::vector<double> mode_probabilities(const std::vector<Trajectory>& modes, const std::vector<Trajectory>& anchors,
                                       const std::vector<double>& scores);

PredictionSet sample_predictions(const Denoiser& model, const LatentCodec& codec,
                                 const std::vector<PreparedScene>& scenes, const SamplerConfig& config);

}  // namespace cmtraj
