#pragma once

// Scenes preprocessed for the denoiser: contexts, local-frame futures, latents
// and encoded prior anchors.

#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/codec.hpp"
#include "cmtraj/denoiser.hpp"
#include "cmtraj/scene.hpp"

namespace cmtraj {

struct DataConfig {
  SceneConfig scene;
  PriorConfig prior;
  ContextConfig context;

  nlohmann::json to_json() const;
  static DataConfig from_json(const nlohmann::json& j);
};

struct PreparedScene {
  Scene scene;
  PriorBundle prior;
  std::vector<AgentContext> contexts;
  Matrix future_local;  // agents x 2 T_f, (x0, y0, x1, y1, ...) in each agent frame
  Matrix gt_latent;     // agents x latent_dim
  Matrix prior_latents; // concatenated anchors, agent-major
  std::vector<double> prior_log_scores;
  std::vector<KeySpan> prior_rows;  // per agent

  int num_agents() const { return scene.num_agents(); }
};

/// Flattened agent-frame future of every agent, one row each.
Matrix local_futures(const std::vector<Scene>& scenes, const ContextConfig& context);
Eigen::RowVectorXd flatten_local(const Trajectory& traj, const AgentFrame& frame);
Trajectory unflatten_global(std::span<const double> flat, const AgentFrame& frame);

std::vector<PreparedScene> prepare_scenes(const std::vector<Scene>& scenes, const LatentCodec& codec,
                                          const DataConfig& config);

DenoiserConfig denoiser_dims(const DataConfig& config, int latent_dim);

ConditionBatch make_condition_batch(std::span<const PreparedScene* const> scenes);

/// Stacks gt_latent of the batch (agents in batch order).
Matrix stack_latents(std::span<const PreparedScene* const> scenes);
Matrix stack_futures(std::span<const PreparedScene* const> scenes);

/// Scene ids for a split; train/val/test ranges never overlap.
enum class Split { kTrain, kVal, kTest };
std::int64_t split_offset(Split split);
std::vector<Scene> generate_split(std::uint64_t base_seed, Split split, int count, const SceneConfig& config);

}  // namespace cmtraj
