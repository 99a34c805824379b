#pragma once

// Displacement metrics over multi-modal joint predictions.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/scene.hpp"

namespace cmtraj {

double ade(const Trajectory& pred, const Trajectory& gt);
double fde(const Trajectory& pred, const Trajectory& gt);
// Flattened (x0, y0, x1, y1, ...) variants.
double ade_flat(std::span<const double> pred, std::span<const double> gt);
double fde_flat(std::span<const double> pred, std::span<const double> gt);

/// Index of the mode with minimum ADE; ties go to the lowest index.
int best_of_k(const std::vector<Trajectory>& modes, const Trajectory& gt);

double min_ade(const std::vector<Trajectory>& modes, const Trajectory& gt);
double min_fde(const std::vector<Trajectory>& modes, const Trajectory& gt);

enum class BrierPenalty {
  kSquaredComplement,  // (1 - p)^2
  kOneMinusSquare,     // 1 - p^2
};

std::string to_string(BrierPenalty penalty);
BrierPenalty brier_penalty_from_string(const std::string& name);
double brier_penalty(double p, BrierPenalty form);

/// True when any two trajectories come within `threshold` metres at a shared step.
bool scene_collides(const std::vector<Trajectory>& agents, double threshold);

struct ScenePrediction {
  std::int64_t scene_id = 0;
  std::vector<std::vector<Trajectory>> modes;  // [mode][agent]
  std::vector<std::vector<double>> probs;      // [agent][mode], simplex per agent

  int num_modes() const { return static_cast<int>(modes.size()); }
  int num_agents() const { return modes.empty() ? 0 : static_cast<int>(modes.front().size()); }
  // Joint score per mode: mean of the per-agent probabilities.
  std::vector<double> joint_probs() const;
};

struct PredictionSet {
  std::vector<ScenePrediction> scenes;
  int nfe = 0;
  std::int64_t evaluations = 0;  // denoiser evaluations summed over scenes and modes
  double wall_seconds = 0.0;
};

struct MetricConfig {
  BrierPenalty penalty = BrierPenalty::kSquaredComplement;
  double miss_threshold = 2.0;       // a mode hits when FDE <= threshold
  double collision_threshold = 1.0;
};

struct MetricReport {
  int k = 0;
  double ade_1 = 0.0, ade_k = 0.0, fde_1 = 0.0, fde_k = 0.0;
  double brier_fde_k = 0.0, miss_rate_k = 0.0, collision_rate = 0.0;
  std::int64_t scene_count = 0, agent_count = 0;
  std::int64_t collision_scenes = 0;      // scenes in the CR denominator
  std::int64_t collision_excluded = 0;    // scenes with fewer than two agents
  std::string brier_form;
  int nfe = 0;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

/// Ground truth is matched by scene_id. Throws ConfigError on missing scenes or shape mismatch.
MetricReport evaluate_predictions(const PredictionSet& preds, const std::vector<Scene>& scenes,
                                  const MetricConfig& config);

// JSON-lines: one record per (scene, agent, mode).
void write_predictions_jsonl(std::ostream& out, const PredictionSet& preds);
PredictionSet read_predictions_jsonl(std::istream& in);

}  // namespace cmtraj
