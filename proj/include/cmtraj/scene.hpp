#pragma once

// Synthetic four-arm intersection scenarios, the prior oracle producing
// anchor trajectories with scores, and agent-centric context features.

#include <array>
#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/tensor.hpp"

namespace cmtraj {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  bool operator==(const Vec2&) const = default;
  double norm() const { return std::hypot(x, y); }
};

using Trajectory = std::vector<Vec2>;

enum class Intent { kStraight, kLeft, kRight, kStop };

std::string to_string(Intent intent);
Intent intent_from_string(const std::string& name);

struct SceneConfig {
  int min_agents = 2;
  int max_agents = 4;
  int history_steps = 20;
  int future_steps = 30;
  double dt = 0.1;
  double max_speed = 15.0;
  std::vector<Intent> intents{Intent::kStraight, Intent::kLeft, Intent::kRight, Intent::kStop};
  double lane_width = 3.5;
  double arm_jitter_deg = 15.0;
  double stop_distance = 8.0;
  double arm_length = 60.0;
  int polyline_points = 10;

  // Throws ConfigError when infeasible.
  void validate() const;
};

/// Geometry needed to rebuild agent paths (generator metadata).
struct Layout {
  std::vector<double> arm_angles;
  double lane_width = 3.5;
  double stop_distance = 8.0;
  double arm_length = 60.0;
};

struct Agent {
  int id = 0;
  Intent intent = Intent::kStraight;
  int arm = 0;
  Trajectory history;  // history_steps points, oldest first; last = current position
  Trajectory future;   // future_steps points after the current position
};

/// Map polyline point attributes: x, y, cos(heading), sin(heading), segment length.
using PolylinePoint = std::array<double, 5>;

struct Polyline {
  std::vector<PolylinePoint> points;
};

struct Scene {
  std::int64_t scene_id = 0;
  std::uint64_t seed = 0;
  double dt = 0.1;
  Layout layout;
  std::vector<Agent> agents;
  std::vector<Polyline> map;

  int num_agents() const { return static_cast<int>(agents.size()); }
};

Scene generate_scene(std::uint64_t seed, const SceneConfig& config, std::int64_t scene_id = 0);

/// Scene seeds for a split: deterministic in (base_seed, scene_id).
std::uint64_t scene_seed(std::uint64_t base_seed, std::int64_t scene_id);

/// Rigid translation of every coordinate (histories, futures, map).
Scene translate_scene(const Scene& scene, Vec2 offset);

// ---- prior oracle -----------------------------------------------------------

struct PriorConfig {
  bool enabled = true;
  int num_anchors = 6;
  double noise_level = 1.0;  // metres, bound on the endpoint perturbation
  double accuracy = 0.7;     // probability that the true-intent anchor scores highest
};

struct PriorBundle {
  // [agent][anchor][future step]; empty per agent when the oracle is disabled.
  std::vector<std::vector<Trajectory>> anchors;
  // [agent][anchor]; simplex per agent.
  std::vector<std::vector<double>> scores;
  std::vector<std::vector<Intent>> anchor_intents;
};

PriorBundle prior_oracle(const Scene& scene, const PriorConfig& config, const SceneConfig& scene_config);

// ---- context encoding --------------------------------------------------------

struct AgentFrame {
  Vec2 origin;
  double heading = 0.0;

  Vec2 to_local(Vec2 p) const;
  Vec2 to_global(Vec2 p) const;
  Vec2 rotate_to_local(Vec2 v) const;
};

AgentFrame agent_frame(const Agent& agent);

struct ContextConfig {
  int history_segment = 4;
  int max_map_polylines = 8;
  int max_neighbors = 5;
  int neighbor_points = 5;
  double position_scale = 20.0;
  double velocity_scale = 10.0;

  int history_tokens(int history_steps) const {
    return (history_steps + history_segment - 1) / history_segment;
  }
  int history_feature_dim(int history_steps) const {
    return 4 * history_segment + history_tokens(history_steps) + 1;
  }
  int map_feature_dim(int polyline_points) const { return 5 * polyline_points; }
  int neighbor_feature_dim() const { return 2 * neighbor_points + 5; }
};

/// Agent-centric features. Rows of `map` and `neighbors` are the real tokens
/// (at most the configured maxima); `flat()` pads them to a fixed width.
struct AgentContext {
  AgentFrame frame;
  bool valid = false;
  Matrix history;
  Matrix map;
  Matrix neighbors;
  int max_map = 0;
  int max_neighbors = 0;

  std::vector<double> flat() const;
};

/// One context per agent. An agent without history gets the padding context:
/// valid = false, zero history features, no map or neighbor tokens.
std::vector<AgentContext> encode_context(const Scene& scene, const ContextConfig& config,
                                         int history_steps, int polyline_points);

// ---- persistence -------------------------------------------------------------

inline constexpr int kSceneFormatVersion = 1;

nlohmann::json scene_to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);

void write_scenes_jsonl(std::ostream& out, const std::vector<Scene>& scenes);
std::vector<Scene> read_scenes_jsonl(std::istream& in);
std::vector<Scene> read_scenes_file(const std::string& path);
void write_scenes_file(const std::string& path, const std::vector<Scene>& scenes);

}  // namespace cmtraj
