#include "cmtraj/dataset.hpp"

#include <cmath>

#include "cmtraj/errors.hpp"

namespace cmtraj {

namespace {

nlohmann::json intents_json(const std::vector<Intent>& intents) {
  auto arr = nlohmann::json::array();
  for (Intent i : intents) arr.push_back(to_string(i));
  return arr;
}

}  // namespace

nlohmann::json DataConfig::to_json() const {
  return {{"scene",
           {{"min_agents", scene.min_agents},
            {"max_agents", scene.max_agents},
            {"history_steps", scene.history_steps},
            {"future_steps", scene.future_steps},
            {"dt", scene.dt},
            {"max_speed", scene.max_speed},
            {"intents", intents_json(scene.intents)},
            {"lane_width", scene.lane_width},
            {"arm_jitter_deg", scene.arm_jitter_deg},
            {"stop_distance", scene.stop_distance},
            {"arm_length", scene.arm_length},
            {"polyline_points", scene.polyline_points}}},
          {"prior",
           {{"enabled", prior.enabled},
            {"num_anchors", prior.num_anchors},
            {"noise_level", prior.noise_level},
            {"accuracy", prior.accuracy}}},
          {"context",
           {{"history_segment", context.history_segment},
            {"max_map_polylines", context.max_map_polylines},
            {"max_neighbors", context.max_neighbors},
            {"neighbor_points", context.neighbor_points},
            {"position_scale", context.position_scale},
            {"velocity_scale", context.velocity_scale}}}};
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  DataConfig c;
  if (j.contains("scene")) {
    const auto& s = j.at("scene");
    c.scene.min_agents = s.value("min_agents", c.scene.min_agents);
    c.scene.max_agents = s.value("max_agents", c.scene.max_agents);
    c.scene.history_steps = s.value("history_steps", c.scene.history_steps);
    c.scene.future_steps = s.value("future_steps", c.scene.future_steps);
    c.scene.dt = s.value("dt", c.scene.dt);
    c.scene.max_speed = s.value("max_speed", c.scene.max_speed);
    if (s.contains("intents")) {
      c.scene.intents.clear();
      for (const auto& name : s.at("intents")) c.scene.intents.push_back(intent_from_string(name.get<std::string>()));
    }
    c.scene.lane_width = s.value("lane_width", c.scene.lane_width);
    c.scene.arm_jitter_deg = s.value("arm_jitter_deg", c.scene.arm_jitter_deg);
    c.scene.stop_distance = s.value("stop_distance", c.scene.stop_distance);
    c.scene.arm_length = s.value("arm_length", c.scene.arm_length);
    c.scene.polyline_points = s.value("polyline_points", c.scene.polyline_points);
  }
  if (j.contains("prior")) {
    const auto& p = j.at("prior");
    c.prior.enabled = p.value("enabled", c.prior.enabled);
    c.prior.num_anchors = p.value("num_anchors", c.prior.num_anchors);
    c.prior.noise_level = p.value("noise_level", c.prior.noise_level);
    c.prior.accuracy = p.value("accuracy", c.prior.accuracy);
  }
  if (j.contains("context")) {
    const auto& x = j.at("context");
    c.context.history_segment = x.value("history_segment", c.context.history_segment);
    c.context.max_map_polylines = x.value("max_map_polylines", c.context.max_map_polylines);
    c.context.max_neighbors = x.value("max_neighbors", c.context.max_neighbors);
    c.context.neighbor_points = x.value("neighbor_points", c.context.neighbor_points);
    c.context.position_scale = x.value("position_scale", c.context.position_scale);
    c.context.velocity_scale = x.value("velocity_scale", c.context.velocity_scale);
  }
  c.scene.validate();
  if (c.prior.num_anchors < 1) throw ConfigError("prior.num_anchors must be >= 1");
  if (c.prior.accuracy < 0.0 || c.prior.accuracy > 1.0) throw ConfigError("prior.accuracy must lie in [0, 1]");
  if (c.prior.noise_level < 0.0) throw ConfigError("prior.noise_level must be >= 0");
  if (c.context.history_segment < 1 || c.context.neighbor_points < 1) {
    throw ConfigError("context: segment and neighbor point counts must be >= 1");
  }
  return c;
}

Eigen::RowVectorXd flatten_local(const Trajectory& traj, const AgentFrame& frame) {
  Eigen::RowVectorXd out(2 * static_cast<Index>(traj.size()));
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const Vec2 p = frame.to_local(traj[i]);
    out(2 * static_cast<Index>(i)) = p.x;
    out(2 * static_cast<Index>(i) + 1) = p.y;
  }
  return out;
}

Trajectory unflatten_global(std::span<const double> flat, const AgentFrame& frame) {
  require(flat.size() % 2 == 0, "unflatten_global: odd length");
  Trajectory out;
  for (std::size_t i = 0; i + 1 < flat.size(); i += 2) out.push_back(frame.to_global({flat[i], flat[i + 1]}));
  return out;
}

Matrix local_futures(const std::vector<Scene>& scenes, const ContextConfig& /*context*/) {
  std::vector<Eigen::RowVectorXd> rows;
  for (const auto& s : scenes) {
    for (const auto& a : s.agents) rows.push_back(flatten_local(a.future, agent_frame(a)));
  }
  require(!rows.empty(), "local_futures: no agents");
  Matrix out(static_cast<Index>(rows.size()), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = rows[i];
  return out;
}

std::vector<PreparedScene> prepare_scenes(const std::vector<Scene>& scenes, const LatentCodec& codec,
                                          const DataConfig& config) {
  const int tf = config.scene.future_steps;
  if (codec.traj_dim() != 2 * tf) {
    throw ConfigError("codec trajectory dimension " + std::to_string(codec.traj_dim()) +
                      " does not match 2 x future_steps = " + std::to_string(2 * tf));
  }
  std::vector<PreparedScene> out;
  out.reserve(scenes.size());
  for (const auto& scene : scenes) {
    PreparedScene p;
    p.scene = scene;
    p.prior = prior_oracle(scene, config.prior, config.scene);
    p.contexts = encode_context(scene, config.context, config.scene.history_steps, config.scene.polyline_points);
    const Index na = scene.num_agents();
    p.future_local = Matrix(na, 2 * tf);
    for (Index a = 0; a < na; ++a) {
      const auto& agent = scene.agents[static_cast<std::size_t>(a)];
      if (static_cast<int>(agent.future.size()) != tf) {
        throw ConfigError("scene " + std::to_string(scene.scene_id) + ": future length differs from future_steps");
      }
      p.future_local.row(a) = flatten_local(agent.future, p.contexts[static_cast<std::size_t>(a)].frame);
    }
    p.gt_latent = codec.encode(p.future_local);

    std::vector<Eigen::RowVectorXd> anchor_rows;
    for (Index a = 0; a < na; ++a) {
      const auto& anchors = p.prior.anchors[static_cast<std::size_t>(a)];
      const auto& scores = p.prior.scores[static_cast<std::size_t>(a)];
      const Index begin = static_cast<Index>(anchor_rows.size());
      for (std::size_t k = 0; k < anchors.size(); ++k) {
        anchor_rows.push_back(flatten_local(anchors[k], p.contexts[static_cast<std::size_t>(a)].frame));
        p.prior_log_scores.push_back(std::log(std::max(scores[k], 1e-12)));
      }
      p.prior_rows.push_back({begin, static_cast<Index>(anchor_rows.size())});
    }
    Matrix flat(static_cast<Index>(anchor_rows.size()), 2 * tf);
    for (std::size_t i = 0; i < anchor_rows.size(); ++i) flat.row(static_cast<Index>(i)) = anchor_rows[i];
    p.prior_latents = anchor_rows.empty() ? Matrix(0, codec.latent_dim()) : codec.encode(flat);
    out.push_back(std::move(p));
  }
  return out;
}

DenoiserConfig denoiser_dims(const DataConfig& config, int latent_dim) {
  DenoiserConfig d;
  d.latent_dim = latent_dim;
  d.history_feature_dim = config.context.history_feature_dim(config.scene.history_steps);
  d.map_feature_dim = config.context.map_feature_dim(config.scene.polyline_points);
  d.neighbor_feature_dim = config.context.neighbor_feature_dim();
  return d;
}

ConditionBatch make_condition_batch(std::span<const PreparedScene* const> scenes) {
  require(!scenes.empty(), "make_condition_batch: empty batch");
  Index agents = 0, hist = 0, map = 0, nbr = 0, pri = 0;
  for (const auto* s : scenes) {
    agents += s->num_agents();
    for (const auto& c : s->contexts) {
      hist += c.history.rows();
      map += c.map.rows();
      nbr += c.neighbors.rows();
    }
    pri += s->prior_latents.rows();
  }
  const auto& first = scenes.front()->contexts.front();
  ConditionBatch b;
  b.history = Matrix(hist, first.history.cols());
  b.map = Matrix(map, first.map.cols());
  b.neighbors = Matrix(nbr, first.neighbors.cols());
  b.priors = Matrix(pri, scenes.front()->prior_latents.cols());
  Index ai = 0, hi = 0, mi = 0, ni = 0, pi = 0;
  for (const auto* s : scenes) {
    b.scene_agents.push_back({ai, ai + s->num_agents()});
    ai += s->num_agents();
    for (std::size_t a = 0; a < s->contexts.size(); ++a) {
      const auto& c = s->contexts[a];
      b.history.middleRows(hi, c.history.rows()) = c.history;
      b.history_spans.push_back({hi, hi + c.history.rows()});
      hi += c.history.rows();
      if (c.map.rows() > 0) b.map.middleRows(mi, c.map.rows()) = c.map;
      b.map_spans.push_back({mi, mi + c.map.rows()});
      mi += c.map.rows();
      if (c.neighbors.rows() > 0) b.neighbors.middleRows(ni, c.neighbors.rows()) = c.neighbors;
      b.neighbor_spans.push_back({ni, ni + c.neighbors.rows()});
      ni += c.neighbors.rows();
      const KeySpan pr = s->prior_rows[a];
      b.prior_spans.push_back({pi + pr.begin, pi + pr.end});
    }
    if (s->prior_latents.rows() > 0) b.priors.middleRows(pi, s->prior_latents.rows()) = s->prior_latents;
    b.prior_bias.insert(b.prior_bias.end(), s->prior_log_scores.begin(), s->prior_log_scores.end());
    pi += s->prior_latents.rows();
  }
  return b;
}

Matrix stack_latents(std::span<const PreparedScene* const> scenes) {
  Index rows = 0;
  for (const auto* s : scenes) rows += s->gt_latent.rows();
  Matrix out(rows, scenes.front()->gt_latent.cols());
  Index r = 0;
  for (const auto* s : scenes) {
    out.middleRows(r, s->gt_latent.rows()) = s->gt_latent;
    r += s->gt_latent.rows();
  }
  return out;
}

Matrix stack_futures(std::span<const PreparedScene* const> scenes) {
  Index rows = 0;
  for (const auto* s : scenes) rows += s->future_local.rows();
  Matrix out(rows, scenes.front()->future_local.cols());
  Index r = 0;
  for (const auto* s : scenes) {
    out.middleRows(r, s->future_local.rows()) = s->future_local;
    r += s->future_local.rows();
  }
  return out;
}

std::int64_t split_offset(Split split) {
  switch (split) {
    case Split::kTrain: return 0;
    case Split::kVal: return 10'000'000;
    case Split::kTest: return 20'000'000;
  }
  return 0;
}

std::vector<Scene> generate_split(std::uint64_t base_seed, Split split, int count, const SceneConfig& config) {
  require(count >= 0 && count < 10'000'000, "generate_split: count out of range");
  std::vector<Scene> scenes;
  scenes.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::int64_t id = split_offset(split) + i;
    scenes.push_back(generate_scene(scene_seed(base_seed, id), config, id));
  }
  return scenes;
}

}  // namespace cmtraj
