#include "cmtraj/scene.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>

#include "cmtraj/errors.hpp"
#include "cmtraj/random.hpp"

namespace cmtraj {

namespace {

constexpr double kPathStart = 100.0;  // inbound paths start this far from the centre
constexpr double kPathResolution = 0.1;

Vec2 unit(double angle) { return {std::cos(angle), std::sin(angle)}; }
Vec2 right_normal(Vec2 d) { return {d.y, -d.x}; }
double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }

double wrap_angle(double a) {
  while (a > std::numbers::pi) a -= 2.0 * std::numbers::pi;
  while (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

// Arc-length parameterised polyline with linear extrapolation past both ends.
class Path {
 public:
  explicit Path(std::vector<Vec2> points) : points_(std::move(points)) {
    cumulative_.resize(points_.size(), 0.0);
    for (std::size_t i = 1; i < points_.size(); ++i) {
      cumulative_[i] = cumulative_[i - 1] + (points_[i] - points_[i - 1]).norm();
    }
  }

  Vec2 at(double s) const {
    if (s <= 0.0) {
      const Vec2 d = direction(0);
      return points_.front() + d * s;
    }
    if (s >= cumulative_.back()) {
      const Vec2 d = direction(points_.size() - 2);
      return points_.back() + d * (s - cumulative_.back());
    }
    const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), s);
    const std::size_t i = static_cast<std::size_t>(it - cumulative_.begin()) - 1;
    const double seg = cumulative_[i + 1] - cumulative_[i];
    const double f = seg > 0.0 ? (s - cumulative_[i]) / seg : 0.0;
    return points_[i] + (points_[i + 1] - points_[i]) * f;
  }

 private:
  Vec2 direction(std::size_t i) const {
    const Vec2 d = points_[i + 1] - points_[i];
    const double n = d.norm();
    return n > 0.0 ? d * (1.0 / n) : Vec2{1.0, 0.0};
  }

  std::vector<Vec2> points_;
  std::vector<double> cumulative_;
};

Vec2 inbound_point(const Layout& layout, int arm, double dist) {
  const Vec2 u = unit(layout.arm_angles[static_cast<std::size_t>(arm)]);
  const Vec2 n = right_normal(u * -1.0);
  return u * dist + n * (0.5 * layout.lane_width);
}

Vec2 outbound_point(const Layout& layout, int arm, double dist) {
  const Vec2 u = unit(layout.arm_angles[static_cast<std::size_t>(arm)]);
  return u * dist + right_normal(u) * (0.5 * layout.lane_width);
}

int target_arm(const Layout& layout, int arm, Intent intent) {
  const double heading = layout.arm_angles[static_cast<std::size_t>(arm)] + std::numbers::pi;
  double want = heading;
  if (intent == Intent::kLeft) want += 0.5 * std::numbers::pi;
  if (intent == Intent::kRight) want -= 0.5 * std::numbers::pi;
  int best = -1;
  double best_err = 1e9;
  for (int j = 0; j < static_cast<int>(layout.arm_angles.size()); ++j) {
    if (j == arm) continue;
    const double err = std::abs(wrap_angle(layout.arm_angles[static_cast<std::size_t>(j)] - want));
    if (err < best_err) {
      best_err = err;
      best = j;
    }
  }
  return best;
}

// Inbound lane -> cubic Bezier through the junction -> outbound lane.
Path build_path(const Layout& layout, int arm, Intent intent) {
  const Intent route = intent == Intent::kStop ? Intent::kStraight : intent;
  const int out = target_arm(layout, arm, route);
  std::vector<Vec2> pts;
  for (double d = kPathStart; d > layout.stop_distance; d -= 1.0) {
    pts.push_back(inbound_point(layout, arm, d));
  }
  const Vec2 entry = inbound_point(layout, arm, layout.stop_distance);
  const Vec2 exit = outbound_point(layout, out, layout.stop_distance);
  const Vec2 d_in = unit(layout.arm_angles[static_cast<std::size_t>(arm)]) * -1.0;
  const Vec2 d_out = unit(layout.arm_angles[static_cast<std::size_t>(out)]);
  const double handle = 0.4 * (exit - entry).norm();
  const Vec2 c1 = entry + d_in * handle;
  const Vec2 c2 = exit - d_out * handle;
  constexpr int kCurve = 60;
  for (int i = 0; i <= kCurve; ++i) {
    const double t = static_cast<double>(i) / kCurve;
    const double a = (1 - t) * (1 - t) * (1 - t), b = 3 * (1 - t) * (1 - t) * t,
                 c = 3 * (1 - t) * t * t, e = t * t * t;
    pts.push_back(entry * a + c1 * b + c2 * c + exit * e);
  }
  for (double d = layout.stop_distance + 1.0; d <= kPathStart; d += 1.0) {
    pts.push_back(outbound_point(layout, out, d));
  }
  // Densify so linear interpolation follows the curve closely.
  std::vector<Vec2> dense;
  for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
    const double len = (pts[i + 1] - pts[i]).norm();
    const int n = std::max(1, static_cast<int>(std::ceil(len / kPathResolution)));
    for (int k = 0; k < n; ++k) {
      dense.push_back(pts[i] + (pts[i + 1] - pts[i]) * (static_cast<double>(k) / n));
    }
  }
  dense.push_back(pts.back());
  return Path(std::move(dense));
}

// Arc length of the stop line along any path leaving `arm`.
double stop_arc(const Layout& layout) { return kPathStart - layout.stop_distance; }

// Arc positions s[0..n] from speeds v[0..n] by trapezoidal integration.
std::vector<double> integrate_forward(double s0, const std::vector<double>& v, double dt) {
  std::vector<double> s(v.size(), s0);
  for (std::size_t i = 1; i < v.size(); ++i) s[i] = s[i - 1] + 0.5 * (v[i - 1] + v[i]) * dt;
  return s;
}

Trajectory sample_path(const Path& path, const std::vector<double>& arcs, std::size_t from) {
  Trajectory out;
  for (std::size_t i = from; i < arcs.size(); ++i) out.push_back(path.at(arcs[i]));
  return out;
}

std::vector<double> future_speeds(Intent intent, double v0, int steps, double dt, double vmax,
                                  double accel, double turn_speed, double stop_gap) {
  std::vector<double> v(static_cast<std::size_t>(steps) + 1, v0);
  for (int n = 1; n <= steps; ++n) {
    const double tau = n * dt;
    double vn = v0;
    switch (intent) {
      case Intent::kStraight:
        vn = v0 + accel * tau;
        break;
      case Intent::kLeft:
      case Intent::kRight:
        vn = v0 > turn_speed ? std::max(turn_speed, v0 - 2.5 * tau)
                             : std::min(turn_speed, v0 + 2.5 * tau);
        break;
      case Intent::kStop:
        if (v0 <= 0.0 || stop_gap <= 0.5) {
          vn = 0.0;
        } else {
          const double decel = v0 * v0 / (2.0 * stop_gap);
          vn = v0 - decel * tau;
        }
        break;
    }
    v[static_cast<std::size_t>(n)] = std::clamp(vn, 0.0, vmax);
  }
  return v;
}

// Shrinks steps longer than max_step so the trajectory stays kinematically feasible.
void enforce_step_limit(Trajectory& traj, Vec2 start, double max_step) {
  Vec2 prev = start;
  for (auto& p : traj) {
    const Vec2 d = p - prev;
    const double n = d.norm();
    if (n > max_step) p = prev + d * (max_step / n);
    prev = p;
  }
}

Polyline make_polyline(const std::vector<Vec2>& pts) {
  Polyline line;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const std::size_t j = i + 1 < pts.size() ? i + 1 : i;
    const std::size_t k = i + 1 < pts.size() ? i : i - 1;
    const Vec2 d = pts[j == i ? i : j] - pts[j == i ? k : i];
    const double len = d.norm();
    const double c = len > 0.0 ? d.x / len : 1.0, s = len > 0.0 ? d.y / len : 0.0;
    line.points.push_back({pts[i].x, pts[i].y, c, s, len});
  }
  return line;
}

}  // namespace

std::string to_string(Intent intent) {
  switch (intent) {
    case Intent::kStraight: return "straight";
    case Intent::kLeft: return "left";
    case Intent::kRight: return "right";
    case Intent::kStop: return "stop";
  }
  return "straight";
}

Intent intent_from_string(const std::string& name) {
  if (name == "straight") return Intent::kStraight;
  if (name == "left") return Intent::kLeft;
  if (name == "right") return Intent::kRight;
  if (name == "stop") return Intent::kStop;
  throw ConfigError("unknown intent '" + name + "'");
}

void SceneConfig::validate() const {
  if (intents.empty()) throw ConfigError("scene config: intent set is empty");
  if (min_agents < 2 || max_agents > 6 || min_agents > max_agents) {
    throw ConfigError("scene config: agent count range must lie within [2, 6]");
  }
  if (history_steps < 2 || future_steps < 2) {
    throw ConfigError("scene config: history and future need at least 2 steps");
  }
  if (!(dt > 0.0) || !(max_speed > 0.0)) throw ConfigError("scene config: dt and max_speed must be positive");
  if (polyline_points < 2) throw ConfigError("scene config: polylines need at least 2 points");
  if (max_speed < 12.5) throw ConfigError("scene config: max_speed below generator cruise speeds");
}

std::uint64_t scene_seed(std::uint64_t base_seed, std::int64_t scene_id) {
  return mix_seed(base_seed, static_cast<std::uint64_t>(scene_id));
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config, std::int64_t scene_id) {
  config.validate();
  Rng rng(seed);
  Scene scene;
  scene.scene_id = scene_id;
  scene.seed = seed;
  scene.dt = config.dt;

  Layout& layout = scene.layout;
  layout.lane_width = config.lane_width;
  layout.stop_distance = config.stop_distance;
  layout.arm_length = config.arm_length;
  const double base = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double jitter = config.arm_jitter_deg * std::numbers::pi / 180.0;
  for (int j = 0; j < 4; ++j) {
    layout.arm_angles.push_back(wrap_angle(base + j * 0.5 * std::numbers::pi + rng.uniform(-jitter, jitter)));
  }

  for (int j = 0; j < 4; ++j) {
    std::vector<Vec2> in_pts, out_pts;
    for (int i = 0; i < config.polyline_points; ++i) {
      const double f = static_cast<double>(i) / (config.polyline_points - 1);
      in_pts.push_back(inbound_point(layout, j, config.arm_length + f * (config.stop_distance - config.arm_length)));
      out_pts.push_back(outbound_point(layout, j, config.stop_distance + f * (config.arm_length - config.stop_distance)));
    }
    scene.map.push_back(make_polyline(in_pts));
    scene.map.push_back(make_polyline(out_pts));
  }

  const int n_agents = rng.uniform_int(config.min_agents, config.max_agents);
  std::vector<int> arms{0, 1, 2, 3};
  std::shuffle(arms.begin(), arms.end(), rng.engine());
  const double dt = config.dt;
  const int th = config.history_steps, tf = config.future_steps;
  for (int a = 0; a < n_agents; ++a) {
    Agent agent;
    agent.id = a;
    agent.arm = arms[static_cast<std::size_t>(a % 4)];
    const int queue = a / 4;
    agent.intent = config.intents[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(config.intents.size()) - 1))];
    const Path path = build_path(layout, agent.arm, agent.intent);

    std::vector<double> v_hist(static_cast<std::size_t>(th), 0.0);  // index n = steps before now
    std::vector<double> v_fut;
    double s0 = 0.0;
    if (agent.intent == Intent::kStop) {
      const double gap = rng.uniform(0.5, 3.0) + 15.0 * queue;
      const double decel = rng.uniform(2.0, 4.0);
      s0 = stop_arc(layout) - gap;
      for (int n = 0; n < th; ++n) v_hist[static_cast<std::size_t>(n)] = std::min(config.max_speed, decel * n * dt);
      v_fut.assign(static_cast<std::size_t>(tf) + 1, 0.0);
    } else {
      const bool turning = agent.intent != Intent::kStraight;
      const double v0 = rng.uniform(6.0, 12.0);
      const double a_hist = turning ? rng.uniform(-1.5, -0.3) : rng.uniform(-0.5, 0.5);
      const double gap = rng.uniform(3.0, 25.0) + 15.0 * queue;
      s0 = stop_arc(layout) - gap;
      for (int n = 0; n < th; ++n) {
        v_hist[static_cast<std::size_t>(n)] = std::clamp(v0 - a_hist * n * dt, 0.5, config.max_speed);
      }
      const double a_fut = rng.uniform(-0.5, 1.0);
      const double v_turn = rng.uniform(4.5, 7.0);
      v_fut = future_speeds(agent.intent, v0, tf, dt, config.max_speed, a_fut, v_turn, gap);
    }
    // History arcs, newest first, then reversed.
    std::vector<double> s_hist(static_cast<std::size_t>(th), s0);
    for (int n = 1; n < th; ++n) {
      s_hist[static_cast<std::size_t>(n)] =
          s_hist[static_cast<std::size_t>(n - 1)] -
          0.5 * (v_hist[static_cast<std::size_t>(n - 1)] + v_hist[static_cast<std::size_t>(n)]) * dt;
    }
    std::reverse(s_hist.begin(), s_hist.end());
    for (double s : s_hist) agent.history.push_back(path.at(s));
    const auto s_fut = integrate_forward(s0, v_fut, dt);
    agent.future = sample_path(path, s_fut, 1);
    scene.agents.push_back(std::move(agent));
  }
  return scene;
}

Scene translate_scene(const Scene& scene, Vec2 offset) {
  Scene out = scene;
  for (auto& a : out.agents) {
    for (auto& p : a.history) p = p + offset;
    for (auto& p : a.future) p = p + offset;
  }
  for (auto& line : out.map) {
    for (auto& p : line.points) {
      p[0] += offset.x;
      p[1] += offset.y;
    }
  }
  // Layout geometry is centre-relative and only used by the oracle templates.
  return out;
}

// ---- prior oracle -------------------------------------------------------------

PriorBundle prior_oracle(const Scene& scene, const PriorConfig& config, const SceneConfig& scene_config) {
  require(config.num_anchors >= 1, "prior_oracle: need at least one anchor");
  PriorBundle bundle;
  const int k = config.num_anchors;
  const std::size_t na = scene.agents.size();
  bundle.anchors.resize(na);
  bundle.scores.resize(na);
  bundle.anchor_intents.resize(na);
  if (!config.enabled) {
    for (std::size_t a = 0; a < na; ++a) bundle.scores[a].assign(static_cast<std::size_t>(k), 1.0 / k);
    return bundle;
  }

  static const std::array<Intent, 4> kOrder{Intent::kStraight, Intent::kLeft, Intent::kRight, Intent::kStop};
  Rng rng(mix_seed(scene.seed, 0x5072696f72ULL));
  const double dt = scene.dt;
  const double max_step = scene_config.max_speed * dt;
  for (std::size_t a = 0; a < na; ++a) {
    const Agent& agent = scene.agents[a];
    const int tf = static_cast<int>(agent.future.size());
    const Vec2 current = agent.history.back();
    const Vec2 prev = agent.history[agent.history.size() - 2];
    const double v0 = std::min(scene_config.max_speed, (current - prev).norm() / dt);
    // Arc position of the current point along the inbound lane.
    const Vec2 u = unit(scene.layout.arm_angles[static_cast<std::size_t>(agent.arm)]);
    const double s0 = kPathStart - dot(current, u);
    const double gap = stop_arc(scene.layout) - s0;

    int true_slot = -1;
    for (int i = 0; i < k; ++i) {
      const Intent intent = kOrder[static_cast<std::size_t>(i % 4)];
      const int variant = i / 4;
      bundle.anchor_intents[a].push_back(intent);
      Trajectory traj;
      if (intent == agent.intent && true_slot < 0) {
        true_slot = i;
        traj = agent.future;
      } else {
        const Path path = build_path(scene.layout, agent.arm, intent);
        const double accel = variant == 0 ? 0.0 : 1.0;
        const double turn_speed = variant == 0 ? 6.0 : 4.5;
        const auto v = future_speeds(intent, v0, tf, dt, scene_config.max_speed, accel, turn_speed, gap);
        traj = sample_path(path, integrate_forward(s0, v, dt), 1);
      }
      const double radius = config.noise_level * std::sqrt(rng.uniform());
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const Vec2 offset = unit(angle) * radius;
      for (int n = 0; n < tf; ++n) {
        traj[static_cast<std::size_t>(n)] = traj[static_cast<std::size_t>(n)] + offset * (static_cast<double>(n + 1) / tf);
      }
      enforce_step_limit(traj, current, max_step);
      bundle.anchors[a].push_back(std::move(traj));
    }

    // Winner: the true-intent slot with probability `accuracy`, else a slot of another intent.
    int winner = true_slot;
    std::vector<int> wrong;
    for (int i = 0; i < k; ++i) {
      if (bundle.anchor_intents[a][static_cast<std::size_t>(i)] != agent.intent) wrong.push_back(i);
    }
    const double draw = rng.uniform();
    if (true_slot < 0 || (draw >= config.accuracy && !wrong.empty())) {
      winner = wrong.empty() ? 0 : wrong[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(wrong.size()) - 1))];
    }
    std::vector<double> scores(static_cast<std::size_t>(k), 0.0);
    if (k == 1) {
      scores[0] = 1.0;
    } else {
      const double top = rng.uniform(0.4, 0.7);
      std::vector<double> w(static_cast<std::size_t>(k), 0.0);
      double total = 0.0;
      for (int i = 0; i < k; ++i) {
        if (i == winner) continue;
        w[static_cast<std::size_t>(i)] = rng.uniform(0.5, 1.0);
        total += w[static_cast<std::size_t>(i)];
      }
      for (int i = 0; i < k; ++i) {
        scores[static_cast<std::size_t>(i)] = i == winner ? top : (1.0 - top) * w[static_cast<std::size_t>(i)] / total;
      }
    }
    bundle.scores[a] = std::move(scores);
  }
  return bundle;
}

// ---- context encoding ----------------------------------------------------------

Vec2 AgentFrame::rotate_to_local(Vec2 v) const {
  const double c = std::cos(heading), s = std::sin(heading);
  return {c * v.x + s * v.y, -s * v.x + c * v.y};
}

Vec2 AgentFrame::to_local(Vec2 p) const { return rotate_to_local(p - origin); }

Vec2 AgentFrame::to_global(Vec2 p) const {
  const double c = std::cos(heading), s = std::sin(heading);
  return Vec2{c * p.x - s * p.y, s * p.x + c * p.y} + origin;
}

AgentFrame agent_frame(const Agent& agent) {
  AgentFrame frame;
  if (agent.history.empty()) return frame;
  frame.origin = agent.history.back();
  constexpr double kMinTravel = 0.3;
  const std::size_t n = agent.history.size();
  const Vec2 recent = agent.history.back() - agent.history[n >= 6 ? n - 6 : 0];
  const Vec2 whole = agent.history.back() - agent.history.front();
  if (recent.norm() >= kMinTravel) {
    frame.heading = std::atan2(recent.y, recent.x);
  } else if (whole.norm() >= kMinTravel) {
    frame.heading = std::atan2(whole.y, whole.x);
  }
  return frame;
}

std::vector<double> AgentContext::flat() const {
  std::vector<double> out;
  out.push_back(valid ? 1.0 : 0.0);
  out.insert(out.end(), history.data(), history.data() + history.size());
  auto append_padded = [&](const Matrix& m, int max_rows) {
    for (int r = 0; r < max_rows; ++r) {
      out.push_back(r < m.rows() ? 1.0 : 0.0);
      for (Index c = 0; c < m.cols(); ++c) out.push_back(r < m.rows() ? m(r, c) : 0.0);
    }
  };
  append_padded(map, max_map);
  append_padded(neighbors, max_neighbors);
  return out;
}

std::vector<AgentContext> encode_context(const Scene& scene, const ContextConfig& config,
                                         int history_steps, int polyline_points) {
  const int tokens = config.history_tokens(history_steps);
  const int seg = config.history_segment;
  const int fh = config.history_feature_dim(history_steps);
  const double ps = config.position_scale, vs = config.velocity_scale;
  std::vector<AgentContext> contexts;
  contexts.reserve(scene.agents.size());

  for (std::size_t a = 0; a < scene.agents.size(); ++a) {
    const Agent& agent = scene.agents[a];
    AgentContext ctx;
    ctx.max_map = config.max_map_polylines;
    ctx.max_neighbors = config.max_neighbors;
    ctx.history = Matrix::Zero(tokens, fh);
    ctx.map = Matrix(0, config.map_feature_dim(polyline_points));
    ctx.neighbors = Matrix(0, config.neighbor_feature_dim());
    if (agent.history.empty()) {
      contexts.push_back(std::move(ctx));
      continue;
    }
    ctx.valid = true;
    ctx.frame = agent_frame(agent);
    const AgentFrame& f = ctx.frame;

    // History: right-aligned so the last token ends at the current point.
    const int n = static_cast<int>(agent.history.size());
    for (int tok = 0; tok < tokens; ++tok) {
      for (int j = 0; j < seg; ++j) {
        const int step = history_steps - (tokens - tok) * seg + j;  // index in a full history
        const int idx = step - (history_steps - n);
        if (idx < 0 || idx >= n) continue;
        const Vec2 p = f.to_local(agent.history[static_cast<std::size_t>(idx)]);
        Vec2 vel{};
        if (n > 1) {
          const int i0 = idx > 0 ? idx - 1 : 0, i1 = idx > 0 ? idx : 1;
          vel = f.rotate_to_local(agent.history[static_cast<std::size_t>(i1)] - agent.history[static_cast<std::size_t>(i0)]) *
                (1.0 / scene.dt);
        }
        ctx.history(tok, 4 * j + 0) = p.x / ps;
        ctx.history(tok, 4 * j + 1) = p.y / ps;
        ctx.history(tok, 4 * j + 2) = vel.x / vs;
        ctx.history(tok, 4 * j + 3) = vel.y / vs;
      }
      ctx.history(tok, 4 * seg + tok) = 1.0;
      ctx.history(tok, fh - 1) = 1.0;
    }

    // Map: nearest polylines by closest point.
    std::vector<std::pair<double, std::size_t>> dist;
    for (std::size_t m = 0; m < scene.map.size(); ++m) {
      double best = 1e18;
      for (const auto& pt : scene.map[m].points) best = std::min(best, (Vec2{pt[0], pt[1]} - f.origin).norm());
      dist.emplace_back(best, m);
    }
    std::stable_sort(dist.begin(), dist.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
    const int n_map = std::min<int>(config.max_map_polylines, static_cast<int>(dist.size()));
    ctx.map = Matrix::Zero(n_map, config.map_feature_dim(polyline_points));
    for (int r = 0; r < n_map; ++r) {
      const Polyline& line = scene.map[dist[static_cast<std::size_t>(r)].second];
      for (int p = 0; p < polyline_points && p < static_cast<int>(line.points.size()); ++p) {
        const auto& pt = line.points[static_cast<std::size_t>(p)];
        const Vec2 pos = f.to_local({pt[0], pt[1]});
        const Vec2 dir = f.rotate_to_local({pt[2], pt[3]});
        ctx.map(r, 5 * p + 0) = pos.x / ps;
        ctx.map(r, 5 * p + 1) = pos.y / ps;
        ctx.map(r, 5 * p + 2) = dir.x;
        ctx.map(r, 5 * p + 3) = dir.y;
        ctx.map(r, 5 * p + 4) = pt[4] / 5.0;
      }
    }

    // Neighbours: other agents with history, nearest first.
    std::vector<std::pair<double, std::size_t>> nbr;
    for (std::size_t b = 0; b < scene.agents.size(); ++b) {
      if (b == a || scene.agents[b].history.empty()) continue;
      nbr.emplace_back((scene.agents[b].history.back() - f.origin).norm(), b);
    }
    std::stable_sort(nbr.begin(), nbr.end(), [](const auto& l, const auto& r) { return l.first < r.first; });
    const int n_nbr = std::min<int>(config.max_neighbors, static_cast<int>(nbr.size()));
    ctx.neighbors = Matrix::Zero(n_nbr, config.neighbor_feature_dim());
    const int np = config.neighbor_points;
    for (int r = 0; r < n_nbr; ++r) {
      const Agent& other = scene.agents[nbr[static_cast<std::size_t>(r)].second];
      const int m = static_cast<int>(other.history.size());
      for (int j = 0; j < np; ++j) {
        const int idx = m - np + j;
        if (idx < 0) continue;
        const Vec2 p = f.to_local(other.history[static_cast<std::size_t>(idx)]);
        ctx.neighbors(r, 2 * j) = p.x / ps;
        ctx.neighbors(r, 2 * j + 1) = p.y / ps;
      }
      const AgentFrame of = agent_frame(other);
      const Vec2 vel = m > 1 ? f.rotate_to_local(other.history[static_cast<std::size_t>(m - 1)] -
                                                 other.history[static_cast<std::size_t>(m - 2)]) *
                                   (1.0 / scene.dt)
                             : Vec2{};
      ctx.neighbors(r, 2 * np) = vel.x / vs;
      ctx.neighbors(r, 2 * np + 1) = vel.y / vs;
      ctx.neighbors(r, 2 * np + 2) = std::cos(of.heading - f.heading);
      ctx.neighbors(r, 2 * np + 3) = std::sin(of.heading - f.heading);
      ctx.neighbors(r, 2 * np + 4) = nbr[static_cast<std::size_t>(r)].first / ps;
    }
    contexts.push_back(std::move(ctx));
  }
  return contexts;
}

// ---- persistence ---------------------------------------------------------------

namespace {

nlohmann::json traj_json(const Trajectory& t) {
  auto arr = nlohmann::json::array();
  for (const auto& p : t) arr.push_back({p.x, p.y});
  return arr;
}

Trajectory traj_from(const nlohmann::json& j) {
  Trajectory t;
  for (const auto& p : j) t.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  return t;
}

}  // namespace

nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json j;
  j["format"] = "cmtraj-scene";
  j["format_version"] = kSceneFormatVersion;
  j["scene_id"] = scene.scene_id;
  j["seed"] = scene.seed;
  j["dt"] = scene.dt;
  j["layout"] = {{"arm_angles", scene.layout.arm_angles},
                 {"lane_width", scene.layout.lane_width},
                 {"stop_distance", scene.layout.stop_distance},
                 {"arm_length", scene.layout.arm_length}};
  auto agents = nlohmann::json::array();
  for (const auto& a : scene.agents) {
    agents.push_back({{"id", a.id},
                      {"intent", to_string(a.intent)},
                      {"arm", a.arm},
                      {"history", traj_json(a.history)},
                      {"future", traj_json(a.future)}});
  }
  j["agents"] = std::move(agents);
  auto map = nlohmann::json::array();
  for (const auto& line : scene.map) map.push_back({{"points", line.points}});
  j["map"] = std::move(map);
  return j;
}

Scene scene_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "cmtraj-scene") throw ConfigError("scene record: unexpected format tag");
  if (j.value("format_version", 0) != kSceneFormatVersion) throw ConfigError("scene record: unsupported format_version");
  Scene s;
  s.scene_id = j.at("scene_id").get<std::int64_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.dt = j.at("dt").get<double>();
  const auto& l = j.at("layout");
  s.layout.arm_angles = l.at("arm_angles").get<std::vector<double>>();
  s.layout.lane_width = l.at("lane_width").get<double>();
  s.layout.stop_distance = l.at("stop_distance").get<double>();
  s.layout.arm_length = l.at("arm_length").get<double>();
  for (const auto& a : j.at("agents")) {
    Agent agent;
    agent.id = a.at("id").get<int>();
    agent.intent = intent_from_string(a.at("intent").get<std::string>());
    agent.arm = a.at("arm").get<int>();
    agent.history = traj_from(a.at("history"));
    agent.future = traj_from(a.at("future"));
    s.agents.push_back(std::move(agent));
  }
  for (const auto& line : j.at("map")) {
    Polyline p;
    p.points = line.at("points").get<std::vector<PolylinePoint>>();
    s.map.push_back(std::move(p));
  }
  return s;
}

void write_scenes_jsonl(std::ostream& out, const std::vector<Scene>& scenes) {
  for (const auto& s : scenes) out << scene_to_json(s).dump() << '\n';
}

std::vector<Scene> read_scenes_jsonl(std::istream& in) {
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    scenes.push_back(scene_from_json(nlohmann::json::parse(line)));
  }
  return scenes;
}

std::vector<Scene> read_scenes_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open scene file " + path);
  return read_scenes_jsonl(in);
}

void write_scenes_file(const std::string& path, const std::vector<Scene>& scenes) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write scene file " + path);
  write_scenes_jsonl(out, scenes);
}

}  // namespace cmtraj
