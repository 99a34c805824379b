#include <doctest.h>

#include <set>
#include <sstream>

#include "cmtraj/dataset.hpp"
#include "cmtraj/metrics.hpp"
#include "cmtraj/scene.hpp"

using namespace cmtraj;

namespace {

bool same_traj(const Trajectory& a, const Trajectory& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i])) return false;
  }
  return true;
}

bool same_scene(const Scene& a, const Scene& b) {
  if (a.scene_id != b.scene_id || a.seed != b.seed || a.agents.size() != b.agents.size()) return false;
  if (a.layout.arm_angles != b.layout.arm_angles) return false;
  for (std::size_t i = 0; i < a.agents.size(); ++i) {
    const auto &x = a.agents[i], &y = b.agents[i];
    if (x.id != y.id || x.intent != y.intent || x.arm != y.arm) return false;
    if (!same_traj(x.history, y.history) || !same_traj(x.future, y.future)) return false;
  }
  if (a.map.size() != b.map.size()) return false;
  for (std::size_t i = 0; i < a.map.size(); ++i) {
    if (a.map[i].points != b.map[i].points) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("same seed gives a bitwise identical scene and prior") {
  SceneConfig cfg;
  PriorConfig pc;
  for (std::uint64_t seed : {1u, 99u, 12345u}) {
    const Scene a = generate_scene(seed, cfg, 7), b = generate_scene(seed, cfg, 7);
    CHECK(same_scene(a, b));
    const auto pa = prior_oracle(a, pc, cfg), pb = prior_oracle(b, pc, cfg);
    CHECK(pa.scores == pb.scores);
    for (std::size_t i = 0; i < pa.anchors.size(); ++i) {
      for (std::size_t k = 0; k < pa.anchors[i].size(); ++k) CHECK(same_traj(pa.anchors[i][k], pb.anchors[i][k]));
    }
  }
  CHECK_FALSE(same_scene(generate_scene(1, cfg), generate_scene(2, cfg)));
}

TEST_CASE("generated scenes obey the kinematic contract") {
  SceneConfig cfg;
  PriorConfig pc;
  const double max_step = cfg.max_speed * cfg.dt + 1e-9;
  int stops = 0;
  for (int i = 0; i < 1000; ++i) {
    const Scene s = generate_scene(scene_seed(5, i), cfg, i);
    CHECK(s.num_agents() >= cfg.min_agents);
    CHECK(s.num_agents() <= cfg.max_agents);
    CHECK(!s.map.empty());
    for (const auto& a : s.agents) {
      REQUIRE(a.history.size() == static_cast<std::size_t>(cfg.history_steps));
      REQUIRE(a.future.size() == static_cast<std::size_t>(cfg.future_steps));
      for (std::size_t t = 1; t < a.history.size(); ++t) CHECK((a.history[t] - a.history[t - 1]).norm() <= max_step);
      Vec2 prev = a.history.back();
      double travelled = 0.0;
      for (const auto& p : a.future) {
        const double step = (p - prev).norm();
        CHECK(step <= max_step);
        travelled += step;
        prev = p;
      }
      if (a.intent == Intent::kStop) {
        ++stops;
        CHECK(travelled <= 0.5);
      }
    }
    const auto prior = prior_oracle(s, pc, cfg);
    for (std::size_t a = 0; a < s.agents.size(); ++a) {
      double total = 0.0;
      for (double p : prior.scores[a]) {
        CHECK(p >= 0.0);
        total += p;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
      for (const auto& anchor : prior.anchors[a]) {
        Vec2 prev = s.agents[a].history.back();
        for (const auto& p : anchor) {
          CHECK((p - prev).norm() <= max_step);
          prev = p;
        }
      }
    }
  }
  CHECK(stops > 50);
}

TEST_CASE("infeasible configs are rejected") {
  SceneConfig cfg;
  cfg.intents.clear();
  CHECK_THROWS_AS(generate_scene(1, cfg), ConfigError);
  SceneConfig bad;
  bad.min_agents = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = SceneConfig{};
  bad.max_agents = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = SceneConfig{};
  bad.min_agents = 4;
  bad.max_agents = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("restricted intent set is respected") {
  SceneConfig cfg;
  cfg.intents = {Intent::kLeft};
  for (int i = 0; i < 50; ++i) {
    for (const auto& a : generate_scene(scene_seed(3, i), cfg, i).agents) CHECK(a.intent == Intent::kLeft);
  }
}

TEST_CASE("exact oracle puts a zero-error anchor first") {
  SceneConfig cfg;
  PriorConfig pc;
  pc.noise_level = 0.0;
  pc.accuracy = 1.0;
  for (int i = 0; i < 100; ++i) {
    const Scene s = generate_scene(scene_seed(8, i), cfg, i);
    const auto prior = prior_oracle(s, pc, cfg);
    for (std::size_t a = 0; a < s.agents.size(); ++a) {
      const auto& sc = prior.scores[a];
      const auto best = static_cast<std::size_t>(std::max_element(sc.begin(), sc.end()) - sc.begin());
      CHECK(ade(prior.anchors[a][best], s.agents[a].future) == 0.0);
    }
  }
}

TEST_CASE("disabled oracle gives uniform scores and no anchors") {
  SceneConfig cfg;
  PriorConfig pc;
  pc.enabled = false;
  const Scene s = generate_scene(4, cfg);
  const auto prior = prior_oracle(s, pc, cfg);
  for (std::size_t a = 0; a < s.agents.size(); ++a) {
    CHECK(prior.anchors[a].empty());
    for (double p : prior.scores[a]) CHECK(p == doctest::Approx(1.0 / 6.0).epsilon(1e-15));
  }
}

TEST_CASE("oracle accuracy frequency") {
  SceneConfig cfg;
  PriorConfig pc;
  long hits = 0, total = 0;
  for (int i = 0; i < 10000; ++i) {
    const Scene s = generate_scene(scene_seed(21, i), cfg, i);
    const auto prior = prior_oracle(s, pc, cfg);
    for (std::size_t a = 0; a < s.agents.size(); ++a) {
      const auto& sc = prior.scores[a];
      const auto best = static_cast<std::size_t>(std::max_element(sc.begin(), sc.end()) - sc.begin());
      hits += prior.anchor_intents[a][best] == s.agents[a].intent;
      ++total;
    }
  }
  const double rate = static_cast<double>(hits) / static_cast<double>(total);
  CAPTURE(rate);
  CHECK(std::abs(rate - 0.7) <= 0.02);
}

TEST_CASE("contexts are deterministic and translation invariant") {
  SceneConfig cfg;
  ContextConfig cc;
  const Scene s = generate_scene(77, cfg);
  const auto a = encode_context(s, cc, cfg.history_steps, cfg.polyline_points);
  const auto b = encode_context(s, cc, cfg.history_steps, cfg.polyline_points);
  const auto t = encode_context(translate_scene(s, {10.0, 10.0}), cc, cfg.history_steps, cfg.polyline_points);
  REQUIRE(a.size() == s.agents.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].flat() == b[i].flat());
    const auto fa = a[i].flat(), ft = t[i].flat();
    REQUIRE(fa.size() == ft.size());
    double worst = 0.0;
    for (std::size_t j = 0; j < fa.size(); ++j) worst = std::max(worst, std::abs(fa[j] - ft[j]));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("fixed width contexts and the padding context") {
  SceneConfig cfg;
  ContextConfig cc;
  Scene s = generate_scene(12, cfg);
  const auto width = encode_context(s, cc, cfg.history_steps, cfg.polyline_points)[0].flat().size();
  s.agents[0].history.clear();
  const auto ctx = encode_context(s, cc, cfg.history_steps, cfg.polyline_points);
  CHECK_FALSE(ctx[0].valid);
  const auto flat = ctx[0].flat();
  CHECK(flat.size() == width);
  for (double v : flat) {
    CHECK(std::isfinite(v));
    CHECK(v == 0.0);
  }
  for (std::size_t i = 1; i < ctx.size(); ++i) {
    CHECK(ctx[i].valid);
    CHECK(ctx[i].flat().size() == width);
    for (double v : ctx[i].flat()) CHECK(std::isfinite(v));
  }
}

TEST_CASE("local futures round trip through the agent frame") {
  SceneConfig cfg;
  const Scene s = generate_scene(13, cfg);
  for (const auto& a : s.agents) {
    const auto frame = agent_frame(a);
    const Eigen::RowVectorXd flat = flatten_local(a.future, frame);
    const auto back = unflatten_global({flat.data(), static_cast<std::size_t>(flat.size())}, frame);
    CHECK(ade(back, a.future) < 1e-9);
  }
}

TEST_CASE("scene json lines round trip") {
  SceneConfig cfg;
  std::vector<Scene> scenes;
  for (int i = 0; i < 5; ++i) scenes.push_back(generate_scene(scene_seed(2, i), cfg, i));
  std::stringstream io;
  write_scenes_jsonl(io, scenes);
  const auto back = read_scenes_jsonl(io);
  REQUIRE(back.size() == scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) CHECK(same_scene(scenes[i], back[i]));
  CHECK(intent_from_string(to_string(Intent::kRight)) == Intent::kRight);
  CHECK_THROWS_AS(intent_from_string("reverse"), ConfigError);
}

TEST_CASE("split scene ids are disjoint") {
  SceneConfig cfg;
  std::set<std::int64_t> seen;
  std::set<std::uint64_t> seeds;
  std::size_t count = 0;
  for (Split sp : {Split::kTrain, Split::kVal, Split::kTest}) {
    for (const auto& s : generate_split(3, sp, 200, cfg)) {
      seen.insert(s.scene_id);
      seeds.insert(s.seed);
      ++count;
    }
  }
  CHECK(seen.size() == count);
  CHECK(seeds.size() == count);
}
