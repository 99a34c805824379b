#include "cmtraj/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "cmtraj/errors.hpp"

namespace cmtraj {

double ade(const Trajectory& pred, const Trajectory& gt) {
  require(pred.size() == gt.size() && !gt.empty(), "ade: waypoint counts differ or are zero");
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); ++i) total += (pred[i] - gt[i]).norm();
  return total / static_cast<double>(gt.size());
}

double fde(const Trajectory& pred, const Trajectory& gt) {
  require(pred.size() == gt.size() && !gt.empty(), "fde: waypoint counts differ or are zero");
  return (pred.back() - gt.back()).norm();
}

double ade_flat(std::span<const double> pred, std::span<const double> gt) {
  require(pred.size() == gt.size() && gt.size() >= 2 && gt.size() % 2 == 0, "ade_flat: length mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < gt.size(); i += 2) total += std::hypot(pred[i] - gt[i], pred[i + 1] - gt[i + 1]);
  return total / static_cast<double>(gt.size() / 2);
}

double fde_flat(std::span<const double> pred, std::span<const double> gt) {
  require(pred.size() == gt.size() && gt.size() >= 2 && gt.size() % 2 == 0, "fde_flat: length mismatch");
  const std::size_t n = gt.size();
  return std::hypot(pred[n - 2] - gt[n - 2], pred[n - 1] - gt[n - 1]);
}

int best_of_k(const std::vector<Trajectory>& modes, const Trajectory& gt) {
  require(!modes.empty(), "best_of_k: K must be >= 1");
  int best = 0;
  double best_err = ade(modes[0], gt);
  for (std::size_t k = 1; k < modes.size(); ++k) {
    const double e = ade(modes[k], gt);
    if (e < best_err) {
      best_err = e;
      best = static_cast<int>(k);
    }
  }
  return best;
}

double min_ade(const std::vector<Trajectory>& modes, const Trajectory& gt) {
  require(!modes.empty(), "min_ade: K must be >= 1");
  double best = ade(modes[0], gt);
  for (const auto& m : modes) best = std::min(best, ade(m, gt));
  return best;
}

double min_fde(const std::vector<Trajectory>& modes, const Trajectory& gt) {
  require(!modes.empty(), "min_fde: K must be >= 1");
  double best = fde(modes[0], gt);
  for (const auto& m : modes) best = std::min(best, fde(m, gt));
  return best;
}

std::string to_string(BrierPenalty penalty) {
  return penalty == BrierPenalty::kSquaredComplement ? "(1-p)^2" : "1-p^2";
}

BrierPenalty brier_penalty_from_string(const std::string& name) {
  if (name == "(1-p)^2" || name == "squared_complement") return BrierPenalty::kSquaredComplement;
  if (name == "1-p^2" || name == "one_minus_square") return BrierPenalty::kOneMinusSquare;
  throw ConfigError("unknown brier penalty '" + name + "'");
}

double brier_penalty(double p, BrierPenalty form) {
  return form == BrierPenalty::kSquaredComplement ? (1.0 - p) * (1.0 - p) : 1.0 - p * p;
}

bool scene_collides(const std::vector<Trajectory>& agents, double threshold) {
  for (std::size_t i = 0; i < agents.size(); ++i) {
    for (std::size_t j = i + 1; j < agents.size(); ++j) {
      const std::size_t steps = std::min(agents[i].size(), agents[j].size());
      for (std::size_t t = 0; t < steps; ++t) {
        if ((agents[i][t] - agents[j][t]).norm() < threshold) return true;
      }
    }
  }
  return false;
}

std::vector<double> ScenePrediction::joint_probs() const {
  std::vector<double> joint(static_cast<std::size_t>(num_modes()), 0.0);
  if (probs.empty()) return joint;
  for (const auto& per_agent : probs) {
    for (std::size_t k = 0; k < joint.size(); ++k) joint[k] += per_agent[k];
  }
  for (double& p : joint) p /= static_cast<double>(probs.size());
  return joint;
}

nlohmann::json MetricReport::to_json() const {
  return {{"k", k},
          {"ade_1", ade_1},
          {"ade_k", ade_k},
          {"fde_1", fde_1},
          {"fde_k", fde_k},
          {"brier_fde_k", brier_fde_k},
          {"brier_form", brier_form},
          {"miss_rate_k", miss_rate_k},
          {"collision_rate", collision_rate},
          {"scene_count", scene_count},
          {"agent_count", agent_count},
          {"collision_scenes", collision_scenes},
          {"collision_excluded", collision_excluded},
          {"nfe", nfe}};
}

std::string MetricReport::csv_header() {
  return "k,ade_1,ade_k,fde_1,fde_k,brier_fde_k,brier_form,miss_rate_k,collision_rate,scene_count,agent_count,nfe";
}

std::string MetricReport::csv_row() const {
  std::ostringstream os;
  os << std::setprecision(8) << k << ',' << ade_1 << ',' << ade_k << ',' << fde_1 << ',' << fde_k << ','
     << brier_fde_k << ',' << brier_form << ',' << miss_rate_k << ',' << collision_rate << ',' << scene_count << ','
     << agent_count << ',' << nfe;
  return os.str();
}

MetricReport evaluate_predictions(const PredictionSet& preds, const std::vector<Scene>& scenes,
                                  const MetricConfig& config) {
  std::map<std::int64_t, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.scene_id] = &s;
  MetricReport rep;
  rep.brier_form = to_string(config.penalty);
  rep.nfe = preds.nfe;
  rep.wall_seconds = preds.wall_seconds;
  std::int64_t misses = 0, collisions = 0;
  for (const auto& sp : preds.scenes) {
    const auto it = by_id.find(sp.scene_id);
    if (it == by_id.end()) throw ConfigError("predictions reference unknown scene " + std::to_string(sp.scene_id));
    const Scene& scene = *it->second;
    const int k = sp.num_modes();
    if (k < 1) throw ConfigError("scene " + std::to_string(sp.scene_id) + " has no modes");
    if (sp.num_agents() != scene.num_agents() || static_cast<int>(sp.probs.size()) != scene.num_agents()) {
      throw ConfigError("scene " + std::to_string(sp.scene_id) + ": agent count mismatch");
    }
    if (rep.k == 0) rep.k = k;
    ++rep.scene_count;
    for (int a = 0; a < scene.num_agents(); ++a) {
      const Trajectory& gt = scene.agents[static_cast<std::size_t>(a)].future;
      const auto& p = sp.probs[static_cast<std::size_t>(a)];
      if (static_cast<int>(p.size()) != k ||
          std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) > 1e-9) {
        throw ConfigError("scene " + std::to_string(sp.scene_id) + ": mode probabilities must sum to 1");
      }
      std::vector<Trajectory> modes;
      for (int m = 0; m < k; ++m) modes.push_back(sp.modes[static_cast<std::size_t>(m)][static_cast<std::size_t>(a)]);
      const int top = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
      rep.ade_1 += ade(modes[static_cast<std::size_t>(top)], gt);
      rep.fde_1 += fde(modes[static_cast<std::size_t>(top)], gt);
      rep.ade_k += min_ade(modes, gt);
      int best_f = 0;
      double best_fde = fde(modes[0], gt);
      for (int m = 1; m < k; ++m) {
        const double f = fde(modes[static_cast<std::size_t>(m)], gt);
        if (f < best_fde) {
          best_fde = f;
          best_f = m;
        }
      }
      rep.fde_k += best_fde;
      rep.brier_fde_k += best_fde + brier_penalty(p[static_cast<std::size_t>(best_f)], config.penalty);
      if (best_fde > config.miss_threshold) ++misses;
      ++rep.agent_count;
    }
    if (scene.num_agents() < 2) {
      ++rep.collision_excluded;
    } else {
      const auto joint = sp.joint_probs();
      const auto top = static_cast<std::size_t>(std::max_element(joint.begin(), joint.end()) - joint.begin());
      ++rep.collision_scenes;
      if (scene_collides(sp.modes[top], config.collision_threshold)) ++collisions;
    }
  }
  if (rep.agent_count > 0) {
    const double n = static_cast<double>(rep.agent_count);
    rep.ade_1 /= n;
    rep.fde_1 /= n;
    rep.ade_k /= n;
    rep.fde_k /= n;
    rep.brier_fde_k /= n;
    rep.miss_rate_k = static_cast<double>(misses) / n;
  }
  if (rep.collision_scenes > 0) {
    rep.collision_rate = static_cast<double>(collisions) / static_cast<double>(rep.collision_scenes);
  }
  return rep;
}

void write_predictions_jsonl(std::ostream& out, const PredictionSet& preds) {
  for (const auto& sp : preds.scenes) {
    for (int a = 0; a < sp.num_agents(); ++a) {
      for (int m = 0; m < sp.num_modes(); ++m) {
        auto pts = nlohmann::json::array();
        for (const auto& p : sp.modes[static_cast<std::size_t>(m)][static_cast<std::size_t>(a)]) pts.push_back({p.x, p.y});
        nlohmann::json rec{{"scene_id", sp.scene_id},
                           {"agent_id", a},
                           {"mode_id", m},
                           {"probability", sp.probs[static_cast<std::size_t>(a)][static_cast<std::size_t>(m)]},
                           {"waypoints", std::move(pts)}};
        out << rec.dump() << '\n';
      }
    }
  }
}

PredictionSet read_predictions_jsonl(std::istream& in) {
  // scene_id -> agent -> mode -> (prob, trajectory)
  std::map<std::int64_t, std::map<int, std::map<int, std::pair<double, Trajectory>>>> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Trajectory t;
    for (const auto& p : j.at("waypoints")) t.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    records[j.at("scene_id").get<std::int64_t>()][j.at("agent_id").get<int>()][j.at("mode_id").get<int>()] = {
        j.at("probability").get<double>(), std::move(t)};
  }
  PredictionSet set;
  for (auto& [sid, agents] : records) {
    ScenePrediction sp;
    sp.scene_id = sid;
    const int na = static_cast<int>(agents.size());
    const int k = static_cast<int>(agents.begin()->second.size());
    sp.modes.assign(static_cast<std::size_t>(k), std::vector<Trajectory>(static_cast<std::size_t>(na)));
    sp.probs.assign(static_cast<std::size_t>(na), std::vector<double>(static_cast<std::size_t>(k), 0.0));
    int a_expect = 0;
    for (auto& [aid, modes] : agents) {
      if (aid != a_expect++ || static_cast<int>(modes.size()) != k) {
        throw ConfigError("predictions for scene " + std::to_string(sid) + " are incomplete");
      }
      int m_expect = 0;
      for (auto& [mid, rec] : modes) {
        if (mid != m_expect++) throw ConfigError("predictions for scene " + std::to_string(sid) + " skip a mode");
        sp.probs[static_cast<std::size_t>(aid)][static_cast<std::size_t>(mid)] = rec.first;
        sp.modes[static_cast<std::size_t>(mid)][static_cast<std::size_t>(aid)] = std::move(rec.second);
      }
    }
    set.scenes.push_back(std::move(sp));
  }
  return set;
}

}  // namespace cmtraj
