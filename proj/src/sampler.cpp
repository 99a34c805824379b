#include "cmtraj/sampler.hpp"

#include <chrono>
#include <cmath>

#include "cmtraj/errors.hpp"
#include "cmtraj/random.hpp"

namespace cmtraj {

void SamplerConfig::validate() const {
  if (nfe < 1) throw ConfigError("sampler: nfe must be >= 1");
  if (modes < 1) throw ConfigError("sampler: modes must be >= 1");
  if (grid_steps < 2) throw ConfigError("sampler: grid_steps must be >= 2");
  if (nfe > grid_steps) throw ConfigError("sampler: nfe cannot exceed grid_steps");
  if (batch_size < 1) throw ConfigError("sampler: batch_size must be >= 1");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw ConfigError("sampler: need 0 < sigma_min < sigma_max");
}

nlohmann::json SamplerConfig::to_json() const {
  return {{"nfe", nfe},           {"modes", modes},          {"seed", seed},
          {"resample_noise", resample_noise}, {"grid_steps", grid_steps}, {"sigma_min", sigma_min},
          {"sigma_max", sigma_max}, {"rho", rho},            {"batch_size", batch_size}};
}

SamplerConfig SamplerConfig::from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.nfe = j.value("nfe", c.nfe);
  c.modes = j.value("modes", c.modes);
  c.seed = j.value("seed", c.seed);
  c.resample_noise = j.value("resample_noise", c.resample_noise);
  c.grid_steps = j.value("grid_steps", c.grid_steps);
  c.sigma_min = j.value("sigma_min", c.sigma_min);
  c.sigma_max = j.value("sigma_max", c.sigma_max);
  c.rho = j.value("rho", c.rho);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.validate();
  return c;
}

std::vector<int> tau_indices(int nfe, int grid_steps) {
  require(nfe >= 1 && grid_steps >= 2 && nfe <= grid_steps, "tau_indices: need 1 <= nfe <= grid_steps");
  std::vector<int> tau(static_cast<std::size_t>(nfe) + 1, 0);
  tau[static_cast<std::size_t>(nfe)] = grid_steps;
  if (nfe >= 2) {
    tau[1] = 1;
    for (int n = 2; n < nfe; ++n) {
      tau[static_cast<std::size_t>(n)] = static_cast<int>(std::lround(static_cast<double>(n) / nfe * grid_steps));
    }
  }
  for (std::size_t i = 1; i < tau.size(); ++i) require(tau[i] > tau[i - 1], "tau_indices: indices collide");
  return tau;
}

std::vector<double> tau_sigmas(const SamplerConfig& config) {
  const auto grid = build_sigmas(config.grid_steps, config.sigma_min, config.sigma_max, config.rho);
  std::vector<double> out;
  for (int idx : tau_indices(config.nfe, config.grid_steps)) out.push_back(grid[idx]);
  return out;
}

Matrix run_sampler(const Denoiser& model, const EncodedCondition& cond, const Matrix& x_init, const Matrix& eps,
                   const std::vector<double>& sigmas, const std::vector<Matrix>& fresh_eps) {
  require(sigmas.size() >= 2 && sigmas.front() == 0.0, "run_sampler: sigma list must start at 0");
  const int steps = static_cast<int>(sigmas.size()) - 1;
  require(fresh_eps.empty() || static_cast<int>(fresh_eps.size()) >= steps - 1, "run_sampler: too few noise draws");
  NoGradGuard no_grad;
  const std::size_t scenes = cond.scene_agents.size();
  Matrix x = x_init;
  for (int i = steps; i >= 1; --i) {
    const std::vector<double> sig(scenes, sigmas[static_cast<std::size_t>(i)]);
    Matrix x0 = model.denoise(Tensor(x), sig, cond).value();
    if (i == 1) return x0;  // sigma_{tau_0} = 0: no re-injection after the last call
    const Matrix& e = fresh_eps.empty() ? eps : fresh_eps[static_cast<std::size_t>(steps - i)];
    x = x0 + sigmas[static_cast<std::size_t>(i - 1)] * e;
  }
  return x;
}

std::vector<double> mode_probabilities(const std::vector<Trajectory>& modes, const std::vector<Trajectory>& anchors,
                                       const std::vector<double>& scores) {
  const std::size_t k = modes.size();
  std::vector<double> p(k, 1.0 / static_cast<double>(k));
  if (anchors.empty()) return p;
  require(anchors.size() == scores.size(), "mode_probabilities: one score per anchor");
  double total = 0.0;
  for (std::size_t m = 0; m < k; ++m) {
    std::size_t nearest = 0;
    double best = ade(modes[m], anchors[0]);
    for (std::size_t j = 1; j < anchors.size(); ++j) {
      const double e = ade(modes[m], anchors[j]);
      if (e < best) {
        best = e;
        nearest = j;
      }
    }
    p[m] = scores[nearest];
    total += p[m];
  }
  if (total <= 0.0) return std::vector<double>(k, 1.0 / static_cast<double>(k));
  for (double& v : p) v /= total;
  return p;
}

PredictionSet sample_predictions(const Denoiser& model, const LatentCodec& codec,
                                 const std::vector<PreparedScene>& scenes, const SamplerConfig& config) {
  config.validate();
  if (codec.latent_dim() != model.config().latent_dim) {
    throw ConfigError("checkpoint latent_dim " + std::to_string(model.config().latent_dim) +
                      " does not match codec latent_dim " + std::to_string(codec.latent_dim()));
  }
  const auto start = std::chrono::steady_clock::now();
  const auto sigmas = tau_sigmas(config);
  const int steps = config.nfe;
  const int L = codec.latent_dim();
  const int K = config.modes;
  PredictionSet out;
  out.nfe = config.nfe;
  const std::int64_t evals_before = model.evaluations();

  for (std::size_t begin = 0; begin < scenes.size(); begin += static_cast<std::size_t>(config.batch_size)) {
    const std::size_t end = std::min(scenes.size(), begin + static_cast<std::size_t>(config.batch_size));
    std::vector<const PreparedScene*> batch;
    for (std::size_t i = begin; i < end; ++i) batch.push_back(&scenes[i]);
    const ConditionBatch cb = make_condition_batch(batch);
    const Index A = cb.num_agents();
    EncodedCondition cond;
    {
      NoGradGuard no_grad;
      cond = model.encode(cb);
    }
    Matrix x_init(K * A, L), eps(K * A, L);
    std::vector<Matrix> fresh(config.resample_noise ? static_cast<std::size_t>(std::max(0, steps - 1)) : 0,
                              Matrix(K * A, L));
    // Noise is drawn per scene so results do not depend on batch composition.
    for (std::size_t s = 0; s < batch.size(); ++s) {
      Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(batch[s]->scene.scene_id)));
      const KeySpan ag = cb.scene_agents[s];
      for (int m = 0; m < K; ++m) {
        for (Index a = ag.begin; a < ag.end; ++a) {
          for (int c = 0; c < L; ++c) x_init(m * A + a, c) = config.sigma_max * rng.normal();
          for (int c = 0; c < L; ++c) eps(m * A + a, c) = rng.normal();
          for (auto& f : fresh) {
            for (int c = 0; c < L; ++c) f(m * A + a, c) = rng.normal();
          }
        }
      }
    }
    const Matrix latents = run_sampler(model, cond, x_init, eps, sigmas, fresh);
    const Matrix local = codec.decode(latents);

    for (std::size_t s = 0; s < batch.size(); ++s) {
      const PreparedScene& ps = *batch[s];
      const KeySpan ag = cb.scene_agents[s];
      ScenePrediction sp;
      sp.scene_id = ps.scene.scene_id;
      sp.modes.assign(static_cast<std::size_t>(K), {});
      for (int m = 0; m < K; ++m) {
        for (Index a = ag.begin; a < ag.end; ++a) {
          const Index row = m * A + a;
          const auto& frame = ps.contexts[static_cast<std::size_t>(a - ag.begin)].frame;
          sp.modes[static_cast<std::size_t>(m)].push_back(
              unflatten_global(std::span<const double>(local.data() + row * local.cols(), local.cols()), frame));
        }
      }
      for (int a = 0; a < ps.num_agents(); ++a) {
        std::vector<Trajectory> agent_modes;
        for (int m = 0; m < K; ++m) agent_modes.push_back(sp.modes[static_cast<std::size_t>(m)][static_cast<std::size_t>(a)]);
        sp.probs.push_back(mode_probabilities(agent_modes, ps.prior.anchors[static_cast<std::size_t>(a)],
                                              ps.prior.scores[static_cast<std::size_t>(a)]));
      }
      out.scenes.push_back(std::move(sp));
    }
  }
  out.evaluations = model.evaluations() - evals_before;
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

}  // namespace cmtraj
