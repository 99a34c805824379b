#include "cmtraj/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "cmtraj/errors.hpp"
#include "cmtraj/metrics.hpp"
#include "cmtraj/sampler.hpp"

namespace cmtraj {

std::string to_string(Fusion fusion) {
  switch (fusion) {
    case Fusion::kNone: return "NF";
    case Fusion::kFull: return "FF";
    case Fusion::kRandom2: return "R2";
    case Fusion::kProgressive: return "Prog";
    case Fusion::kMidEnd: return "M+E";
  }
  return "M+E";
}

Fusion fusion_from_string(const std::string& name) {
  if (name == "NF") return Fusion::kNone;
  if (name == "FF") return Fusion::kFull;
  if (name == "R2") return Fusion::kRandom2;
  if (name == "Prog") return Fusion::kProgressive;
  if (name == "M+E" || name == "ME") return Fusion::kMidEnd;
  throw ConfigError("unknown fusion strategy '" + name + "' (expected NF, FF, R2, Prog or M+E)");
}

int progressive_count(int epoch) {
  require(epoch >= 1, "progressive_count: epochs are 1-based");
  return std::max(2, 10 - 2 * ((epoch - 1) / 10));
}

FusionMask progressive_mask(int epoch, int future_steps) {
  const int count = std::min(progressive_count(epoch), future_steps);
  FusionMask mask(static_cast<std::size_t>(future_steps), 0.0);
  for (int j = 1; j <= count; ++j) {
    const long idx = std::lround(static_cast<double>(j) * future_steps / count) - 1;
    mask[static_cast<std::size_t>(idx)] = 1.0;
  }
  return mask;
}

FusionMask mid_end_mask(int future_steps) {
  require(future_steps >= 2, "mid_end_mask: need at least two waypoints");
  FusionMask mask(static_cast<std::size_t>(future_steps), 0.0);
  mask[static_cast<std::size_t>(future_steps / 2 - 1)] = 1.0;
  mask[static_cast<std::size_t>(future_steps - 1)] = 1.0;
  return mask;
}

FusionMask fusion_mask(Fusion fusion, int future_steps, int epoch, Rng& rng) {
  require(future_steps >= 2, "fusion_mask: need at least two waypoints");
  switch (fusion) {
    case Fusion::kNone: return FusionMask(static_cast<std::size_t>(future_steps), 0.0);
    case Fusion::kFull: return FusionMask(static_cast<std::size_t>(future_steps), 1.0);
    case Fusion::kMidEnd: return mid_end_mask(future_steps);
    case Fusion::kProgressive: return progressive_mask(epoch, future_steps);
    case Fusion::kRandom2: {
      FusionMask mask(static_cast<std::size_t>(future_steps), 0.0);
      const int i = rng.uniform_int(0, future_steps - 1);
      int j = rng.uniform_int(0, future_steps - 2);
      if (j >= i) ++j;
      mask[static_cast<std::size_t>(i)] = 1.0;
      mask[static_cast<std::size_t>(j)] = 1.0;
      return mask;
    }
  }
  return mid_end_mask(future_steps);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (modes < 1) throw ConfigError("train: modes (K) must be >= 1");
  if (ema < 0.0 || ema > 1.0) throw ConfigError("train: ema must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (teacher.q < 1) throw ConfigError("train: q must be >= 1");
  if (noise.base_N < 2) throw ConfigError("train: base_N must be >= 2");
  if (!(noise.sigma_min > 0.0 && noise.sigma_min < noise.sigma_max)) {
    throw ConfigError("train: need 0 < sigma_min < sigma_max");
  }
  if (!(noise.spread > 0.0)) throw ConfigError("train: lognormal spread must be positive");
  if (!(optimizer.learning_rate > 0.0) || optimizer.weight_decay < 0.0) {
    throw ConfigError("train: learning rate must be positive and weight decay non-negative");
  }
  if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be positive");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"epochs", epochs},
          {"modes", modes},
          {"ema", ema},
          {"fusion", to_string(fusion)},
          {"schedule_mode", to_string(teacher.mode)},
          {"q", teacher.q},
          {"k", teacher.k},
          {"b", teacher.b},
          {"sigma_min", noise.sigma_min},
          {"sigma_max", noise.sigma_max},
          {"rho", noise.rho},
          {"mu", noise.mu},
          {"spread", noise.spread},
          {"base_N", noise.base_N},
          {"batch_size", batch_size},
          {"learning_rate", optimizer.learning_rate},
          {"weight_decay", optimizer.weight_decay},
          {"beta1", optimizer.beta1},
          {"beta2", optimizer.beta2},
          {"epsilon", optimizer.epsilon},
          {"clip_norm", clip_norm},
          {"latent_selection", latent_selection},
          {"share_noise", share_noise},
          {"seed", seed},
          {"val_every", val_every},
          {"val_scenes", val_scenes}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.modes = j.value("modes", c.modes);
  c.ema = j.value("ema", c.ema);
  c.fusion = fusion_from_string(j.value("fusion", to_string(c.fusion)));
  c.teacher.mode = teacher_mode_from_string(j.value("schedule_mode", to_string(c.teacher.mode)));
  c.teacher.q = j.value("q", c.teacher.q);
  c.teacher.k = j.value("k", c.teacher.k);
  c.teacher.b = j.value("b", c.teacher.b);
  c.noise.sigma_min = j.value("sigma_min", c.noise.sigma_min);
  c.noise.sigma_max = j.value("sigma_max", c.noise.sigma_max);
  c.noise.rho = j.value("rho", c.noise.rho);
  c.noise.mu = j.value("mu", c.noise.mu);
  c.noise.spread = j.value("spread", c.noise.spread);
  c.noise.base_N = j.value("base_N", c.noise.base_N);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
  c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
  c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
  c.optimizer.epsilon = j.value("epsilon", c.optimizer.epsilon);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.latent_selection = j.value("latent_selection", c.latent_selection);
  c.share_noise = j.value("share_noise", c.share_noise);
  c.seed = j.value("seed", c.seed);
  c.val_every = j.value("val_every", c.val_every);
  c.val_scenes = j.value("val_scenes", c.val_scenes);
  c.teacher.max_epochs = c.epochs;
  c.validate();
  return c;
}

Matrix noisy_modes(const Matrix& x0, std::span<const double> agent_sigma, const Matrix& eps, int modes) {
  const Index a = x0.rows();
  require(static_cast<Index>(agent_sigma.size()) == a, "noisy_modes: one sigma per agent");
  require(eps.rows() == modes * a && eps.cols() == x0.cols(), "noisy_modes: eps must be (K*A) x latent_dim");
  Matrix out(eps.rows(), eps.cols());
  for (int m = 0; m < modes; ++m) {
    for (Index i = 0; i < a; ++i) out.row(m * a + i) = x0.row(i) + agent_sigma[static_cast<std::size_t>(i)] * eps.row(m * a + i);
  }
  return out;
}

Matrix fuse_teacher(const Matrix& teacher_latent, const Matrix& future_local, const FusionMask& mask,
                    const LatentCodec& codec) {
  require(teacher_latent.rows() == future_local.rows(), "fuse_teacher: row counts differ");
  require(future_local.cols() == 2 * static_cast<Index>(mask.size()), "fuse_teacher: mask length != T_f");
  Matrix traj = codec.decode(teacher_latent);
  for (std::size_t w = 0; w < mask.size(); ++w) {
    if (mask[w] == 0.0) continue;
    const Index c = 2 * static_cast<Index>(w);
    traj.col(c) = future_local.col(c);
    traj.col(c + 1) = future_local.col(c + 1);
  }
  return codec.encode(traj);
}

double consistency_weight(double sigma_t, double sigma_r) {
  require(sigma_t > sigma_r && sigma_r >= 0.0, "consistency_weight: need sigma_t > sigma_r >= 0");
  return 1.0 / (sigma_t - sigma_r);
}

Tensor consistency_loss(const Tensor& student, const Matrix& teacher, std::span<const double> row_weight) {
  require(student.rows() == teacher.rows() && student.cols() == teacher.cols(), "consistency_loss: shape mismatch");
  require(static_cast<Index>(row_weight.size()) == student.rows(), "consistency_loss: one weight per row");
  return sum(scale_rows(row_norm(sub(student, Tensor(teacher))), row_weight));
}

Trainer::Trainer(TrainConfig config, const DenoiserConfig& model, LatentCodec codec)
    : config_(std::move(config)),
      codec_(std::move(codec)),
      student_(model, mix_seed(config_.seed, 1)),
      teacher_(student_.clone()),
      optimizer_(config_.optimizer, student_.params().tensors()),
      rng_(mix_seed(config_.seed, 2)) {
  config_.teacher.max_epochs = config_.epochs;
  config_.validate();
  if (codec_.latent_dim() != model.latent_dim) throw ConfigError("trainer: codec and model latent dims differ");
  for (auto& t : teacher_.params().tensors()) t.set_requires_grad(false);
}

std::vector<int> Trainer::select_modes(const Matrix& outputs, std::span<const PreparedScene* const> batch,
                                       const Matrix& futures, const Matrix& latents, int modes) const {
  const Index a_total = latents.rows();
  std::vector<int> best(batch.size(), 0);
  if (modes == 1) return best;
  const Matrix decoded = config_.latent_selection ? Matrix() : codec_.decode(outputs);
  Index a0 = 0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const Index na = batch[s]->num_agents();
    double best_err = 0.0;
    for (int m = 0; m < modes; ++m) {
      double err = 0.0;
      for (Index a = a0; a < a0 + na; ++a) {
        const Index row = m * a_total + a;
        if (config_.latent_selection) {
          err += (outputs.row(row) - latents.row(a)).norm();
        } else {
          err += ade_flat(std::span<const double>(decoded.data() + row * decoded.cols(), decoded.cols()),
                          std::span<const double>(futures.data() + a * futures.cols(), futures.cols()));
        }
      }
      if (m == 0 || err < best_err) {
        best_err = err;
        best[s] = m;
      }
    }
    a0 += na;
  }
  return best;
}

Tensor Trainer::batch_loss(std::span<const PreparedScene* const> batch, int epoch, const TimestepSampler& sampler,
                          const SigmaSchedule& sigmas, const FusionMask& mask) {
  const int K = config_.modes;
  const int N = sigmas.steps;
  const std::size_t S = batch.size();
  const ConditionBatch cb = make_condition_batch(batch);
  const Index A = cb.num_agents();
  const Matrix futures = stack_futures(batch);
  const Matrix x0 = stack_latents(batch);
  const Index L = x0.cols();

  std::vector<double> sig_t(S), sig_r(S), agent_t(static_cast<std::size_t>(A)), agent_r(static_cast<std::size_t>(A));
  std::vector<int> r_idx(S);
  bool any_teacher = false;
  int with_teacher = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const int t = sample_student_index(sampler, rng_);
    const int r = select_teacher_index(t, epoch, config_.teacher, N);
    r_idx[s] = r;
    sig_t[s] = sigmas[t];
    sig_r[s] = sigmas[r];
    if (r >= 1) {
      any_teacher = true;
      ++with_teacher;
    }
    for (Index a = cb.scene_agents[s].begin; a < cb.scene_agents[s].end; ++a) {
      agent_t[static_cast<std::size_t>(a)] = sig_t[s];
      agent_r[static_cast<std::size_t>(a)] = sig_r[s];
    }
  }
  last_teacher_fraction_ = static_cast<double>(with_teacher) / static_cast<double>(S);

  // One epsilon per mode, shared by student and teacher inputs.
  Matrix eps(K * A, L);
  for (Index i = 0; i < eps.size(); ++i) eps.data()[i] = rng_.normal();
  const Matrix x_t = noisy_modes(x0, agent_t, eps, K);

  const EncodedCondition enc = student_.encode(cb);
  std::vector<int> k_student(S, 0);
  if (K > 1) {
    NoGradGuard no_grad;
    const Matrix out = student_.denoise(Tensor(x_t), sig_t, enc).value();
    k_student = select_modes(out, batch, futures, x0, K);
  }
  Matrix x_sel(A, L);
  for (std::size_t s = 0; s < S; ++s) {
    for (Index a = cb.scene_agents[s].begin; a < cb.scene_agents[s].end; ++a) x_sel.row(a) = x_t.row(k_student[s] * A + a);
  }
  const Tensor student_out = student_.denoise(Tensor(x_sel), sig_t, enc);

  // Teacher branch: constants only. x_{sigma_0} = x0, so r = 0 needs no network call.
  Matrix teacher_latent = x0;
  if (config_.fusion != Fusion::kFull && any_teacher) {
    NoGradGuard no_grad;
    std::vector<double> sig_eval(S), agent_eval(static_cast<std::size_t>(A));
    for (std::size_t s = 0; s < S; ++s) sig_eval[s] = r_idx[s] >= 1 ? sig_r[s] : config_.noise.sigma_min;
    for (std::size_t s = 0; s < S; ++s) {
      for (Index a = cb.scene_agents[s].begin; a < cb.scene_agents[s].end; ++a) agent_eval[static_cast<std::size_t>(a)] = sig_eval[s];
    }
    Matrix teacher_eps = eps;
    if (!config_.share_noise) {
      for (Index i = 0; i < teacher_eps.size(); ++i) teacher_eps.data()[i] = rng_.normal();
    }
    const Matrix x_r = noisy_modes(x0, agent_eval, teacher_eps, K);
    const EncodedCondition tenc = teacher_.encode(cb);
    const Matrix out = teacher_.denoise(Tensor(x_r), sig_eval, tenc).value();
    const std::vector<int> k_teacher = select_modes(out, batch, futures, x0, K);
    for (std::size_t s = 0; s < S; ++s) {
      if (r_idx[s] < 1) continue;
      for (Index a = cb.scene_agents[s].begin; a < cb.scene_agents[s].end; ++a) {
        teacher_latent.row(a) = out.row(k_teacher[s] * A + a);
      }
    }
  }
  const Matrix target = fuse_teacher(teacher_latent, futures, mask, codec_);

  std::vector<double> weights(static_cast<std::size_t>(A));
  for (std::size_t s = 0; s < S; ++s) {
    const double w = consistency_weight(sig_t[s], sig_r[s]);
    const KeySpan ag = cb.scene_agents[s];
    for (Index a = ag.begin; a < ag.end; ++a) {
      weights[static_cast<std::size_t>(a)] = w / static_cast<double>((ag.end - ag.begin) * static_cast<Index>(S));
    }
  }
  return consistency_loss(student_out, target, weights);
}

double Trainer::probe_loss(std::span<const PreparedScene* const> batch, int epoch, const TimestepSampler& sampler,
                           const SigmaSchedule& sigmas, const FusionMask& mask, std::uint64_t seed) {
  Rng saved = rng_;
  rng_ = Rng(seed);
  NoGradGuard no_grad;
  const double value = batch_loss(batch, epoch, sampler, sigmas, mask).item();
  rng_ = saved;
  return value;
}

double Trainer::step(std::span<const PreparedScene* const> batch, int epoch, const TimestepSampler& sampler,
                     const SigmaSchedule& sigmas, const FusionMask& mask) {
  const Tensor loss = batch_loss(batch, epoch, sampler, sigmas, mask);
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericalError("training loss is not finite at epoch " + std::to_string(epoch));

  auto params = student_.params().tensors();
  auto grads = grad(loss, params);
  clip_grad_norm(grads, config_.clip_norm);
  optimizer_.step(params, grads);
  ema_update(teacher_.params(), student_.params(), config_.ema);
  return value;
}

TrainResult Trainer::fit(const std::vector<PreparedScene>& train, const std::vector<PreparedScene>& val,
                         const EpochCallback& on_epoch) {
  require(!train.empty(), "Trainer::fit: empty training set");
  const int tf = static_cast<int>(train.front().future_local.cols() / 2);
  TrainResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = static_cast<std::size_t>(config_.batch_size);
  for (int epoch = 1; epoch <= config_.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const int N = curriculum_N(epoch, config_.epochs, config_.noise.base_N);
    const SigmaSchedule sigmas = build_sigmas(N, config_.noise.sigma_min, config_.noise.sigma_max, config_.noise.rho);
    const TimestepSampler sampler = build_pmf(sigmas, config_.noise.mu, config_.noise.spread);
    std::shuffle(order.begin(), order.end(), rng_.engine());
    double total = 0.0, teacher_share = 0.0;
    int batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      std::vector<const PreparedScene*> batch;
      for (std::size_t i = begin; i < std::min(order.size(), begin + bs); ++i) batch.push_back(&train[order[i]]);
      const FusionMask mask = fusion_mask(config_.fusion, tf, epoch, rng_);
      total += step(batch, epoch, sampler, sigmas, mask);
      teacher_share += last_teacher_fraction_;
      ++batches;
      ++result.steps;
    }
    EpochLog log;
    log.epoch = epoch;
    log.N = N;
    log.mean_loss = total / batches;
    log.teacher_fraction = teacher_share / batches;
    if (config_.val_every > 0 && !val.empty() && (epoch % config_.val_every == 0 || epoch == config_.epochs)) {
      std::vector<PreparedScene> subset(val.begin(), val.begin() + std::min<std::size_t>(val.size(), config_.val_scenes));
      std::vector<Scene> gt;
      for (const auto& p : subset) gt.push_back(p.scene);
      SamplerConfig sc;
      sc.modes = config_.modes;
      sc.seed = mix_seed(config_.seed, 3);
      sc.grid_steps = config_.noise.base_N * 4;
      sc.sigma_min = config_.noise.sigma_min;
      sc.sigma_max = config_.noise.sigma_max;
      sc.rho = config_.noise.rho;
      const auto rep = evaluate_predictions(sample_predictions(student_, codec_, subset, sc), gt, MetricConfig{});
      log.val_ade = rep.ade_k;
      log.val_fde = rep.fde_k;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log, student_, teacher_);
  }
  result.student = student_;
  result.teacher = teacher_;
  return result;
}

std::uint64_t checkpoint_hash(const Denoiser& student, const Denoiser& teacher) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&](const ParameterSet& ps) {
    for (const auto& t : ps.tensors()) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.value().data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(t.size()) * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    }
  };
  feed(student.params());
  feed(teacher.params());
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

nlohmann::json checkpoint_json(const Denoiser& student, const Denoiser& teacher, const LatentCodec& codec,
                               const nlohmann::json& meta) {
  return {{"format", "cmtraj-checkpoint"},
          {"format_version", kCheckpointFormatVersion},
          {"hash", hex64(checkpoint_hash(student, teacher))},
          {"meta", meta},
          {"student", student.to_json()},
          {"teacher", teacher.to_json()},
          {"codec", codec.to_json()}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "cmtraj-checkpoint" ||
      j.value("format_version", 0) != kCheckpointFormatVersion) {
    throw ConfigError("checkpoint: unexpected format or version");
  }
  Checkpoint c{Denoiser::from_json(j.at("student")), Denoiser::from_json(j.at("teacher")),
               LatentCodec::from_json(j.at("codec")), j.value("meta", nlohmann::json::object())};
  for (auto& t : c.teacher.params().tensors()) t.set_requires_grad(false);
  if (j.contains("hash") && j.at("hash").get<std::string>() != hex64(checkpoint_hash(c.student, c.teacher))) {
    throw ConfigError("checkpoint: parameter hash mismatch");
  }
  return c;
}

}  // namespace cmtraj
