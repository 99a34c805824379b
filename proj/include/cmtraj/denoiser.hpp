#pragma once

// Conditional consistency function f(x, sigma, C) = c_skip x + c_out F(x, sigma, C),
// with F a stack of composite attention layers over agent-centric context tokens.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/optim.hpp"
#include "cmtraj/tensor.hpp"

namespace cmtraj {

inline constexpr double kSigmaData = 0.5;

double c_skip(double sigma, double sigma_min = 0.002);
double c_out(double sigma, double sigma_min = 0.002);
double c_in(double sigma, double sigma_data = kSigmaData);

/// cos/sin features of 0.25 ln(sigma) at geometric frequencies 1..16.
std::vector<double> fourier_features(double sigma, int dim);

struct DenoiserConfig {
  int latent_dim = 10;
  int model_dim = 64;
  int heads = 2;
  int layers = 3;
  int fourier_dim = 16;
  int mlp_ratio = 2;
  double sigma_min = 0.002;
  int history_feature_dim = 21;
  int map_feature_dim = 50;
  int neighbor_feature_dim = 15;

  void validate() const;
  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& j);
};

/// Condition tokens for a batch of scenes. Agents are numbered 0..A-1 across the
/// batch; scene_agents[s] is the agent range of scene s. Each *_spans[a] is the
/// agent's token range in the matching matrix.
struct ConditionBatch {
  std::vector<KeySpan> scene_agents;
  Matrix history;
  std::vector<KeySpan> history_spans;
  Matrix map;
  std::vector<KeySpan> map_spans;
  Matrix neighbors;
  std::vector<KeySpan> neighbor_spans;
  Matrix priors;                  // codec latents of prior anchors
  std::vector<double> prior_bias;  // log score per anchor row
  std::vector<KeySpan> prior_spans;

  int num_agents() const { return static_cast<int>(history_spans.size()); }
  int num_scenes() const { return static_cast<int>(scene_agents.size()); }
  void validate(const DenoiserConfig& config) const;
};

/// Projected keys/values of the condition tokens, reusable across modes and calls.
struct EncodedCondition {
  static constexpr int kKinds = 4;  // history, map, neighbors, priors
  int num_agents = 0;
  std::vector<KeySpan> scene_agents;
  std::array<std::vector<KeySpan>, kKinds> spans;
  std::array<std::vector<Tensor>, kKinds> keys;    // [kind][layer]
  std::array<std::vector<Tensor>, kKinds> values;  // [kind][layer]
  std::vector<double> prior_bias;
};

class Denoiser {
 public:
  Denoiser() = default;
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  /// Embeds and projects the condition tokens. Records a graph when grad is enabled.
  EncodedCondition encode(const ConditionBatch& batch) const;

  /// F(x, sigma, C). Rows of x are mode-major: row m * A + a is mode m of agent a.
  /// sigma holds one value per scene.
  Tensor network(const Tensor& x, std::span<const double> scene_sigma, const EncodedCondition& cond) const;

  /// f(x, sigma, C); increments the evaluation counter by modes * scenes.
  Tensor denoise(const Tensor& x, std::span<const double> scene_sigma, const EncodedCondition& cond) const;

  /// Convenience: encode + denoise.
  Tensor denoise(const Tensor& x, std::span<const double> scene_sigma, const ConditionBatch& batch) const;

  Denoiser clone() const;

  std::int64_t evaluations() const { return evaluations_; }
  std::int64_t calls() const { return calls_; }
  void reset_counters() const { evaluations_ = 0; calls_ = 0; }

  nlohmann::json to_json() const;
  static Denoiser from_json(const nlohmann::json& j);

 private:
  struct Linear {
    Tensor w, b;
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  };
  struct Norm {
    Tensor gain, bias;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
  };
  struct Embed {
    Linear in, out;
    Tensor operator()(const Tensor& x) const { return out(silu(in(x))); }
  };
  struct Attention {
    Norm norm;
    Linear q, k, v, o;
  };
  struct Layer {
    std::array<Attention, EncodedCondition::kKinds> cross;
    Attention self;
    Norm mlp_norm;
    Linear mlp_in, mlp_out;
  };

  Linear make_linear(const std::string& name, int in, int out, std::uint64_t& stream, bool zero = false);
  Norm make_norm(const std::string& name, int dim);
  void build(std::uint64_t seed);

  DenoiserConfig config_;
  ParameterSet params_;
  std::array<Embed, EncodedCondition::kKinds> embed_;
  Linear input_;
  std::vector<Layer> layers_;
  Norm out_norm_;
  Linear output_;
  mutable std::int64_t evaluations_ = 0;
  mutable std::int64_t calls_ = 0;
};

/// teacher <- alpha * teacher + (1 - alpha) * student, applied to leaf values (no graph).
void ema_update(ParameterSet& teacher, const ParameterSet& student, double alpha);

}  // namespace cmtraj
