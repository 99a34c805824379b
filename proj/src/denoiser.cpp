#include "cmtraj/denoiser.hpp"

#include <cmath>

#include "cmtraj/errors.hpp"
#include "cmtraj/random.hpp"

namespace cmtraj {

double c_skip(double sigma, double sigma_min) {
  const double d = sigma - sigma_min;
  return 0.25 / (d * d + 0.25);
}

double c_out(double sigma, double sigma_min) {
  return 0.5 * (sigma - sigma_min) / std::sqrt(0.25 + sigma * sigma);
}

double c_in(double sigma, double sigma_data) {
  return 1.0 / std::sqrt(sigma * sigma + sigma_data * sigma_data);
}

std::vector<double> fourier_features(double sigma, int dim) {
  require(dim >= 2 && dim % 2 == 0, "fourier_features: dim must be even and >= 2");
  require(sigma > 0.0, "fourier_features: sigma must be positive");
  const int half = dim / 2;
  const double u = 0.25 * std::log(sigma);
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int j = 0; j < half; ++j) {
    const double freq = half > 1 ? std::pow(16.0, static_cast<double>(j) / (half - 1)) : 1.0;
    out[static_cast<std::size_t>(j)] = std::cos(freq * u);
    out[static_cast<std::size_t>(half + j)] = std::sin(freq * u);
  }
  return out;
}

void DenoiserConfig::validate() const {
  if (latent_dim < 1 || model_dim < 1 || layers < 1 || fourier_dim < 2 || fourier_dim % 2 != 0) {
    throw ConfigError("denoiser config: dimensions must be positive (fourier_dim even)");
  }
  if (heads < 1 || model_dim % heads != 0) throw ConfigError("denoiser config: model_dim must divide by heads");
  if (mlp_ratio < 1) throw ConfigError("denoiser config: mlp_ratio must be >= 1");
  if (!(sigma_min > 0.0)) throw ConfigError("denoiser config: sigma_min must be positive");
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"latent_dim", latent_dim},
          {"model_dim", model_dim},
          {"heads", heads},
          {"layers", layers},
          {"fourier_dim", fourier_dim},
          {"mlp_ratio", mlp_ratio},
          {"sigma_min", sigma_min},
          {"history_feature_dim", history_feature_dim},
          {"map_feature_dim", map_feature_dim},
          {"neighbor_feature_dim", neighbor_feature_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.heads = j.value("heads", c.heads);
  c.layers = j.value("layers", c.layers);
  c.fourier_dim = j.value("fourier_dim", c.fourier_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.sigma_min = j.value("sigma_min", c.sigma_min);
  c.history_feature_dim = j.value("history_feature_dim", c.history_feature_dim);
  c.map_feature_dim = j.value("map_feature_dim", c.map_feature_dim);
  c.neighbor_feature_dim = j.value("neighbor_feature_dim", c.neighbor_feature_dim);
  c.validate();
  return c;
}

void ConditionBatch::validate(const DenoiserConfig& config) const {
  const std::size_t a = history_spans.size();
  require(map_spans.size() == a && neighbor_spans.size() == a && prior_spans.size() == a,
          "ConditionBatch: one span per agent for every token kind");
  require(history.cols() == config.history_feature_dim, "ConditionBatch: history feature width mismatch");
  require(map.cols() == config.map_feature_dim, "ConditionBatch: map feature width mismatch");
  require(neighbors.cols() == config.neighbor_feature_dim, "ConditionBatch: neighbor feature width mismatch");
  require(priors.cols() == config.latent_dim, "ConditionBatch: prior latent width mismatch");
  require(static_cast<Index>(prior_bias.size()) == priors.rows(), "ConditionBatch: one bias per prior row");
  Index covered = 0;
  for (const auto& s : scene_agents) {
    require(s.begin == covered && s.end > s.begin, "ConditionBatch: scene agent ranges must tile 0..A");
    covered = s.end;
  }
  require(covered == static_cast<Index>(a), "ConditionBatch: scene agent ranges must tile 0..A");
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  build(seed);
}

Denoiser::Linear Denoiser::make_linear(const std::string& name, int in, int out, std::uint64_t& stream,
                                       bool zero) {
  Matrix w = Matrix::Zero(in, out);
  if (!zero) {
    Rng rng(stream++);
    const double stdev = 1.0 / std::sqrt(static_cast<double>(in));
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = stdev * rng.normal();
  }
  Linear l{Tensor(std::move(w), true), Tensor(Matrix::Zero(1, out), true)};
  params_.add(name + ".w", l.w);
  params_.add(name + ".b", l.b);
  return l;
}

Denoiser::Norm Denoiser::make_norm(const std::string& name, int dim) {
  Norm n{Tensor(Matrix::Ones(1, dim), true), Tensor(Matrix::Zero(1, dim), true)};
  params_.add(name + ".gain", n.gain);
  params_.add(name + ".bias", n.bias);
  return n;
}

void Denoiser::build(std::uint64_t seed) {
  const int d = config_.model_dim;
  std::uint64_t stream = mix_seed(seed, 0xde);
  static const std::array<const char*, EncodedCondition::kKinds> kNames{"hist", "map", "nbr", "prior"};
  const std::array<int, EncodedCondition::kKinds> in_dims{config_.history_feature_dim, config_.map_feature_dim,
                                                          config_.neighbor_feature_dim, config_.latent_dim};
  for (int k = 0; k < EncodedCondition::kKinds; ++k) {
    const std::string base = std::string("embed.") + kNames[static_cast<std::size_t>(k)];
    embed_[static_cast<std::size_t>(k)] = {make_linear(base + ".in", in_dims[static_cast<std::size_t>(k)], d, stream),
                                           make_linear(base + ".out", d, d, stream)};
  }
  input_ = make_linear("input", config_.latent_dim + config_.fourier_dim, d, stream);
  layers_.clear();
  for (int l = 0; l < config_.layers; ++l) {
    const std::string base = "layer" + std::to_string(l);
    Layer layer;
    auto make_attention = [&](const std::string& name) {
      return Attention{make_norm(name + ".norm", d), make_linear(name + ".q", d, d, stream),
                       make_linear(name + ".k", d, d, stream), make_linear(name + ".v", d, d, stream),
                       make_linear(name + ".o", d, d, stream)};
    };
    for (int k = 0; k < EncodedCondition::kKinds; ++k) {
      layer.cross[static_cast<std::size_t>(k)] = make_attention(base + "." + kNames[static_cast<std::size_t>(k)]);
    }
    layer.self = make_attention(base + ".self");
    layer.mlp_norm = make_norm(base + ".mlp.norm", d);
    layer.mlp_in = make_linear(base + ".mlp.in", d, config_.mlp_ratio * d, stream);
    layer.mlp_out = make_linear(base + ".mlp.out", config_.mlp_ratio * d, d, stream);
    layers_.push_back(std::move(layer));
  }
  out_norm_ = make_norm("out.norm", d);
  output_ = make_linear("out.proj", d, config_.latent_dim, stream, /*zero=*/true);
}

EncodedCondition Denoiser::encode(const ConditionBatch& batch) const {
  batch.validate(config_);
  EncodedCondition cond;
  cond.num_agents = batch.num_agents();
  cond.scene_agents = batch.scene_agents;
  cond.spans = {batch.history_spans, batch.map_spans, batch.neighbor_spans, batch.prior_spans};
  cond.prior_bias = batch.prior_bias;
  const std::array<const Matrix*, EncodedCondition::kKinds> tokens{&batch.history, &batch.map, &batch.neighbors,
                                                                   &batch.priors};
  for (int k = 0; k < EncodedCondition::kKinds; ++k) {
    const auto ks = static_cast<std::size_t>(k);
    const Matrix& raw = *tokens[ks];
    Tensor emb = raw.rows() > 0 ? embed_[ks](Tensor(raw)) : Tensor(Matrix::Zero(0, config_.model_dim));
    for (const auto& layer : layers_) {
      const Attention& att = layer.cross[ks];
      if (raw.rows() > 0) {
        cond.keys[ks].push_back(att.k(emb));
        cond.values[ks].push_back(att.v(emb));
      } else {
        cond.keys[ks].push_back(emb);
        cond.values[ks].push_back(emb);
      }
    }
  }
  return cond;
}

Tensor Denoiser::network(const Tensor& x, std::span<const double> scene_sigma, const EncodedCondition& cond) const {
  const Index a = cond.num_agents;
  require(a > 0, "Denoiser: empty condition batch");
  require(x.cols() == config_.latent_dim, "Denoiser: latent width mismatch");
  require(x.rows() % a == 0, "Denoiser: rows must be modes x agents");
  require(scene_sigma.size() == cond.scene_agents.size(), "Denoiser: one sigma per scene");
  const Index modes = x.rows() / a;
  const Index rows = x.rows();

  // Per-row sigma inputs: scaled latent and noise-level features.
  std::vector<double> row_cin(static_cast<std::size_t>(rows));
  Matrix feats(rows, config_.fourier_dim);
  std::vector<KeySpan> self_spans(static_cast<std::size_t>(rows));
  std::array<std::vector<KeySpan>, EncodedCondition::kKinds> row_spans;
  for (auto& s : row_spans) s.resize(static_cast<std::size_t>(rows));
  for (std::size_t s = 0; s < cond.scene_agents.size(); ++s) {
    const double sigma = scene_sigma[s];
    require(std::isfinite(sigma) && sigma > 0.0, "Denoiser: sigma must be positive");
    const auto ff = fourier_features(sigma, config_.fourier_dim);
    const double ci = c_in(sigma);
    const KeySpan agents = cond.scene_agents[s];
    for (Index m = 0; m < modes; ++m) {
      for (Index ag = agents.begin; ag < agents.end; ++ag) {
        const Index r = m * a + ag;
        row_cin[static_cast<std::size_t>(r)] = ci;
        for (int j = 0; j < config_.fourier_dim; ++j) feats(r, j) = ff[static_cast<std::size_t>(j)];
        self_spans[static_cast<std::size_t>(r)] = {m * a + agents.begin, m * a + agents.end};
        for (int k = 0; k < EncodedCondition::kKinds; ++k) {
          row_spans[static_cast<std::size_t>(k)][static_cast<std::size_t>(r)] =
              cond.spans[static_cast<std::size_t>(k)][static_cast<std::size_t>(ag)];
        }
      }
    }
  }

  const std::array<Tensor, 2> input_parts{scale_rows(x, row_cin), Tensor(std::move(feats))};
  Tensor h = input_(concat_cols(input_parts));
  const int heads = config_.heads;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    for (int k = 0; k < EncodedCondition::kKinds; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      if (cond.keys[ks][l].rows() == 0) continue;
      const Attention& att = layer.cross[ks];
      const Tensor q = att.q(att.norm(h));
      const std::span<const double> bias =
          k == 3 ? std::span<const double>(cond.prior_bias) : std::span<const double>();
      h = add(h, att.o(attention(q, cond.keys[ks][l], cond.values[ks][l], row_spans[ks], heads, bias)));
    }
    const Tensor n = layer.self.norm(h);
    h = add(h, layer.self.o(attention(layer.self.q(n), layer.self.k(n), layer.self.v(n), self_spans, heads)));
    h = add(h, layer.mlp_out(silu(layer.mlp_in(layer.mlp_norm(h)))));
  }
  return output_(out_norm_(h));
}

Tensor Denoiser::denoise(const Tensor& x, std::span<const double> scene_sigma, const EncodedCondition& cond) const {
  const Tensor f = network(x, scene_sigma, cond);
  const Index a = cond.num_agents;
  const Index modes = x.rows() / a;
  std::vector<double> skip(static_cast<std::size_t>(x.rows())), out(static_cast<std::size_t>(x.rows()));
  for (std::size_t s = 0; s < cond.scene_agents.size(); ++s) {
    const double cs = c_skip(scene_sigma[s], config_.sigma_min);
    const double co = c_out(scene_sigma[s], config_.sigma_min);
    for (Index m = 0; m < modes; ++m) {
      for (Index ag = cond.scene_agents[s].begin; ag < cond.scene_agents[s].end; ++ag) {
        skip[static_cast<std::size_t>(m * a + ag)] = cs;
        out[static_cast<std::size_t>(m * a + ag)] = co;
      }
    }
  }
  ++calls_;
  evaluations_ += modes * static_cast<std::int64_t>(cond.scene_agents.size());
  return add(scale_rows(x, skip), scale_rows(f, out));
}

Tensor Denoiser::denoise(const Tensor& x, std::span<const double> scene_sigma, const ConditionBatch& batch) const {
  return denoise(x, scene_sigma, encode(batch));
}

Denoiser Denoiser::clone() const {
  Denoiser copy(config_, 0);
  auto dst = copy.params_.tensors();
  auto src = params_.tensors();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i].mutable_value() = src[i].value();
    dst[i].set_requires_grad(src[i].requires_grad());
  }
  return copy;
}

nlohmann::json Denoiser::to_json() const {
  return {{"config", config_.to_json()}, {"params", params_.to_json()}};
}

Denoiser Denoiser::from_json(const nlohmann::json& j) {
  Denoiser d(DenoiserConfig::from_json(j.at("config")), 0);
  d.params_.load_json(j.at("params"));
  return d;
}

void ema_update(ParameterSet& teacher, const ParameterSet& student, double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, "ema_update: alpha must lie in [0, 1]");
  require(teacher.size() == student.size(), "ema_update: parameter sets differ in size");
  auto dst = teacher.tensors();
  auto src = student.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    require(dst[i].rows() == src[i].rows() && dst[i].cols() == src[i].cols(), "ema_update: shape mismatch");
    require(dst[i].is_leaf(), "ema_update: teacher tensors must be leaves");
    Matrix& v = dst[i].mutable_value();
    v = alpha * v + (1.0 - alpha) * src[i].value();
  }
}

}  // namespace cmtraj
