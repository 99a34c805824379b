#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "cmtraj/denoiser.hpp"
#include "cmtraj/random.hpp"
#include "cmtraj/tensor.hpp"

namespace cmtraj::testing {

inline Matrix random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// Five-point central difference of a scalar function of the parameter values.
// Entries are perturbed in place and restored.
inline double numeric_partial(const std::function<double()>& f, Tensor& param, Index flat, double h = 1e-4) {
  Matrix& v = param.mutable_value();
  const double orig = v.data()[flat];
  const auto at = [&](double d) {
    v.data()[flat] = orig + d;
    return f();
  };
  const double d = (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12.0 * h);
  v.data()[flat] = orig;
  return d;
}

// Relative error |a - n| / max(|a|, |n|, floor); the floor keeps tiny gradients
// from dominating through round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Largest relative error over every entry of every parameter.
inline double max_fd_error(const std::function<Tensor()>& build, std::vector<Tensor>& params) {
  const Tensor loss = build();
  const auto g = grad(loss, params);
  const auto value = [&] {
    NoGradGuard ng;
    return build().item();
  };
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Index i = 0; i < params[p].size(); ++i) {
      worst = std::max(worst, relative_error(g[p].data()[i], numeric_partial(value, params[p], i)));
    }
  }
  return worst;
}

inline DenoiserConfig tiny_config() {
  DenoiserConfig c;
  c.latent_dim = 3;
  c.model_dim = 4;
  c.heads = 2;
  c.layers = 2;
  c.fourier_dim = 4;
  c.mlp_ratio = 1;
  c.history_feature_dim = 3;
  c.map_feature_dim = 2;
  c.neighbor_feature_dim = 2;
  return c;
}

// Random tokens; agent a gets a + 1 history tokens, a % 3 map tokens (so some
// agents see none), two neighbors and up to two prior anchors.
inline ConditionBatch random_batch(const DenoiserConfig& cfg, Rng& rng, const std::vector<int>& scene_sizes) {
  ConditionBatch b;
  int agents = 0;
  for (int n : scene_sizes) {
    b.scene_agents.push_back({agents, agents + n});
    agents += n;
  }
  Index h = 0, m = 0, nb = 0, p = 0;
  for (int a = 0; a < agents; ++a) {
    b.history_spans.push_back({h, h + 1 + a % 4});
    h += 1 + a % 4;
    b.map_spans.push_back({m, m + a % 3});
    m += a % 3;
    b.neighbor_spans.push_back({nb, nb + 2});
    nb += 2;
    b.prior_spans.push_back({p, p + 1 + a % 2});
    p += 1 + a % 2;
  }
  b.history = random_matrix(rng, h, cfg.history_feature_dim);
  b.map = random_matrix(rng, m, cfg.map_feature_dim);
  b.neighbors = random_matrix(rng, nb, cfg.neighbor_feature_dim);
  b.priors = random_matrix(rng, p, cfg.latent_dim);
  for (Index i = 0; i < p; ++i) b.prior_bias.push_back(std::log(0.1 + rng.uniform()));
  return b;
}

inline void randomize(Denoiser& model, Rng& rng, double s = 0.5) {
  for (auto& t : model.params().tensors()) t.mutable_value() = random_matrix(rng, t.rows(), t.cols(), s);
}

inline std::vector<double> scene_sigmas(Rng& rng, int scenes) {
  std::vector<double> s;
  for (int i = 0; i < scenes; ++i) s.push_back(rng.uniform(0.01, 1.0));
  return s;
}

inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

inline double spearman_pairwise(const Matrix& x, const Matrix& z) {
  std::vector<double> dx, dz;
  for (Index i = 0; i < x.rows(); ++i) {
    for (Index j = i + 1; j < x.rows(); ++j) {
      dx.push_back((x.row(i) - x.row(j)).norm());
      dz.push_back((z.row(i) - z.row(j)).norm());
    }
  }
  return pearson(ranks(dx), ranks(dz));
}

inline Matrix rank10_family(std::uint64_t seed, Index n, Index dim = 60) {
  Rng rng(seed);
  const Matrix basis = random_matrix(rng, 10, dim, 3.0);
  return random_matrix(rng, n, 10) * basis;
}

}  // namespace cmtraj::testing
