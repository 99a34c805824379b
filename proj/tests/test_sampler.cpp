#include <doctest.h>

#include "cmtraj/sampler.hpp"
#include "support.hpp"

using namespace cmtraj;
using cmtraj::testing::random_matrix;

namespace {

struct World {
  DataConfig data;
  LatentCodec codec;
  std::vector<PreparedScene> scenes;
  DenoiserConfig model;
};

World make_world(int count) {
  World w;
  const auto raw = generate_split(11, Split::kTest, count, w.data.scene);
  CodecFitConfig cf;
  cf.epochs = 2;
  w.codec = fit_codec(local_futures(raw, w.data.context), cf);
  w.scenes = prepare_scenes(raw, w.codec, w.data);
  w.model = denoiser_dims(w.data, w.codec.latent_dim());
  w.model.model_dim = 8;
  w.model.layers = 1;
  return w;
}

void randomize(Denoiser& model, Rng& rng) {
  for (auto& t : model.params().tensors()) t.mutable_value() = random_matrix(rng, t.rows(), t.cols(), 0.3);
}

bool same_predictions(const PredictionSet& a, const PredictionSet& b) {
  if (a.scenes.size() != b.scenes.size()) return false;
  for (std::size_t s = 0; s < a.scenes.size(); ++s) {
    const auto &x = a.scenes[s], &y = b.scenes[s];
    if (x.scene_id != y.scene_id || x.probs != y.probs || x.modes.size() != y.modes.size()) return false;
    for (std::size_t m = 0; m < x.modes.size(); ++m) {
      for (std::size_t ag = 0; ag < x.modes[m].size(); ++ag) {
        for (std::size_t t = 0; t < x.modes[m][ag].size(); ++t) {
          if (!(x.modes[m][ag][t] == y.modes[m][ag][t])) return false;
        }
      }
    }
  }
  return true;
}

}  // namespace

TEST_CASE("tau indices") {
  CHECK(tau_indices(1, 40) == std::vector<int>{0, 40});
  CHECK(tau_indices(2, 40) == std::vector<int>{0, 1, 40});
  CHECK(tau_indices(4, 40) == std::vector<int>{0, 1, 20, 30, 40});
  CHECK(tau_indices(3, 40) == std::vector<int>{0, 1, 27, 40});
  SamplerConfig c;
  c.nfe = 2;
  const auto s = tau_sigmas(c);
  CHECK(s.size() == 3);
  CHECK(s[0] == 0.0);
  CHECK(s[1] == 0.002);
  CHECK(s[2] == 1.0);
  CHECK_THROWS_AS(tau_indices(0, 40), ContractViolation);
  c.nfe = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("two-dimensional hand trace") {
  DenoiserConfig cfg;
  cfg.latent_dim = 2;
  cfg.model_dim = 4;
  cfg.layers = 1;
  cfg.fourier_dim = 4;
  cfg.history_feature_dim = 2;
  cfg.map_feature_dim = 2;
  cfg.neighbor_feature_dim = 2;
  Rng rng(3);
  ConditionBatch b;
  b.scene_agents = {{0, 1}};
  b.history = random_matrix(rng, 2, 2);
  b.history_spans = {{0, 2}};
  b.map = Matrix(0, 2);
  b.map_spans = {{0, 0}};
  b.neighbors = Matrix(0, 2);
  b.neighbor_spans = {{0, 0}};
  b.priors = Matrix(0, 2);
  b.prior_spans = {{0, 0}};

  Matrix x_n(1, 2), eps(1, 2);
  x_n << 0.8, -0.3;
  eps << 0.5, 1.5;

  SUBCASE("zero network: closed form") {
    Denoiser model(cfg, 1);
    const auto cond = model.encode(b);
    const std::vector<double> sig{0.0, 0.002, 1.0};
    const Matrix out = run_sampler(model, cond, x_n, eps, sig);
    // x0 = c_skip(1) x_N ; x = x0 + 0.002 eps ; f(x, sigma_min) = x.
    const double cs = 0.25 / (0.998 * 0.998 + 0.25);
    CHECK(out(0, 0) == doctest::Approx(cs * 0.8 + 0.002 * 0.5).epsilon(1e-14));
    CHECK(out(0, 1) == doctest::Approx(cs * -0.3 + 0.002 * 1.5).epsilon(1e-14));
    CHECK(model.calls() == 2);
  }
  SUBCASE("random network: step by step") {
    Denoiser model(cfg, 2);
    randomize(model, rng);
    const auto cond = model.encode(b);
    const std::vector<double> sig{0.0, 0.002, 0.3, 1.0};
    NoGradGuard ng;
    const auto f = [&](const Matrix& x, double s) {
      const std::vector<double> v{s};
      return Matrix(model.denoise(Tensor(x), v, cond).value());
    };
    Matrix x0 = f(x_n, 1.0);
    Matrix x = x0 + 0.3 * eps;
    x0 = f(x, 0.3);
    x = x0 + 0.002 * eps;
    x0 = f(x, 0.002);
    model.reset_counters();
    const Matrix out = run_sampler(model, cond, x_n, eps, sig);
    CHECK((out - x0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(model.calls() == 3);
    // Fresh noise per step gives a different result.
    const std::vector<Matrix> fresh{random_matrix(rng, 1, 2), random_matrix(rng, 1, 2)};
    CHECK((run_sampler(model, cond, x_n, eps, sig, fresh) - x0).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("sampling over prepared scenes") {
  const World w = make_world(10);
  Denoiser model(w.model, 5);
  Rng rng(5);
  randomize(model, rng);

  SUBCASE("evaluation counts are exact") {
    for (int nfe : {1, 2, 4}) {
      SamplerConfig sc;
      sc.nfe = nfe;
      sc.batch_size = 4;
      model.reset_counters();
      const auto p = sample_predictions(model, w.codec, w.scenes, sc);
      CHECK(p.evaluations == 10 * 6 * nfe);
      CHECK(p.evaluations / (10 * 6) == nfe);
      CHECK(model.calls() == 3 * nfe);
      CHECK(p.nfe == nfe);
    }
  }
  SUBCASE("deterministic and independent of batching") {
    SamplerConfig sc;
    sc.nfe = 2;
    const auto a = sample_predictions(model, w.codec, w.scenes, sc);
    const auto b = sample_predictions(model, w.codec, w.scenes, sc);
    sc.batch_size = 3;
    const auto c = sample_predictions(model, w.codec, w.scenes, sc);
    CHECK(same_predictions(a, b));
    // Different batch shapes change GEMM blocking, so only round-off may differ.
    for (std::size_t i = 0; i < a.scenes.size(); ++i) {
      for (std::size_t m = 0; m < a.scenes[i].modes.size(); ++m) {
        for (std::size_t g = 0; g < a.scenes[i].modes[m].size(); ++g) {
          CHECK(ade(a.scenes[i].modes[m][g], c.scenes[i].modes[m][g]) < 1e-9);
        }
      }
    }
    sc.seed = 1;
    CHECK_FALSE(same_predictions(a, sample_predictions(model, w.codec, w.scenes, sc)));
  }
  SUBCASE("single step ignores the grid interior") {
    SamplerConfig a, b;
    b.grid_steps = 17;
    CHECK(same_predictions(sample_predictions(model, w.codec, w.scenes, a), sample_predictions(model, w.codec, w.scenes, b)));
  }
  SUBCASE("zero network single step decodes c_skip(sigma_max) x_N") {
    Denoiser zero(w.model, 6);
    SamplerConfig sc;
    sc.modes = 2;
    const auto p = sample_predictions(zero, w.codec, {w.scenes[0]}, sc);
    Rng r(mix_seed(sc.seed, static_cast<std::uint64_t>(w.scenes[0].scene.scene_id)));
    const int L = w.codec.latent_dim();
    const int A = w.scenes[0].num_agents();
    Matrix xn(2 * A, L);
    for (int m = 0; m < 2; ++m) {
      for (int a = 0; a < A; ++a) {
        for (int c = 0; c < L; ++c) xn(m * A + a, c) = r.normal();
        for (int c = 0; c < L; ++c) r.normal();
      }
    }
    const Matrix local = w.codec.decode(Matrix(c_skip(1.0) * xn));
    for (int m = 0; m < 2; ++m) {
      for (int a = 0; a < A; ++a) {
        const auto row = local.row(m * A + a);
        const auto expect = unflatten_global({row.data(), static_cast<std::size_t>(row.size())},
                                             w.scenes[0].contexts[static_cast<std::size_t>(a)].frame);
        CHECK(ade(p.scenes[0].modes[static_cast<std::size_t>(m)][static_cast<std::size_t>(a)], expect) < 1e-12);
      }
    }
  }
  SUBCASE("probabilities form a simplex") {
    const auto p = sample_predictions(model, w.codec, w.scenes, SamplerConfig{});
    for (const auto& s : p.scenes) {
      for (const auto& pr : s.probs) {
        double t = 0;
        for (double v : pr) t += v;
        CHECK(std::abs(t - 1.0) < 1e-12);
      }
    }
  }
  SUBCASE("latent width mismatch is a configuration error") {
    auto cfg = w.model;
    cfg.latent_dim = 4;
    Denoiser other(cfg, 1);
    CHECK_THROWS_AS(sample_predictions(other, w.codec, w.scenes, SamplerConfig{}), ConfigError);
  }
}

TEST_CASE("mode probabilities follow the nearest anchor") {
  const Trajectory a{{0, 0}, {1, 0}}, b{{0, 0}, {0, 5}};
  const std::vector<Trajectory> modes{{{0, 0}, {1.1, 0}}, {{0, 0}, {0, 4}}, {{0, 0}, {0.9, 0}}};
  const auto p = mode_probabilities(modes, {a, b}, {0.8, 0.2});
  CHECK(p[0] == doctest::Approx(0.8 / 1.8));
  CHECK(p[1] == doctest::Approx(0.2 / 1.8));
  CHECK(p[2] == doctest::Approx(0.8 / 1.8));
  const auto u = mode_probabilities(modes, {}, {});
  for (double v : u) CHECK(v == doctest::Approx(1.0 / 3.0));
}
