#include <doctest.h>

#include <cmath>
#include <numeric>

#include "cmtraj/denoiser.hpp"
#include "support.hpp"

using namespace cmtraj;
using cmtraj::testing::random_batch;
using cmtraj::testing::random_matrix;
using cmtraj::testing::randomize;
using cmtraj::testing::scene_sigmas;
using cmtraj::testing::tiny_config;

TEST_CASE("skip and output scalings") {
  const double smin = 0.002;
  CHECK(c_skip(smin) == 1.0);
  CHECK(c_out(smin) == 0.0);
  CHECK(c_skip(0.502) == doctest::Approx(0.5).epsilon(1e-14));
  // 0.25 / sqrt(0.25 + 0.252004)
  const long double ref = 0.25L / std::sqrt(0.25L + 0.502L * 0.502L);
  CHECK(std::abs(c_out(0.502) - static_cast<double>(ref)) < 1e-12);
  CHECK(c_out(0.502) == doctest::Approx(0.352848).epsilon(1e-6));
  double prev = 1.0;
  for (double s = 0.01; s < 50.0; s *= 1.5) {
    CHECK(c_skip(s) < prev);
    CHECK(c_skip(s) > 0.0);
    CHECK(c_out(s) > 0.0);
    prev = c_skip(s);
  }
  CHECK(c_in(0.0) == doctest::Approx(2.0));
}

TEST_CASE("fourier features are bounded and distinct") {
  const auto a = fourier_features(0.002, 16), b = fourier_features(1.0, 16);
  CHECK(a.size() == 16);
  for (std::size_t i = 0; i < 8; ++i) CHECK(a[i] * a[i] + a[8 + i] * a[8 + i] == doctest::Approx(1.0));
  CHECK(a != b);
}

TEST_CASE("boundary identity at sigma_min") {
  const auto cfg = tiny_config();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(mix_seed(seed, 5));
    Denoiser model(cfg, seed);
    randomize(model, rng, 1.0);
    const auto batch = random_batch(cfg, rng, {2, 3});
    const int modes = 1 + static_cast<int>(seed % 3);
    const Tensor x(random_matrix(rng, 5 * modes, cfg.latent_dim, 3.0));
    const std::vector<double> sig(2, cfg.sigma_min);
    NoGradGuard ng;
    const Tensor out = model.denoise(x, sig, batch);
    CHECK((out.value() - x.value()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("zero output projection reduces to c_skip x") {
  const auto cfg = tiny_config();
  Rng rng(3);
  Denoiser model(cfg, 3);
  const auto batch = random_batch(cfg, rng, {3});
  const Tensor x(random_matrix(rng, 3, cfg.latent_dim));
  const std::vector<double> sig{0.4};
  NoGradGuard ng;
  const Tensor out = model.denoise(x, sig, batch);
  CHECK((out.value() - c_skip(0.4) * x.value()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("denoiser gradients match finite differences") {
  const auto cfg = tiny_config();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(mix_seed(seed, 9));
    Denoiser model(cfg, seed);
    randomize(model, rng);
    const auto batch = random_batch(cfg, rng, {1, 2});
    const Tensor x(random_matrix(rng, 2 * 3, cfg.latent_dim));
    const auto sig = scene_sigmas(rng, 2);
    const Tensor weights(random_matrix(rng, 6, cfg.latent_dim));
    auto params = std::vector<Tensor>(model.params().tensors().begin(), model.params().tensors().end());
    // A subset keeps the run short while covering every block across seeds.
    std::vector<Tensor> subset;
    for (std::size_t i = seed % 5; i < params.size(); i += 5) subset.push_back(params[i]);
    worst = std::max(worst, cmtraj::testing::max_fd_error(
                                [&] { return sum(mul(model.denoise(x, sig, batch), weights)); }, subset));
  }
  CAPTURE(worst);
  CHECK(worst < 1e-4);
}

TEST_CASE("denoiser input gradient matches finite differences") {
  const auto cfg = tiny_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(mix_seed(seed, 10));
    Denoiser model(cfg, seed);
    randomize(model, rng);
    const auto batch = random_batch(cfg, rng, {3});
    std::vector<Tensor> xs{Tensor(random_matrix(rng, 6, cfg.latent_dim), true)};
    const std::vector<double> sig{0.3};
    CHECK(cmtraj::testing::max_fd_error([&] { return sum(square(model.denoise(xs[0], sig, batch))); }, xs) < 1e-4);
  }
}

TEST_CASE("agent permutation within a scene permutes outputs") {
  const auto cfg = tiny_config();
  Rng rng(21);
  Denoiser model(cfg, 21);
  randomize(model, rng);
  const auto batch = random_batch(cfg, rng, {4});
  const int modes = 2, agents = 4;
  const Matrix x = random_matrix(rng, modes * agents, cfg.latent_dim);
  const std::vector<int> perm{2, 0, 3, 1};  // new agent i is old agent perm[i]
  ConditionBatch pb = batch;
  Matrix px(x.rows(), x.cols());
  for (int i = 0; i < agents; ++i) {
    const auto o = static_cast<std::size_t>(perm[static_cast<std::size_t>(i)]);
    pb.history_spans[static_cast<std::size_t>(i)] = batch.history_spans[o];
    pb.map_spans[static_cast<std::size_t>(i)] = batch.map_spans[o];
    pb.neighbor_spans[static_cast<std::size_t>(i)] = batch.neighbor_spans[o];
    pb.prior_spans[static_cast<std::size_t>(i)] = batch.prior_spans[o];
    for (int m = 0; m < modes; ++m) px.row(m * agents + i) = x.row(m * agents + static_cast<int>(o));
  }
  const std::vector<double> sig{0.6};
  NoGradGuard ng;
  const Matrix out = model.denoise(Tensor(x), sig, batch).value();
  const Matrix pout = model.denoise(Tensor(px), sig, pb).value();
  for (int i = 0; i < agents; ++i) {
    for (int m = 0; m < modes; ++m) {
      CHECK((pout.row(m * agents + i) - out.row(m * agents + perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() <
            1e-12);
    }
  }
}

TEST_CASE("scenes and modes do not interact") {
  const auto cfg = tiny_config();
  Rng rng(4);
  Denoiser model(cfg, 4);
  randomize(model, rng);
  const auto both = random_batch(cfg, rng, {2, 2});
  const Matrix x = random_matrix(rng, 2 * 4, cfg.latent_dim);
  const std::vector<double> sig{0.2, 0.7};
  NoGradGuard ng;
  const Matrix a = model.denoise(Tensor(x), sig, both).value();
  Matrix y = x;
  y.row(4 + 2) *= -3.0;  // mode 1, agent 2 (scene 1)
  const Matrix b = model.denoise(Tensor(y), sig, both).value();
  for (int r : {0, 1, 2, 3, 4, 5}) CHECK((a.row(r) - b.row(r)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.row(7) - b.row(7)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("evaluation counting") {
  const auto cfg = tiny_config();
  Rng rng(6);
  Denoiser model(cfg, 6);
  const auto batch = random_batch(cfg, rng, {2, 1, 3});
  const auto enc = model.encode(batch);
  const std::vector<double> sig{0.5, 0.5, 0.5};
  NoGradGuard ng;
  model.denoise(Tensor(random_matrix(rng, 6 * 6, cfg.latent_dim)), sig, enc);
  model.denoise(Tensor(random_matrix(rng, 6 * 6, cfg.latent_dim)), sig, enc);
  CHECK(model.calls() == 2);
  CHECK(model.evaluations() == 2 * 6 * 3);
  CHECK_THROWS_AS(model.denoise(Tensor(random_matrix(rng, 7, cfg.latent_dim)), sig, enc), ContractViolation);
}

TEST_CASE("non-finite input raises a numerical error") {
  const auto cfg = tiny_config();
  Rng rng(7);
  Denoiser model(cfg, 7);
  randomize(model, rng);
  const auto batch = random_batch(cfg, rng, {2});
  Matrix x = random_matrix(rng, 2, cfg.latent_dim);
  x(0, 0) = std::nan("");
  const std::vector<double> sig{0.5};
  CHECK_THROWS_AS(model.denoise(Tensor(x), sig, batch), NumericalError);
}

TEST_CASE("ema update") {
  ParameterSet teacher, student;
  teacher.add("w", Tensor(Matrix::Constant(2, 2, 0.0)));
  student.add("w", Tensor(Matrix::Constant(2, 2, 2.0), true));
  ema_update(teacher, student, 0.5);
  CHECK(teacher.tensors()[0].value()(1, 1) == 1.0);
  ema_update(teacher, student, 1.0);
  CHECK(teacher.tensors()[0].value()(0, 0) == 1.0);
  ema_update(teacher, student, 0.0);
  CHECK(teacher.tensors()[0].value() == student.tensors()[0].value());
  CHECK(teacher.tensors()[0].is_leaf());
  CHECK_FALSE(teacher.tensors()[0].requires_grad());
  ParameterSet bad;
  bad.add("w", Tensor(Matrix::Zero(3, 2)));
  CHECK_THROWS_AS(ema_update(bad, student, 0.5), ContractViolation);
  CHECK_THROWS_AS(ema_update(teacher, student, 1.5), ContractViolation);
}

TEST_CASE("clone and json round trip preserve outputs") {
  const auto cfg = tiny_config();
  Rng rng(8);
  Denoiser model(cfg, 8);
  randomize(model, rng);
  const auto batch = random_batch(cfg, rng, {3});
  const Tensor x(random_matrix(rng, 3, cfg.latent_dim));
  const std::vector<double> sig{0.5};
  NoGradGuard ng;
  const Matrix a = model.denoise(x, sig, batch).value();
  const Denoiser c = model.clone();
  const Denoiser j = Denoiser::from_json(model.to_json());
  CHECK(c.denoise(x, sig, batch).value() == a);
  CHECK(j.denoise(x, sig, batch).value() == a);
  // Clones own their storage.
  randomize(model, rng);
  CHECK(c.denoise(x, sig, batch).value() == a);
}

TEST_CASE("config validation") {
  DenoiserConfig c;
  c.model_dim = 30;
  c.heads = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = DenoiserConfig{};
  c.fourier_dim = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(DenoiserConfig::from_json(DenoiserConfig{}.to_json()).model_dim == 64);
}
