#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "cmtraj/codec.hpp"
#include "cmtraj/dataset.hpp"
#include "support.hpp"

using namespace cmtraj;
using cmtraj::testing::random_matrix;
using cmtraj::testing::rank10_family;
using cmtraj::testing::spearman_pairwise;

namespace {

Matrix scene_futures(std::uint64_t seed, Split split, int count) {
  SceneConfig sc;
  ContextConfig cc;
  return local_futures(generate_split(seed, split, count, sc), cc);
}

}  // namespace

TEST_CASE("identity codec and linearity") {
  const auto id = LatentCodec::identity(6);
  Rng rng(1);
  const Matrix x = random_matrix(rng, 4, 6);
  CHECK((id.encode(x) - x).norm() == 0.0);
  CHECK((id.decode(x) - x).norm() == 0.0);

  LatentCodec c(8, 3);
  c.set_U(random_matrix(rng, 8, 3));
  c.set_V(random_matrix(rng, 3, 8));
  c.set_scale(4.0);
  CHECK(c.encode(Matrix::Zero(1, 8)).norm() == 0.0);
  CHECK(c.decode(Matrix::Zero(1, 3)).norm() == 0.0);
  const Matrix a = random_matrix(rng, 1, 8), b = random_matrix(rng, 1, 8);
  const Matrix lhs = c.encode(Matrix(2.5 * a - 0.75 * b));
  const Matrix rhs = 2.5 * c.encode(a) - 0.75 * c.encode(b);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("shape mismatches are contract violations") {
  LatentCodec c(8, 3);
  CHECK_THROWS_AS(c.encode(Matrix::Zero(1, 7)), ContractViolation);
  CHECK_THROWS_AS(c.decode(Matrix::Zero(1, 4)), ContractViolation);
  CHECK_THROWS_AS(c.set_U(Matrix::Zero(3, 8)), ContractViolation);
}

TEST_CASE("rank-10 family is recovered exactly") {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    const Matrix data = rank10_family(seed, 400);
    CodecFitConfig cfg;
    cfg.epochs = 20;
    cfg.seed = seed;
    const auto codec = fit_codec(data, cfg);
    CHECK(round_trip_error(codec, data) < 1e-6);
    const Matrix held = rank10_family(seed, 50);
    CHECK(round_trip_error(codec, held) < 1e-6);
  }
}

TEST_CASE("reconstruction-only fit on a rank-10 family drives L_rec to zero") {
  const Matrix data = rank10_family(9, 300);
  CodecFitConfig cfg;
  cfg.epochs = 10;
  cfg.weights.reg = 0.0;
  cfg.weights.var = 0.0;
  CodecLosses fin;
  const auto codec = fit_codec(data, cfg, &fin);
  CHECK(evaluate_codec(codec, data, cfg.weights).rec < 1e-6);
  CHECK(round_trip_error(codec, data) < 1e-6);
}

TEST_CASE("norm loss vanishes for orthogonal U") {
  Rng rng(2);
  const Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, 6, 6));
  const Matrix q = qr.householderQ();
  const Tensor data(random_matrix(rng, 20, 6));
  CodecLossWeights w;
  w.rec = 0.0;
  w.var = 0.0;
  w.reg = 1.0;
  CodecLosses parts;
  codec_loss(data, Tensor(q), Tensor(q.transpose()), Tensor::scalar(1.0), w, &parts);
  CHECK(parts.reg < 1e-20);
}

TEST_CASE("codec loss gradients match finite differences") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(mix_seed(seed, 77));
    const Tensor data(random_matrix(rng, 5, 6));
    std::vector<Tensor> params{Tensor(random_matrix(rng, 6, 3, 0.5), true),
                               Tensor(random_matrix(rng, 3, 6, 0.5), true), Tensor::scalar(0.7, true)};
    CodecLossWeights w;
    w.pairwise_reg = seed % 2 == 1;
    worst = std::max(worst, cmtraj::testing::max_fd_error(
                                [&] { return codec_loss(data, params[0], params[1], params[2], w); }, params));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("fitted codec on scene futures") {
  const Matrix train = scene_futures(17, Split::kTrain, 400);
  CodecFitConfig cfg;
  cfg.seed = 17;
  cfg.epochs = 30;
  const auto codec = fit_codec(train, cfg);

  SUBCASE("latent std per dimension within 10% of eta") {
    const Matrix z = codec.encode(train);
    const Eigen::RowVectorXd mean = z.colwise().mean();
    for (Index d = 0; d < z.cols(); ++d) {
      const double sd = std::sqrt((z.col(d).array() - mean(d)).square().sum() / static_cast<double>(z.rows() - 1));
      CAPTURE(d);
      CHECK(std::abs(sd - codec.eta()) <= 0.1 * codec.eta());
    }
  }
  SUBCASE("held-out pairwise distances keep their order") {
    Matrix held = scene_futures(17, Split::kTest, 120);
    held.conservativeResize(std::min<Index>(held.rows(), 300), Eigen::NoChange);
    CHECK(spearman_pairwise(held, codec.encode(held)) > 0.9);
  }
  SUBCASE("json round trip is exact") {
    const auto back = LatentCodec::from_json(codec.to_json());
    CHECK(back.U() == codec.U());
    CHECK(back.V() == codec.V());
    CHECK(back.eta() == codec.eta());
    CHECK(back.scale() == codec.scale());
  }
}

TEST_CASE("full-rank random futures keep pairwise distance order") {
  Rng rng(31);
  // Smooth dominant structure plus full-rank jitter.
  Matrix data = random_matrix(rng, 600, 6) * random_matrix(rng, 6, 60, 4.0) + random_matrix(rng, 600, 60, 0.3);
  CodecFitConfig cfg;
  cfg.epochs = 20;
  const auto codec = fit_codec(data.topRows(400), cfg);
  const Matrix held = data.bottomRows(200);
  CHECK(spearman_pairwise(held, codec.encode(held)) > 0.9);
}

TEST_CASE("equalizing rotation gives equal diagonal") {
  Rng rng(8);
  const Matrix a = random_matrix(rng, 30, 5);
  Matrix cov = a.transpose() * a;
  const Matrix r = equalizing_rotation(cov);
  CHECK((r.transpose() * r - Matrix::Identity(5, 5)).norm() < 1e-12);
  const Matrix rot = r.transpose() * cov * r;
  const double target = cov.trace() / 5.0;
  for (Index i = 0; i < 5; ++i) CHECK(rot(i, i) == doctest::Approx(target).epsilon(1e-10));
}

TEST_CASE("fit rejects bad input") {
  CodecFitConfig cfg;
  CHECK_THROWS(fit_codec(Matrix(0, 60), cfg));
  cfg.weights.rec = -1.0;
  CHECK_THROWS(fit_codec(rank10_family(1, 50), cfg));
}
