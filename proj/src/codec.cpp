#include "cmtraj/codec.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmtraj/optim.hpp"
#include "cmtraj/random.hpp"

namespace cmtraj {

LatentCodec::LatentCodec(int traj_dim, int latent_dim)
    : u_(Matrix::Zero(traj_dim, latent_dim)), v_(Matrix::Zero(latent_dim, traj_dim)) {
  require(traj_dim > 0 && latent_dim > 0, "LatentCodec: dimensions must be positive");
}

LatentCodec LatentCodec::identity(int dim) {
  LatentCodec c(dim, dim);
  c.u_ = Matrix::Identity(dim, dim);
  c.v_ = Matrix::Identity(dim, dim);
  return c;
}

void LatentCodec::set_U(Matrix u) {
  require(u.rows() == u_.rows() && u.cols() == u_.cols(), "LatentCodec::set_U: shape mismatch");
  u_ = std::move(u);
}

void LatentCodec::set_V(Matrix v) {
  require(v.rows() == v_.rows() && v.cols() == v_.cols(), "LatentCodec::set_V: shape mismatch");
  v_ = std::move(v);
}

void LatentCodec::set_scale(double scale) {
  require(scale > 0.0 && std::isfinite(scale), "LatentCodec::set_scale: scale must be positive");
  scale_ = scale;
}

Matrix LatentCodec::encode(const Matrix& trajectories) const {
  require(trajectories.cols() == u_.rows(), "LatentCodec::encode: trajectory dimension mismatch");
  return (trajectories / scale_) * u_;
}

Matrix LatentCodec::decode(const Matrix& latents) const {
  require(latents.cols() == v_.rows(), "LatentCodec::decode: latent dimension mismatch");
  return (latents * v_) * scale_;
}

Eigen::RowVectorXd LatentCodec::encode(std::span<const double> trajectory) const {
  require(static_cast<Index>(trajectory.size()) == u_.rows(),
          "LatentCodec::encode: trajectory dimension mismatch");
  Eigen::Map<const Eigen::RowVectorXd> x(trajectory.data(), u_.rows());
  return (x / scale_) * u_;
}

Eigen::RowVectorXd LatentCodec::decode(std::span<const double> latent) const {
  require(static_cast<Index>(latent.size()) == v_.rows(),
          "LatentCodec::decode: latent dimension mismatch");
  Eigen::Map<const Eigen::RowVectorXd> z(latent.data(), v_.rows());
  return (z * v_) * scale_;
}

nlohmann::json LatentCodec::to_json() const {
  return {{"format", "cmtraj-codec"},
          {"format_version", kCodecFormatVersion},
          {"traj_dim", traj_dim()},
          {"latent_dim", latent_dim()},
          {"scale", scale_},
          {"eta", eta_},
          {"U", std::vector<double>(u_.data(), u_.data() + u_.size())},
          {"V", std::vector<double>(v_.data(), v_.data() + v_.size())}};
}

LatentCodec LatentCodec::from_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "cmtraj-codec" ||
      j.value("format_version", 0) != kCodecFormatVersion) {
    throw ConfigError("codec file: unexpected format or version");
  }
  const int td = j.at("traj_dim").get<int>();
  const int ld = j.at("latent_dim").get<int>();
  LatentCodec c(td, ld);
  const auto u = j.at("U").get<std::vector<double>>();
  const auto v = j.at("V").get<std::vector<double>>();
  if (static_cast<int>(u.size()) != td * ld || static_cast<int>(v.size()) != td * ld) {
    throw ConfigError("codec file: matrix sizes do not match dimensions");
  }
  std::copy(u.begin(), u.end(), c.u_.data());
  std::copy(v.begin(), v.end(), c.v_.data());
  c.eta_ = j.at("eta").get<double>();
  c.set_scale(j.at("scale").get<double>());
  return c;
}

Tensor codec_loss(const Tensor& data, const Tensor& u, const Tensor& v, const Tensor& eta,
                  const CodecLossWeights& weights, CodecLosses* parts) {
  const Tensor z = matmul(data, u);
  const Tensor recon = matmul(z, v);
  const Tensor l_rec = mean(row_sum(square(sub(recon, data))));

  Tensor l_reg;
  if (weights.pairwise_reg) {
    // Pair each row with the next one (cyclic) inside the batch.
    std::vector<Index> shifted(static_cast<std::size_t>(data.rows()));
    for (Index i = 0; i < data.rows(); ++i) shifted[i] = (i + 1) % data.rows();
    const Tensor dx = sub(data, gather_rows(data, shifted));
    const Tensor dz = sub(z, gather_rows(z, shifted));
    l_reg = mean(square(sub(row_sum(square(dx)), row_sum(square(dz)))));
  } else {
    l_reg = mean(square(sub(row_sum(square(data)), row_sum(square(z)))));
  }

  const Tensor centered = sub(z, col_mean(z));
  const Tensor stdev = sqrt(col_mean(square(centered)));
  const Tensor l_var = sum(square(sub(stdev, eta)));

  Tensor total = add(add(scale(l_rec, weights.rec), scale(l_reg, weights.reg)),
                     scale(l_var, weights.var));
  if (parts != nullptr) {
    parts->rec = l_rec.item();
    parts->reg = l_reg.item();
    parts->var = l_var.item();
    parts->total = total.item();
  }
  return total;
}

Matrix equalizing_rotation(const Matrix& covariance) {
  const Index n = covariance.rows();
  require(n == covariance.cols(), "equalizing_rotation: covariance must be square");
  Matrix c = covariance;
  Matrix r = Matrix::Identity(n, n);
  if (n < 2) return r;
  const double target = c.trace() / static_cast<double>(n);
  const double tol = 1e-12 * std::max(1.0, std::abs(target));
  for (int iter = 0; iter < 4 * n; ++iter) {
    Index hi = 0, lo = 0;
    for (Index i = 1; i < n; ++i) {
      if (c(i, i) > c(hi, hi)) hi = i;
      if (c(i, i) < c(lo, lo)) lo = i;
    }
    if (c(hi, hi) - target <= tol && target - c(lo, lo) <= tol) break;
    // Pick the entry further from the target and rotate it onto the target.
    const Index i = (c(hi, hi) - target >= target - c(lo, lo)) ? hi : lo;
    const Index j = (i == hi) ? lo : hi;
    auto diag_after = [&](double theta) {
      const double cs = std::cos(theta), sn = std::sin(theta);
      return cs * cs * c(i, i) + sn * sn * c(j, j) + 2.0 * cs * sn * c(i, j);
    };
    // diag_after(0) = c(i,i) and diag_after(pi/2) = c(j,j) straddle the target.
    double a = 0.0, b = std::acos(0.0);
    const bool decreasing = c(i, i) > target;
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (a + b);
      const bool above = diag_after(mid) > target;
      if (above == decreasing) a = mid; else b = mid;
    }
    const double theta = 0.5 * (a + b);
    Matrix g = Matrix::Identity(n, n);
    g(i, i) = std::cos(theta);
    g(j, j) = std::cos(theta);
    g(i, j) = -std::sin(theta);
    g(j, i) = std::sin(theta);
    c = g.transpose() * c * g;
    r = r * g;
  }
  return r;
}

namespace {

Matrix centered_covariance(const Matrix& z) {
  const Eigen::RowVectorXd mu = z.colwise().mean();
  const Matrix zc = z.rowwise() - mu;
  return (zc.transpose() * zc) / static_cast<double>(z.rows());
}

}  // namespace

LatentCodec fit_codec(const Matrix& trajectories, const CodecFitConfig& config,
                      CodecLosses* final_losses) {
  require(trajectories.rows() > 0, "fit_codec: dataset is empty");
  require(config.weights.rec >= 0.0 && config.weights.reg >= 0.0 && config.weights.var >= 0.0,
          "fit_codec: loss weights must be non-negative");
  const int traj_dim = static_cast<int>(trajectories.cols());
  const int latent_dim = config.latent_dim;
  require(latent_dim > 0 && latent_dim <= traj_dim, "fit_codec: latent_dim must be in 1..traj_dim");

  LatentCodec codec(traj_dim, latent_dim);
  if (config.auto_scale) {
    const double mean_sq = trajectories.rowwise().squaredNorm().mean();
    if (mean_sq > 0.0) {
      codec.set_scale(std::sqrt(mean_sq / (config.latent_rms * config.latent_rms * latent_dim)));
    }
  }
  const Matrix data = trajectories / codec.scale();

  Rng rng(mix_seed(config.seed, 0xc0dec));
  Matrix u0;
  Matrix v0;
  double eta0 = 1.0;
  if (config.init == CodecInit::kPca) {
    Eigen::BDCSVD<Matrix> svd(data, Eigen::ComputeThinV);
    u0 = svd.matrixV().leftCols(latent_dim);
    const Matrix rot = equalizing_rotation(centered_covariance(data * u0));
    u0 = u0 * rot;
    v0 = u0.transpose();
    const Matrix cov = centered_covariance(data * u0);
    eta0 = std::sqrt(std::max(0.0, cov.trace() / latent_dim));
  } else {
    u0 = Matrix(traj_dim, latent_dim);
    v0 = Matrix(latent_dim, traj_dim);
    for (Index i = 0; i < u0.size(); ++i) u0.data()[i] = rng.normal() / std::sqrt(traj_dim);
    for (Index i = 0; i < v0.size(); ++i) v0.data()[i] = rng.normal() / std::sqrt(latent_dim);
  }

  Tensor u(u0, true);
  Tensor v(v0, true);
  Tensor eta = Tensor::scalar(eta0, true);
  std::vector<Tensor> params{u, v, eta};
  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.learning_rate;
  opt_cfg.weight_decay = 0.0;
  AdamW opt(opt_cfg, params);

  const Index n = data.rows();
  const Index batch = std::min<Index>(std::max(config.batch_size, 2), n);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (Index start = 0; start + batch <= n; start += batch) {
      std::span<const Index> rows(order.data() + start, static_cast<std::size_t>(batch));
      Matrix mb(batch, traj_dim);
      for (Index i = 0; i < batch; ++i) mb.row(i) = data.row(rows[i]);
      const Tensor loss = codec_loss(Tensor(std::move(mb)), u, v, eta, config.weights);
      if (!std::isfinite(loss.item())) {
        throw NumericalError("fit_codec: loss diverged");
      }
      auto grads = grad(loss, params);
      opt.step(params, grads);
    }
  }

  codec.set_U(u.value());
  codec.set_eta(eta.item());
  if (config.refit_decoder) {
    const Matrix z = data * u.value();
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(z);
    codec.set_V(cod.solve(data));
  } else {
    codec.set_V(v.value());
  }
  if (!codec.U().allFinite() || !codec.V().allFinite() || !std::isfinite(codec.eta())) {
    throw NumericalError("fit_codec: non-finite codec parameters");
  }
  if (final_losses != nullptr) {
    *final_losses = evaluate_codec(codec, trajectories, config.weights);
  }
  return codec;
}

CodecLosses evaluate_codec(const LatentCodec& codec, const Matrix& trajectories,
                           const CodecLossWeights& weights) {
  NoGradGuard no_grad;
  CodecLosses parts;
  codec_loss(Tensor(trajectories / codec.scale()), Tensor(codec.U()), Tensor(codec.V()),
             Tensor::scalar(codec.eta()), weights, &parts);
  return parts;
}

double round_trip_error(const LatentCodec& codec, const Matrix& trajectories) {
  const Matrix recon = codec.decode(codec.encode(trajectories));
  return (recon - trajectories).rowwise().norm().mean();
}

}  // namespace cmtraj
