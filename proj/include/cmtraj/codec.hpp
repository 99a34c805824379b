#pragma once

// Linear codec between flattened trajectories and a low-dimensional latent
// space: x = (X / scale) U and X = (x V) scale.

#include <cstdint>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "cmtraj/tensor.hpp"

namespace cmtraj {

struct CodecLossWeights {
  double rec = 1.0;
  double reg = 0.1;
  double var = 0.1;
  // Match squared distances of sample pairs instead of squared norms of samples.
  bool pairwise_reg = false;
};

enum class CodecInit { kPca, kRandom };

struct CodecFitConfig {
  int latent_dim = 10;
  int epochs = 60;
  int batch_size = 256;
  double learning_rate = 1e-3;
  CodecLossWeights weights;
  CodecInit init = CodecInit::kPca;
  // Choose `scale` so the mean per-dimension latent second moment is latent_rms^2.
  bool auto_scale = true;
  double latent_rms = 0.5;
  // After gradient descent, replace V by the least-squares decoder for the fitted U.
  bool refit_decoder = true;
  std::uint64_t seed = 0;
};

class LatentCodec {
 public:
  LatentCodec() = default;
  LatentCodec(int traj_dim, int latent_dim);
  static LatentCodec identity(int dim);

  int traj_dim() const { return static_cast<int>(u_.rows()); }
  int latent_dim() const { return static_cast<int>(u_.cols()); }

  // Row-vector conventions: rows of the argument are samples.
  Matrix encode(const Matrix& trajectories) const;
  Matrix decode(const Matrix& latents) const;
  Eigen::RowVectorXd encode(std::span<const double> trajectory) const;
  Eigen::RowVectorXd decode(std::span<const double> latent) const;

  const Matrix& U() const { return u_; }
  const Matrix& V() const { return v_; }
  double eta() const { return eta_; }
  double scale() const { return scale_; }

  void set_U(Matrix u);
  void set_V(Matrix v);
  void set_eta(double eta) { eta_ = eta; }
  void set_scale(double scale);

  nlohmann::json to_json() const;
  static LatentCodec from_json(const nlohmann::json& j);

 private:
  Matrix u_;
  Matrix v_;
  double eta_ = 1.0;
  double scale_ = 1.0;
};

struct CodecLosses {
  double rec = 0.0;
  double reg = 0.0;
  double var = 0.0;
  double total = 0.0;
};

/// Differentiable composite loss on a batch of scaled trajectories (rows).
Tensor codec_loss(const Tensor& data, const Tensor& u, const Tensor& v, const Tensor& eta,
                  const CodecLossWeights& weights, CodecLosses* parts = nullptr);

/// Fits U, V and eta on trajectories (rows, metres). Throws NumericalError on divergence.
LatentCodec fit_codec(const Matrix& trajectories, const CodecFitConfig& config,
                      CodecLosses* final_losses = nullptr);

/// Loss components of a codec on a dataset, evaluated in the codec's scaled space.
CodecLosses evaluate_codec(const LatentCodec& codec, const Matrix& trajectories,
                           const CodecLossWeights& weights);

/// Mean Euclidean round-trip error per sample, in the input units.
double round_trip_error(const LatentCodec& codec, const Matrix& trajectories);

/// Orthogonal R such that R^T C R has all diagonal entries equal to trace(C)/n.
Matrix equalizing_rotation(const Matrix& covariance);

inline constexpr int kCodecFormatVersion = 1;

}  // namespace cmtraj
