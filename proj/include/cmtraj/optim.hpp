#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmtraj/tensor.hpp"

namespace cmtraj {

struct AdamWConfig {
  double learning_rate = 0.002;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW(AdamWConfig config, std::span<const Tensor> params);

  // Updates the leaf tensors in place; `params` must match the construction set.
  void step(std::span<Tensor> params, std::span<const Matrix> grads);

  std::int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  AdamWConfig config_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::int64_t step_ = 0;
};

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<Matrix> grads, double max_norm);

/// Ordered, named collection of parameter tensors.
class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);

  std::size_t size() const { return tensors_.size(); }
  std::span<Tensor> tensors() { return tensors_; }
  std::span<const Tensor> tensors() const { return tensors_; }
  const std::vector<std::string>& names() const { return names_; }
  std::size_t scalar_count() const;

  const Tensor& get(const std::string& name) const;

  // JSON container: {"format", "format_version", "tensors": [{name, shape, data}]}.
  nlohmann::json to_json() const;
  // Overwrites values of existing tensors; names and shapes must match.
  void load_json(const nlohmann::json& j);

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
};

inline constexpr int kParamFormatVersion = 1;

}  // namespace cmtraj
