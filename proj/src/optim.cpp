#include "cmtraj/optim.hpp"

#include <cmath>

namespace cmtraj {

AdamW::AdamW(AdamWConfig config, std::span<const Tensor> params) : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(Matrix::Zero(p.rows(), p.cols()));
    v_.emplace_back(Matrix::Zero(p.rows(), p.cols()));
  }
}

void AdamW::step(std::span<Tensor> params, std::span<const Matrix> grads) {
  require(params.size() == m_.size() && grads.size() == m_.size(),
          "AdamW::step: parameter count differs from optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].rows() == m_[i].rows() && params[i].cols() == m_[i].cols() &&
                grads[i].rows() == m_[i].rows() && grads[i].cols() == m_[i].cols(),
            "AdamW::step: shape mismatch for parameter " + std::to_string(i));
    if (!grads[i].allFinite()) {
      throw NumericalError("AdamW::step: non-finite gradient for parameter " + std::to_string(i));
    }
  }
  ++step_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params[i].mutable_value();
    const Matrix& g = grads[i];
    p *= (1.0 - lr * config_.weight_decay);
    m_[i] = b1 * m_[i] + (1.0 - b1) * g;
    v_[i] = b2 * v_[i] + (1.0 - b2) * g.cwiseProduct(g);
    p.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.epsilon);
  }
}

double clip_grad_norm(std::span<Matrix> grads, double max_norm) {
  double total = 0.0;
  for (const auto& g : grads) total += g.squaredNorm();
  const double norm = std::sqrt(total);
  if (norm > max_norm && norm > 0.0) {
    const double factor = max_norm / norm;
    for (auto& g : grads) g *= factor;
  }
  return norm;
}

void ParameterSet::add(std::string name, Tensor tensor) {
  for (const auto& n : names_) {
    require(n != name, "ParameterSet::add: duplicate name " + name);
  }
  names_.push_back(std::move(name));
  tensors_.push_back(std::move(tensor));
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += static_cast<std::size_t>(t.size());
  return n;
}

const Tensor& ParameterSet::get(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return tensors_[i];
  }
  throw ContractViolation("ParameterSet::get: unknown parameter " + name);
}

nlohmann::json ParameterSet::to_json() const {
  nlohmann::json j;
  j["format"] = "cmtraj-params";
  j["format_version"] = kParamFormatVersion;
  auto& arr = j["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const Matrix& m = tensors_[i].value();
    arr.push_back({{"name", names_[i]},
                   {"shape", {m.rows(), m.cols()}},
                   {"data", std::vector<double>(m.data(), m.data() + m.size())}});
  }
  return j;
}

void ParameterSet::load_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "cmtraj-params") {
    throw ConfigError("parameter container: unexpected format tag");
  }
  if (j.value("format_version", 0) != kParamFormatVersion) {
    throw ConfigError("parameter container: unsupported format_version");
  }
  const auto& arr = j.at("tensors");
  if (arr.size() != names_.size()) {
    throw ConfigError("parameter container: tensor count mismatch");
  }
  for (std::size_t i = 0; i < names_.size(); ++i) {
    const auto& e = arr[i];
    if (e.at("name").get<std::string>() != names_[i]) {
      throw ConfigError("parameter container: expected tensor " + names_[i]);
    }
    const auto shape = e.at("shape").get<std::vector<Index>>();
    Matrix& m = tensors_[i].mutable_value();
    if (shape.size() != 2 || shape[0] != m.rows() || shape[1] != m.cols()) {
      throw ConfigError("parameter container: shape mismatch for " + names_[i]);
    }
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Index>(data.size()) != m.size()) {
      throw ConfigError("parameter container: data length mismatch for " + names_[i]);
    }
    std::copy(data.begin(), data.end(), m.data());
  }
}

}  // namespace cmtraj
