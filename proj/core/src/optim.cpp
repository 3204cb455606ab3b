#include "ltu/optim.hpp"

#include <cmath>
#include <utility>

#include "ltu/errors.hpp"

namespace ltu {

AdamState::AdamState(std::vector<Tensor> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0.0 || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 ||
      cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0 || cfg_.eps <= 0.0) {
    throw ConfigError("AdamState: invalid hyperparameters");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void AdamState::step(double lr_scale) {
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
  const double lr = cfg_.lr * lr_scale;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    if (m_[i].size() != p.numel()) {
      throw RuntimeError("AdamState: parameter " + std::to_string(i) +
                         " changed shape");
    }
    auto vals = p.values_mut();
    std::span<const double> g =
        p.has_grad() ? p.grad() : std::span<const double>();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j];
      m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * gj;
      v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * gj * gj;
      const double m_hat = m_[i][j] / bc1;
      const double v_hat = v_[i][j] / bc2;
      vals[j] -= lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
    p.zero_grad();
  }
}

std::span<const double> AdamState::first_moment(std::size_t param_idx) const {
  return m_.at(param_idx);
}

std::span<const double> AdamState::second_moment(std::size_t param_idx) const {
  return v_.at(param_idx);
}

double clip_grad_norm(std::span<Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const Tensor& p : params) {
    if (!p.has_grad()) continue;
    for (const double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Tensor& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad_mut()) g *= s;
    }
  }
  return norm;
}

}  // namespace ltu
