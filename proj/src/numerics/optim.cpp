#include "mad/numerics/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace mad {

Optimizer::Optimizer(std::vector<Parameter*> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  for (Parameter* p : params_) {
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Optimizer::step(double lr_scale) {
  ++t_;
  const double lr = config_.lr * lr_scale;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.frozen) continue;
    auto w = p.value.data();
    auto g = p.grad.data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] + config_.weight_decay * w[k];
      if (config_.kind == OptimizerKind::Sgd) {
        w[k] -= lr * gk;
        continue;
      }
      m_[i][k] = config_.beta1 * m_[i][k] + (1.0 - config_.beta1) * gk;
      v_[i][k] = config_.beta2 * v_[i][k] + (1.0 - config_.beta2) * gk * gk;
      w[k] -= lr * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + config_.eps);
    }
  }
}

double warmup_cosine(std::size_t step, std::size_t total, double warmup_frac) {
  total = std::max<std::size_t>(1, total);
  const auto warm = std::max<std::size_t>(1, static_cast<std::size_t>(warmup_frac * static_cast<double>(total)));
  if (step < warm) return static_cast<double>(step + 1) / static_cast<double>(warm);
  const double t = static_cast<double>(step - warm) / static_cast<double>(std::max<std::size_t>(1, total - warm));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t)));
}

}  // namespace mad
