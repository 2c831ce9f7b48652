// SPDX-License-Identifier: Apache-2.0
#include "fibro/optim.hpp"

#include <cmath>
#include <numbers>

#include "fibro/error.hpp"

namespace fibro {

double cosine_lr(int epoch, const ScheduleConfig& cfg) {
  if (cfg.total_epochs < 1 || !(cfg.lr_min > 0.0) || cfg.lr_min > cfg.lr_max)
    throw Error(ErrorCode::InvalidConfig, "schedule needs 0 < lr_min <= lr_max and total_epochs >= 1");
  if (epoch < 0 || epoch > cfg.total_epochs)
    throw Error(ErrorCode::EpochOutOfRange,
                "epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.total_epochs) + "]");
  const double progress = static_cast<double>(epoch) / static_cast<double>(cfg.total_epochs);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

void AdamW::step(std::span<const TensorPtr> params, double lr) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0);
      v_[i].assign(params[i]->size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "AdamW: parameter count changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    if (m_[i].size() != p.size()) throw Error(ErrorCode::ShapeMismatch, "AdamW: parameter shape changed");
    if (!p.grad.empty() && p.grad.size() != p.size())
      throw Error(ErrorCode::ShapeMismatch, "AdamW: gradient shape differs from parameter");
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = p.grad.empty() ? 0.0 : p.grad[j];
      p.value[j] -= lr * cfg_.weight_decay * p.value[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.value[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace fibro
