// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fibro/tensor.hpp"

namespace fibro {

struct ScheduleConfig {
  double lr_max = 1e-4;
  double lr_min = 1e-6;
  int total_epochs = 100;
};

/// lr_min + (lr_max - lr_min) * (1 + cos(pi * epoch / total)) / 2.
/// Throws EpochOutOfRange outside [0, total_epochs].
double cosine_lr(int epoch, const ScheduleConfig& cfg);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-3;
};

/// AdamW with decoupled weight decay. Moments are allocated on first step and
/// must keep matching the parameter shapes afterwards.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// p <- p - lr*wd*p, then the bias-corrected Adam update from p.grad.
  /// Parameters without a gradient buffer are treated as having zero gradient.
  void step(std::span<const TensorPtr> params, double lr);

  long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace fibro
