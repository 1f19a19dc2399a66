// Copyright 2026 The sae-diff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace saediff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam state for one parameter block. Blocks are registered in a fixed order
// by their owner, so moment buffers stay aligned with parameters.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  std::size_t add_block(std::size_t n) {
    m_.emplace_back(n, 0.0);
    v_.emplace_back(n, 0.0);
    return m_.size() - 1;
  }

  // Call once per optimisation step before the per-block updates.
  void begin_step() {
    ++t_;
    bc1_ = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    bc2_ = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  }

  template <class T>
  void update(std::size_t block, std::span<T> param, std::span<const T> grad, double lr) {
    auto& m = m_[block];
    auto& v = v_[block];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
      const double mh = m[i] / bc1_;
      const double vh = v[i] / bc2_;
      param[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg_.eps));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
  double bc1_ = 1, bc2_ = 1;
};

}  // namespace saediff
