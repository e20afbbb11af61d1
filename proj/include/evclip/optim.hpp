// Copyright 2026 The evclip Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>

#include "evclip/params.hpp"

namespace evclip {

/// theta -= lr * grad
inline void sgd_update(ParamSet& theta, const ParamSet& grad, double lr) { theta.axpy(-lr, grad); }

/// theta <- m * theta + (1 - m) * (target - lr * grad), element-wise.
inline void proposition1_update(ParamSet& theta, const ParamSet& target, const ParamSet& grad, double m, double lr) {
  if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("momentum must lie in [0,1]");
  theta.require_same_layout(target, "proposition1_update target");
  theta.require_same_layout(grad, "proposition1_update gradient");
  auto t_it = target.begin();
  auto g_it = grad.begin();
  for (auto& [_, th] : theta) {
    th = m * th + (1.0 - m) * (t_it->second - lr * g_it->second);
    ++t_it;
    ++g_it;
  }
}

/// Adam, used only to pretrain the toy teacher.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& theta, const ParamSet& grad) {
    if (m_.num_arrays() == 0) {
      m_ = theta.zeros_like();
      v_ = theta.zeros_like();
    }
    theta.require_same_layout(grad, "adam");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto g_it = grad.begin();
    auto m_it = m_.begin();
    auto v_it = v_.begin();
    for (auto& [_, th] : theta) {
      const RealMatrix& g = g_it->second;
      m_it->second = beta1_ * m_it->second + (1.0 - beta1_) * g;
      v_it->second = beta2_ * v_it->second + (1.0 - beta2_) * g.cwiseProduct(g);
      th.array() -= lr_ * (m_it->second.array() / c1) / ((v_it->second.array() / c2).sqrt() + eps_);
      ++g_it;
      ++m_it;
      ++v_it;
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  ParamSet m_, v_;
};

}  // namespace evclip
