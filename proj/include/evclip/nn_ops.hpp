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

// Forward/backward primitives for the toy encoders. Activations are row-major
// (tokens x features); every backward accumulates into caller-owned grads.

#include <cmath>
#include <numbers>

#include "evclip/event_core.hpp"

namespace evclip::nn {

using RowVector = Eigen::RowVectorXd;

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  RealMatrix xhat;
  Eigen::VectorXd inv_std;
};

inline RealMatrix layer_norm(const RealMatrix& x, const RealMatrix& gamma, const RealMatrix& beta,
                             LayerNormCache* cache) {
  const auto d = static_cast<double>(x.cols());
  RealMatrix xhat(x.rows(), x.cols());
  Eigen::VectorXd inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / d;
    const RowVector centered = x.row(r).array() - mu;
    const double var = centered.squaredNorm() / d;
    inv_std(r) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.row(r) = centered * inv_std(r);
  }
  RealMatrix y = (xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array();
  if (cache) *cache = LayerNormCache{std::move(xhat), std::move(inv_std)};
  return y;
}

inline RealMatrix layer_norm_backward(const RealMatrix& dy, const LayerNormCache& cache, const RealMatrix& gamma,
                                      RealMatrix& d_gamma, RealMatrix& d_beta) {
  d_gamma.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  d_beta.row(0) += dy.colwise().sum();
  const RealMatrix dxhat = dy.array().rowwise() * gamma.row(0).array();
  const auto d = static_cast<double>(dy.cols());
  RealMatrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_dxhat = dxhat.row(r).sum() / d;
    const double mean_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r)) / d;
    dx.row(r) = cache.inv_std(r) *
                (dxhat.row(r).array() - mean_dxhat - cache.xhat.row(r).array() * mean_dxhat_xhat).matrix();
  }
  return dx;
}

/// y = x W + b, b broadcast over rows.
inline RealMatrix linear(const RealMatrix& x, const RealMatrix& w, const RealMatrix& b) {
  RealMatrix y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

/// Accumulates dW, db and returns dx.
inline RealMatrix linear_backward(const RealMatrix& dy, const RealMatrix& x, const RealMatrix& w, RealMatrix& d_w,
                                  RealMatrix& d_b) {
  d_w.noalias() += x.transpose() * dy;
  d_b.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

// tanh approximation of GELU
inline double gelu(double u) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * u * (1.0 + std::tanh(c * (u + 0.044715 * u * u * u)));
}

inline double gelu_grad(double u) {
  constexpr double c = 0.7978845608028654;
  const double t = std::tanh(c * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * u * u);
}

inline RealMatrix softmax_rows(const RealMatrix& s) {
  RealMatrix p(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    p.row(r) = (s.row(r).array() - mx).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

/// Backward of row softmax given its output p.
inline RealMatrix softmax_rows_backward(const RealMatrix& dp, const RealMatrix& p) {
  RealMatrix ds(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double inner = dp.row(r).dot(p.row(r));
    ds.row(r) = p.row(r).array() * (dp.row(r).array() - inner);
  }
  return ds;
}

inline double log_sum_exp(const Eigen::Ref<const RowVector>& v) {
  const double mx = v.maxCoeff();
  return mx + std::log((v.array() - mx).exp().sum());
}

/// Gradient of y = v / |v| pulled back to v.
inline Eigen::VectorXd l2_normalize_backward(const Eigen::VectorXd& dy, const Eigen::VectorXd& y, double norm) {
  return (dy - y * y.dot(dy)) / norm;
}

}  // namespace evclip::nn
