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

// Alignment objectives over batches of unit-norm embeddings (one row per
// sample). Every term is reduced by the arithmetic mean over the batch and
// returns its gradient with respect to the event embeddings, which is the
// only input that depends on trainable parameters.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "evclip/errors.hpp"
#include "evclip/event_core.hpp"
#include "evclip/nn_ops.hpp"

namespace evclip {

/// How embeddings become distributions for the KL term.
enum class KlMode {
  components,   // softmax over the z components of each embedding
  batch_rows,   // softmax over each row of the batch similarity matrix against I'
};

/// Which class texts form the denominator of the zero-shot term.
enum class ZsScope {
  full,   // every prompt passed in
  batch,  // only classes present in the batch
};

struct LossConfig {
  double tau_ct = 1.0;
  double tau_zs = 2.0;
  double alpha = 0.1;
  /// Temperature of the similarity softmax used for fine-tuning predictions.
  double tau_pred = 0.5;
  KlMode kl_mode = KlMode::components;
  ZsScope zs_scope = ZsScope::full;
  bool use_ct = true;
  bool use_zs = true;
  bool use_kl = true;

  void validate() const {
    if (!(tau_ct > 0.0)) throw ConfigError("tau_ct must be > 0");
    if (!(tau_zs > 0.0)) throw ConfigError("tau_zs must be > 0");
    if (!(tau_pred > 0.0)) throw ConfigError("tau_pred must be > 0");
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
  }
};

/// Loss value and its gradient with respect to the query rows.
struct TermResult {
  double value = 0.0;
  RealMatrix d_query;
};

namespace detail {

inline void require_finite(const RealMatrix& m, const char* what) {
  if (!m.allFinite()) throw DataError(std::string(what) + " contains non-finite values");
}

/// Mean cross-entropy of row-wise softmax(logits) against `targets`, with
/// gradient with respect to the logits.
inline TermResult softmax_cross_entropy(const RealMatrix& logits, const std::vector<int>& targets) {
  const auto n = logits.rows();
  TermResult r;
  r.d_query = nn::softmax_rows(logits);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    r.value += nn::log_sum_exp(logits.row(i)) - logits(i, t);
    r.d_query(i, t) -= 1.0;
  }
  r.value /= static_cast<double>(n);
  r.d_query /= static_cast<double>(n);
  return r;
}

}  // namespace detail

/// Contrastive loss with E' rows as queries and I' rows as keys; key i is the
/// positive for query i.
inline TermResult info_nce(const RealMatrix& queries, const RealMatrix& keys, double tau) {
  if (queries.rows() == 0) throw DataError("info_nce: empty batch");
  if (!(tau > 0.0)) throw ConfigError("info_nce: temperature must be > 0");
  if (queries.rows() != keys.rows() || queries.cols() != keys.cols()) throw DimensionError("info_nce: shape mismatch");
  detail::require_finite(queries, "info_nce queries");
  const RealMatrix logits = queries * keys.transpose() / tau;
  std::vector<int> diag(static_cast<std::size_t>(queries.rows()));
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
  TermResult ce = detail::softmax_cross_entropy(logits, diag);
  return TermResult{ce.value, ce.d_query * keys / tau};
}

struct ZsResult {
  double value = 0.0;       // event_term + image_term
  double event_term = 0.0;  // E' against T'
  double image_term = 0.0;  // I' against T'; constant under frozen teachers
  RealMatrix d_event;
};

/// Cross-entropy of both event and image embeddings against class texts,
/// with the text of each sample's label as the target.
inline ZsResult zs_loss(const RealMatrix& event, const RealMatrix& image, const RealMatrix& texts,
                        const std::vector<int>& labels, double tau, ZsScope scope = ZsScope::full) {
  const auto n = event.rows();
  if (n == 0) throw DataError("zs_loss: empty batch");
  if (texts.rows() == 0) throw DataError("zs_loss: no class texts");
  if (!(tau > 0.0)) throw ConfigError("zs_loss: temperature must be > 0");
  if (image.rows() != n || static_cast<Eigen::Index>(labels.size()) != n || event.cols() != texts.cols() ||
      image.cols() != texts.cols()) {
    throw DimensionError("zs_loss: shape mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= texts.rows()) throw DataError("zs_loss: label " + std::to_string(y) + " out of range");
  }
  detail::require_finite(event, "zs_loss event embeddings");

  std::vector<int> classes;
  std::vector<int> targets(labels.size());
  if (scope == ZsScope::full) {
    classes.resize(static_cast<std::size_t>(texts.rows()));
    for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<int>(c);
    targets = labels;
  } else {
    classes = labels;
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      targets[i] = static_cast<int>(std::lower_bound(classes.begin(), classes.end(), labels[i]) - classes.begin());
    }
  }
  RealMatrix keys(static_cast<Eigen::Index>(classes.size()), texts.cols());
  for (std::size_t c = 0; c < classes.size(); ++c) keys.row(static_cast<Eigen::Index>(c)) = texts.row(classes[c]);

  const TermResult ev = detail::softmax_cross_entropy(event * keys.transpose() / tau, targets);
  const TermResult im = detail::softmax_cross_entropy(image * keys.transpose() / tau, targets);
  ZsResult r;
  r.event_term = ev.value;
  r.image_term = im.value;
  r.value = ev.value + im.value;
  r.d_event = ev.d_query * keys / tau;
  return r;
}

/// Mean over rows of KL(p_i || q_i) for rows that are probability distributions.
inline double kl_divergence_rows(const RealMatrix& p, const RealMatrix& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols() || p.rows() == 0) throw DimensionError("kl: shape mismatch");
  if (!p.allFinite() || !q.allFinite()) throw DataError("kl: non-finite input");
  if (p.minCoeff() <= 0.0 || q.minCoeff() <= 0.0) throw DataError("kl: distributions must be strictly positive");
  return (p.array() * (p.array() / q.array()).log()).sum() / static_cast<double>(p.rows());
}

/// KL(E' || I') after turning each row into a distribution per `mode`.
inline TermResult kl_align(const RealMatrix& event, const RealMatrix& image, KlMode mode = KlMode::components) {
  if (event.rows() != image.rows() || event.cols() != image.cols() || event.rows() == 0) {
    throw DimensionError("kl_align: shape mismatch");
  }
  if (!event.allFinite() || !image.allFinite()) throw DataError("kl_align: non-finite input");
  const auto n = static_cast<double>(event.rows());
  const RealMatrix ev_logits = mode == KlMode::components ? event : RealMatrix(event * image.transpose());
  const RealMatrix im_logits = mode == KlMode::components ? image : RealMatrix(image * image.transpose());
  const RealMatrix p = nn::softmax_rows(ev_logits);
  const RealMatrix q = nn::softmax_rows(im_logits);
  // log-softmax differences avoid log(0) when a probability underflows
  RealMatrix log_ratio(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    log_ratio.row(i) = (ev_logits.row(i).array() - nn::log_sum_exp(ev_logits.row(i))) -
                       (im_logits.row(i).array() - nn::log_sum_exp(im_logits.row(i)));
  }
  TermResult r;
  RealMatrix d_logits(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double kl_i = p.row(i).dot(log_ratio.row(i));
    r.value += kl_i;
    d_logits.row(i) = p.row(i).array() * (log_ratio.row(i).array() - kl_i);
  }
  r.value /= n;
  d_logits /= n;
  r.d_query = mode == KlMode::components ? d_logits : RealMatrix(d_logits * image);
  return r;
}

/// Rows of E', I', class texts T', and per-row class labels into T'.
struct BatchEmbeddings {
  RealMatrix event;
  RealMatrix image;
  RealMatrix text;
  std::vector<int> labels;
};

struct LossBreakdown {
  double total = 0.0;
  double ct = 0.0;
  double zs = 0.0;
  double zs_event = 0.0;
  double zs_image = 0.0;
  double kl = 0.0;
  RealMatrix d_event;
};

/// L = L_ct + alpha * L_zs + L_kl. Disabled terms are still evaluated and
/// reported but carry zero weight.
inline LossBreakdown combined_loss(const BatchEmbeddings& b, const LossConfig& cfg) {
  cfg.validate();
  const TermResult ct = info_nce(b.event, b.image, cfg.tau_ct);
  const ZsResult zs = zs_loss(b.event, b.image, b.text, b.labels, cfg.tau_zs, cfg.zs_scope);
  const TermResult kl = kl_align(b.event, b.image, cfg.kl_mode);
  const double w_ct = cfg.use_ct ? 1.0 : 0.0;
  const double w_zs = cfg.use_zs ? cfg.alpha : 0.0;
  const double w_kl = cfg.use_kl ? 1.0 : 0.0;
  LossBreakdown out;
  out.ct = ct.value;
  out.zs = zs.value;
  out.zs_event = zs.event_term;
  out.zs_image = zs.image_term;
  out.kl = kl.value;
  out.total = w_ct * ct.value + w_zs * zs.value + w_kl * kl.value;
  out.d_event = w_ct * ct.d_query + w_zs * zs.d_event + w_kl * kl.d_query;
  return out;
}

/// Mean cross-entropy of predicted distributions (rows) against class indices.
inline double pred_loss(const RealMatrix& probs, const std::vector<int>& labels) {
  if (probs.rows() == 0 || static_cast<Eigen::Index>(labels.size()) != probs.rows()) {
    throw DimensionError("pred_loss: need one label per prediction row");
  }
  double total = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    if (!probs.row(i).allFinite() || probs.row(i).minCoeff() < 0.0 || std::abs(probs.row(i).sum() - 1.0) > 1e-6) {
      throw DataError("pred_loss: row " + std::to_string(i) + " is not a probability distribution");
    }
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probs.cols()) throw DataError("pred_loss: label out of range");
    total -= std::log(probs(i, y));
  }
  return total / static_cast<double>(probs.rows());
}

/// One-hot target form: -(1/N) sum_i sum_c y_ic log p_ic.
inline double pred_loss(const RealMatrix& probs, const RealMatrix& one_hot) {
  if (one_hot.rows() != probs.rows() || one_hot.cols() != probs.cols()) throw DimensionError("pred_loss: shape mismatch");
  std::vector<int> labels(static_cast<std::size_t>(one_hot.rows()));
  for (Eigen::Index i = 0; i < one_hot.rows(); ++i) {
    Eigen::Index c = 0;
    if (std::abs(one_hot.row(i).sum() - 1.0) > 1e-12 || one_hot.row(i).maxCoeff(&c) != 1.0) {
      throw DataError("pred_loss: target row " + std::to_string(i) + " is not one-hot");
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(c);
  }
  return pred_loss(probs, labels);
}

/// Fine-tuning loss from similarity logits; gradient is with respect to the logits.
inline TermResult pred_loss_from_logits(const RealMatrix& logits, const std::vector<int>& labels) {
  if (logits.rows() == 0 || static_cast<Eigen::Index>(labels.size()) != logits.rows()) {
    throw DimensionError("pred_loss: need one label per logit row");
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.cols()) throw DataError("pred_loss: label out of range");
  }
  detail::require_finite(logits, "pred_loss logits");
  return detail::softmax_cross_entropy(logits, labels);
}

}  // namespace evclip
