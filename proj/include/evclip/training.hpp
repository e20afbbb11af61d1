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

// Event-encoder pretraining against frozen teachers, fine-tuning with a
// prediction cross-entropy, few-shot subsetting and train-state checkpoints.
//
// Teachers are only ever held by const reference: nothing in this header can
// write to the image or text encoder parameters.

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "evclip/checkpoint.hpp"
#include "evclip/dataset.hpp"
#include "evclip/encoders.hpp"
#include "evclip/evaluation.hpp"
#include "evclip/losses.hpp"
#include "evclip/optim.hpp"
#include "evclip/parallel.hpp"
#include "evclip/random.hpp"
#include "evclip/synth_data.hpp"

namespace evclip {

enum class UpdateRule { plain_sgd, proposition1 };

inline UpdateRule parse_update_rule(const std::string& s) {
  if (s == "plain_sgd") return UpdateRule::plain_sgd;
  if (s == "proposition1") return UpdateRule::proposition1;
  throw ConfigError("update_rule must be plain_sgd or proposition1, got '" + s + "'");
}

inline const char* update_rule_name(UpdateRule r) { return r == UpdateRule::plain_sgd ? "plain_sgd" : "proposition1"; }

struct OptimizerConfig {
  /// Desk-scale default; 1e-6 reproduces the CLIP-scale setting.
  double learning_rate = 0.05;
  /// Coefficient m of the momentum-like rule; unused by plain SGD.
  double momentum = 0.9;
  int epochs = 200;
  int batch_size = 32;
  UpdateRule update_rule = UpdateRule::plain_sgd;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be >= 0");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw ConfigError("momentum must lie in [0,1]");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }
};

struct MetricRecord {
  std::int64_t step = 0;
  double total = 0.0;
  double ct = 0.0;
  double zs = 0.0;
  double kl = 0.0;
  double heldout_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainState {
  EncoderParams event;
  std::int64_t step = 0;
  Rng rng;
  std::vector<std::uint32_t> epoch_order;  // current shuffled pass over the training split
  std::size_t cursor = 0;                  // next position in epoch_order
  std::vector<MetricRecord> history;
};

/// Fresh state whose event encoder is a copy of the frozen image teacher.
inline TrainState make_train_state(const EncoderParams& image_teacher, std::uint64_t seed) {
  return TrainState{init_event_encoder(image_teacher), 0, Rng(derive_seed(seed, "train-order")), {}, 0, {}};
}

/// Next batch of sample indices; a new seeded permutation starts each epoch.
inline std::vector<std::size_t> next_batch(TrainState& s, std::size_t n, int batch_size) {
  if (n == 0) throw DataError("training split is empty");
  if (s.epoch_order.size() != n || s.cursor >= n) {
    s.epoch_order.resize(n);
    for (std::size_t i = 0; i < n; ++i) s.epoch_order[i] = static_cast<std::uint32_t>(i);
    std::shuffle(s.epoch_order.begin(), s.epoch_order.end(), s.rng);
    s.cursor = 0;
  }
  const std::size_t end = std::min(n, s.cursor + static_cast<std::size_t>(batch_size));
  std::vector<std::size_t> out(s.epoch_order.begin() + static_cast<std::ptrdiff_t>(s.cursor),
                               s.epoch_order.begin() + static_cast<std::ptrdiff_t>(end));
  s.cursor = end;
  return out;
}

// ---------------------------------------------------------------------------
// Gradients

struct GradResult {
  LossBreakdown loss;
  ParamSet grad;
};

/// Combined loss and its gradient with respect to the event encoder only.
/// `image_emb` rows are frozen-teacher outputs for the paired images; `labels`
/// index rows of `text_emb`.
inline GradResult grad_wrt_event_encoder(const EncoderParams& event, std::span<const EventFrame* const> frames,
                                         const RealMatrix& image_emb, const RealMatrix& text_emb,
                                         const std::vector<int>& labels, const LossConfig& cfg, int threads = 1) {
  if (event.role != Role::event) throw DataError("gradient requested for a non-event encoder");
  if (event.frozen) throw DataError("event encoder is frozen; no gradient path");
  const std::size_t n = frames.size();
  if (n == 0) throw DataError("empty batch");
  std::vector<VisionTrace> traces(n);
  BatchEmbeddings b{RealMatrix(static_cast<Eigen::Index>(n), event.arch.z), image_emb, text_emb, labels};
  parallel_for(n, threads, [&](std::size_t i) {
    b.event.row(static_cast<Eigen::Index>(i)) = encode_event(event, *frames[i], &traces[i]).transpose();
  });
  GradResult r{combined_loss(b, cfg), event.params.zeros_like()};
  std::vector<ParamSet> per_sample(n);
  parallel_for(n, threads, [&](std::size_t i) {
    per_sample[i] = event.params.zeros_like();
    vision_backward(event, traces[i], r.loss.d_event.row(static_cast<Eigen::Index>(i)).transpose(), per_sample[i]);
  });
  for (const auto& g : per_sample) r.grad.axpy(1.0, g);
  return r;
}

inline void check_finite_loss(const LossBreakdown& l) {
  const std::pair<const char*, double> terms[] = {{"L_ct", l.ct}, {"L_zs", l.zs}, {"L_kl", l.kl}, {"L", l.total}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) throw NumericalError("non-finite loss term " + std::string(name) + " = " + std::to_string(v));
  }
}

inline void apply_update(EncoderParams& event, const EncoderParams& image_teacher, const ParamSet& grad,
                         const OptimizerConfig& opt) {
  if (event.frozen) throw DataError("refusing to update a frozen encoder");
  if (!grad.all_finite()) throw NumericalError("non-finite gradient");
  if (opt.update_rule == UpdateRule::plain_sgd) {
    sgd_update(event.params, grad, opt.learning_rate);
  } else {
    proposition1_update(event.params, image_teacher.params, grad, opt.momentum, opt.learning_rate);
  }
}

/// Paired batch in embedding-ready form.
struct PretrainBatch {
  std::vector<const EventFrame*> frames;
  RealMatrix image_emb;
  std::vector<int> labels;  // rows of the prompt matrix
};

/// One update of the event encoder on the combined objective.
inline LossBreakdown pretrain_step(TrainState& state, const EncoderParams& image_teacher, const PretrainBatch& batch,
                                   const RealMatrix& text_emb, const LossConfig& loss_cfg, const OptimizerConfig& opt) {
  opt.validate();
  const GradResult g = grad_wrt_event_encoder(state.event, batch.frames, batch.image_emb, text_emb, batch.labels, loss_cfg,
                                              opt.threads);
  check_finite_loss(g.loss);
  apply_update(state.event, image_teacher, g.grad, opt);
  ++state.step;
  return g.loss;
}

struct FinetuneConfig {
  /// Weight of the pretraining objective mixed into fine-tuning (0 = off).
  double pretrain_mix = 0.0;
};

/// Prediction cross-entropy over softmax(E' T'^T / tau_pred); optionally mixed
/// with the pretraining objective when image embeddings are supplied.
inline double finetune_step(TrainState& state, const EncoderParams& image_teacher, const PretrainBatch& batch,
                            const RealMatrix& text_emb, const LossConfig& loss_cfg, const OptimizerConfig& opt,
                            const FinetuneConfig& ft = {}) {
  opt.validate();
  loss_cfg.validate();
  const EncoderParams& event = state.event;
  if (event.frozen) throw DataError("refusing to fine-tune a frozen encoder");
  const std::size_t n = batch.frames.size();
  if (n == 0) throw DataError("empty batch");
  std::vector<VisionTrace> traces(n);
  RealMatrix emb(static_cast<Eigen::Index>(n), event.arch.z);
  parallel_for(n, opt.threads, [&](std::size_t i) {
    emb.row(static_cast<Eigen::Index>(i)) = encode_event(event, *batch.frames[i], &traces[i]).transpose();
  });
  const TermResult pred = pred_loss_from_logits(emb * text_emb.transpose() / loss_cfg.tau_pred, batch.labels);
  if (!std::isfinite(pred.value)) throw NumericalError("non-finite loss term L_pred");
  RealMatrix d_emb = pred.d_query * text_emb / loss_cfg.tau_pred;
  double total = pred.value;
  if (ft.pretrain_mix > 0.0) {
    const LossBreakdown pre = combined_loss(BatchEmbeddings{emb, batch.image_emb, text_emb, batch.labels}, loss_cfg);
    check_finite_loss(pre);
    d_emb += ft.pretrain_mix * pre.d_event;
    total += ft.pretrain_mix * pre.total;
  }
  std::vector<ParamSet> per_sample(n);
  parallel_for(n, opt.threads, [&](std::size_t i) {
    per_sample[i] = event.params.zeros_like();
    vision_backward(event, traces[i], d_emb.row(static_cast<Eigen::Index>(i)).transpose(), per_sample[i]);
  });
  ParamSet grad = event.params.zeros_like();
  for (const auto& g : per_sample) grad.axpy(1.0, g);
  apply_update(state.event, image_teacher, grad, opt);
  ++state.step;
  return total;
}

/// Exactly n samples per class, drawn without replacement under `seed`.
/// Output is class-major in ascending class order.
inline Dataset few_shot_subset(const Dataset& d, int n_per_class, std::uint64_t seed) {
  if (n_per_class < 0) throw ConfigError("n_per_class must be >= 0");
  Dataset out;
  out.class_names = d.class_names;
  out.classes = d.classes;
  for (int c : d.classes) {
    std::vector<const PairedSample*> pool;
    for (const auto& s : d.samples) {
      if (s.class_id == c) pool.push_back(&s);
    }
    if (pool.size() < static_cast<std::size_t>(n_per_class)) {
      throw DataError("class '" + d.class_names[static_cast<std::size_t>(c)] + "' has " + std::to_string(pool.size()) +
                      " samples, fewer than " + std::to_string(n_per_class));
    }
    Rng rng(derive_seed(seed, "few-shot", static_cast<std::uint64_t>(c)));
    std::shuffle(pool.begin(), pool.end(), rng);
    for (int i = 0; i < n_per_class; ++i) out.samples.push_back(*pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train-state checkpoints

inline Archive train_state_archive(const TrainState& s) {
  Archive a;
  a.meta["kind"] = "train_state";
  a.meta["step"] = s.step;
  std::ostringstream rng;
  rng << s.rng;
  a.meta["rng"] = rng.str();
  a.meta["epoch_order"] = s.epoch_order;
  a.meta["cursor"] = s.cursor;
  put_encoder(a, "event/", s.event);
  RealMatrix hist(static_cast<Eigen::Index>(s.history.size()), 6);
  for (std::size_t i = 0; i < s.history.size(); ++i) {
    const auto& h = s.history[i];
    hist.row(static_cast<Eigen::Index>(i)) << static_cast<double>(h.step), h.total, h.ct, h.zs, h.kl, h.heldout_acc;
  }
  a.tensors["history"] = hist;
  return a;
}

inline void save_checkpoint(const TrainState& s, const std::string& path) { save_archive(train_state_archive(s), path); }

inline TrainState train_state_from_archive(const Archive& a) {
  if (a.meta.value("kind", "") != "train_state") throw FormatError("archive is not a training checkpoint");
  TrainState s;
  try {
    s.event = get_encoder(a, "event/");
    s.step = a.meta.at("step").get<std::int64_t>();
    std::istringstream rng(a.meta.at("rng").get<std::string>());
    rng >> s.rng;
    if (!rng) throw FormatError("training checkpoint has a corrupt rng state");
    s.epoch_order = a.meta.at("epoch_order").get<std::vector<std::uint32_t>>();
    s.cursor = a.meta.at("cursor").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("training checkpoint metadata is incomplete: ") + e.what());
  }
  if (auto it = a.tensors.find("history"); it != a.tensors.end()) {
    const RealMatrix& h = it->second;
    for (Eigen::Index r = 0; r < h.rows(); ++r) {
      s.history.push_back(MetricRecord{static_cast<std::int64_t>(h(r, 0)), h(r, 1), h(r, 2), h(r, 3), h(r, 4), h(r, 5)});
    }
  }
  return s;
}

inline TrainState load_checkpoint(const std::string& path) { return train_state_from_archive(load_archive(path)); }

// ---------------------------------------------------------------------------
// Loops

/// Pretraining driver: caches frozen-teacher embeddings for the training split
/// and evaluates heldout zero-shot accuracy on a schedule.
class Pretrainer {
 public:
  Pretrainer(const TeacherPair& teachers, const Dataset& train, const Dataset& heldout, LossConfig loss,
             OptimizerConfig opt, const std::string& prompt_template = "a photo of {class}")
      : teachers_(teachers), train_(train), heldout_(heldout), loss_(loss), opt_(opt) {
    loss_.validate();
    opt_.validate();
    train_prompts_ = class_prompts(teachers.text, train, prompt_template);
    heldout_prompts_ = class_prompts(teachers.text, heldout, prompt_template);
    image_emb_.resize(static_cast<Eigen::Index>(train.samples.size()), teachers.image.arch.z);
    parallel_for(train.samples.size(), opt_.threads, [&](std::size_t i) {
      image_emb_.row(static_cast<Eigen::Index>(i)) = encode_image(teachers.image, train.samples[i].image).transpose();
    });
    for (const auto& s : train.samples) train_labels_.push_back(class_row(train, s.class_id));
  }

  static RealMatrix class_prompts(const EncoderParams& text, const Dataset& d, const std::string& tmpl) {
    std::vector<std::string> names;
    for (int c : d.classes) names.push_back(d.class_names[static_cast<std::size_t>(c)]);
    if (names.empty()) throw DataError("split has no classes");
    return PromptSet::build(text, names, tmpl).embeddings;
  }

  /// Row of class `c` within the split's class list.
  static int class_row(const Dataset& d, int c) {
    const auto it = std::find(d.classes.begin(), d.classes.end(), c);
    if (it == d.classes.end()) throw DataError("class " + std::to_string(c) + " is not part of the split");
    return static_cast<int>(it - d.classes.begin());
  }

  PretrainBatch make_batch(const std::vector<std::size_t>& idx) const {
    PretrainBatch b;
    b.image_emb.resize(static_cast<Eigen::Index>(idx.size()), image_emb_.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      b.frames.push_back(&train_.samples[idx[k]].event);
      b.image_emb.row(static_cast<Eigen::Index>(k)) = image_emb_.row(static_cast<Eigen::Index>(idx[k]));
      b.labels.push_back(train_labels_[idx[k]]);
    }
    return b;
  }

  LossBreakdown step(TrainState& state) const {
    const auto idx = next_batch(state, train_.samples.size(), opt_.batch_size);
    return pretrain_step(state, teachers_.image, make_batch(idx), train_prompts_, loss_, opt_);
  }

  /// Zero-shot top-1 of `encoder` on the heldout event frames against heldout prompts.
  double heldout_accuracy(const EncoderParams& encoder) const {
    return zero_shot_accuracy(encoder, heldout_, heldout_prompts_, opt_.threads);
  }

  static double zero_shot_accuracy(const EncoderParams& encoder, const Dataset& d, const RealMatrix& prompts,
                                   int threads, bool use_images = false) {
    std::vector<int> pred(d.samples.size()), truth(d.samples.size());
    parallel_for(d.samples.size(), threads, [&](std::size_t i) {
      const auto& s = d.samples[i];
      const RealMatrix& input = use_images ? s.image : s.event.values;
      pred[i] = zero_shot_classify(vision_forward(encoder, input), prompts).index;
      truth[i] = class_row(d, s.class_id);
    });
    return top1_accuracy(pred, truth);
  }

  /// Runs `steps` updates, evaluating heldout accuracy at step 0 and every
  /// `eval_every` steps. Records go to state.history, which therefore depends
  /// only on the step schedule: a run stopped and resumed at any step logs the
  /// same records as an uninterrupted one.
  void run(TrainState& state, std::int64_t steps, int eval_every,
           const std::function<void(const MetricRecord&)>& on_record = {}) const {
    if (state.step == 0 && state.history.empty()) {
      MetricRecord r;
      r.step = 0;
      r.total = r.ct = r.zs = r.kl = std::numeric_limits<double>::quiet_NaN();
      r.heldout_acc = heldout_accuracy(state.event);
      state.history.push_back(r);
      if (on_record) on_record(r);
    }
    const std::int64_t target = state.step + steps;
    while (state.step < target) {
      const LossBreakdown l = step(state);
      MetricRecord r{state.step, l.total, l.ct, l.zs, l.kl, std::numeric_limits<double>::quiet_NaN()};
      if (eval_every > 0 && state.step % eval_every == 0) {
        r.heldout_acc = heldout_accuracy(state.event);
      }
      state.history.push_back(r);
      if (on_record) on_record(r);
    }
  }

  /// History for reports: the last record carries a heldout evaluation even
  /// when the run stopped off the schedule. The state itself is untouched.
  std::vector<MetricRecord> report(const TrainState& state) const {
    std::vector<MetricRecord> out = state.history;
    if (!out.empty() && std::isnan(out.back().heldout_acc)) out.back().heldout_acc = heldout_accuracy(state.event);
    return out;
  }

  const RealMatrix& train_prompts() const { return train_prompts_; }
  const RealMatrix& heldout_prompts() const { return heldout_prompts_; }
  const RealMatrix& image_embeddings() const { return image_emb_; }
  const std::vector<int>& train_labels() const { return train_labels_; }
  std::size_t steps_per_epoch() const {
    return (train_.samples.size() + static_cast<std::size_t>(opt_.batch_size) - 1) / static_cast<std::size_t>(opt_.batch_size);
  }

 private:
  const TeacherPair& teachers_;
  const Dataset& train_;
  const Dataset& heldout_;
  LossConfig loss_;
  OptimizerConfig opt_;
  RealMatrix train_prompts_;
  RealMatrix heldout_prompts_;
  RealMatrix image_emb_;
  std::vector<int> train_labels_;
};

/// Fine-tuning driver over one split with its own class prompts.
class Finetuner {
 public:
  Finetuner(const TeacherPair& teachers, const Dataset& data, LossConfig loss, OptimizerConfig opt,
            FinetuneConfig ft = {}, const std::string& prompt_template = "a photo of {class}")
      : teachers_(teachers), data_(data), loss_(loss), opt_(opt), ft_(ft) {
    prompts_ = Pretrainer::class_prompts(teachers.text, data, prompt_template);
    for (const auto& s : data.samples) labels_.push_back(Pretrainer::class_row(data, s.class_id));
    if (ft_.pretrain_mix > 0.0) {
      image_emb_.resize(static_cast<Eigen::Index>(data.samples.size()), teachers.image.arch.z);
      for (std::size_t i = 0; i < data.samples.size(); ++i) {
        image_emb_.row(static_cast<Eigen::Index>(i)) = encode_image(teachers.image, data.samples[i].image).transpose();
      }
    }
  }

  double step(TrainState& state) const {
    const auto idx = next_batch(state, data_.samples.size(), opt_.batch_size);
    PretrainBatch b;
    if (ft_.pretrain_mix > 0.0) b.image_emb.resize(static_cast<Eigen::Index>(idx.size()), image_emb_.cols());
    for (std::size_t k = 0; k < idx.size(); ++k) {
      b.frames.push_back(&data_.samples[idx[k]].event);
      b.labels.push_back(labels_[idx[k]]);
      if (ft_.pretrain_mix > 0.0) b.image_emb.row(static_cast<Eigen::Index>(k)) = image_emb_.row(static_cast<Eigen::Index>(idx[k]));
    }
    return finetune_step(state, teachers_.image, b, prompts_, loss_, opt_, ft_);
  }

  double accuracy(const EncoderParams& encoder, const Dataset& d) const {
    return Pretrainer::zero_shot_accuracy(encoder, d, prompts_, opt_.threads);
  }

  const RealMatrix& prompts() const { return prompts_; }

 private:
  const TeacherPair& teachers_;
  const Dataset& data_;
  LossConfig loss_;
  OptimizerConfig opt_;
  FinetuneConfig ft_;
  RealMatrix prompts_;
  RealMatrix image_emb_;
  std::vector<int> labels_;
};

}  // namespace evclip
