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

// Deterministic stand-ins for an image/event dataset and a pretrained
// image-text teacher.
//
// Class k renders shape k % 5 (triangle, square, disc, cross, bar) in one of
// four textures (solid, striped, checkered, hollow) selected by k / 5. Events come
// from replaying the image under seeded integer shifts and brightness
// changes and thresholding consecutive differences, the same rule used for
// video extraction.

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "evclip/checkpoint.hpp"
#include "evclip/dataset.hpp"
#include "evclip/encoders.hpp"
#include "evclip/losses.hpp"
#include "evclip/optim.hpp"
#include "evclip/parallel.hpp"
#include "evclip/random.hpp"
#include "evclip/video_ingest.hpp"

namespace evclip {

inline constexpr int kMaxSyntheticClasses = 20;

struct JitterParams {
  int shift_x = 2;            // max |dx| per step, pixels
  int shift_y = 2;            // max |dy| per step, pixels
  double brightness = 0.1;    // max relative brightness change per step
  int steps = 8;              // number of transitions
  int threshold = 25;         // on the 0..255 scale, strict
  std::uint64_t dt_us = 1000; // time between steps

  bool is_static() const { return shift_x == 0 && shift_y == 0 && brightness == 0.0; }

  void validate() const {
    if (shift_x < 0 || shift_y < 0) throw ConfigError("shift ranges must be >= 0");
    if (!(brightness >= 0.0 && brightness < 1.0)) throw ConfigError("brightness range must be in [0,1)");
    if (steps < 1) throw ConfigError("simulation steps must be >= 1");
    if (threshold < 0 || threshold > 255) throw ConfigError("simulation threshold must be in [0,255]");
  }
};

struct SyntheticConfig {
  int num_classes = 10;
  int samples_per_class = 200;
  int image_size = 32;
  double holdout_fraction = 0.2;
  JitterParams jitter;
  std::int64_t clamp_cap = 10;
  std::string prompt_template = "a photo of {class}";
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (num_classes > kMaxSyntheticClasses) {
      throw ConfigError("num_classes must be <= " + std::to_string(kMaxSyntheticClasses));
    }
    if (samples_per_class < 1) throw ConfigError("samples_per_class must be >= 1");
    if (image_size < 8) throw ConfigError("image_size must be >= 8");
    if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must be in (0,1)");
    if (clamp_cap < 1) throw ConfigError("clamp_cap must be >= 1");
    jitter.validate();
    fill_template(prompt_template, "x");
  }
};

inline std::vector<std::string> synthetic_class_names(int n) {
  static const std::array<const char*, 5> shapes = {"triangle", "square", "disc", "cross", "bar"};
  static const std::array<const char*, 4> textures = {"", "striped ", "checkered ", "hollow "};
  if (n < 1 || n > kMaxSyntheticClasses) throw ConfigError("unsupported synthetic class count");
  std::vector<std::string> out;
  for (int k = 0; k < n; ++k) out.push_back(std::string(textures[static_cast<std::size_t>(k / 5)]) + shapes[static_cast<std::size_t>(k % 5)]);
  return out;
}

/// Grayscale scene for a class, quantized to multiples of 1/255.
inline Image gen_scene(int class_id, std::uint64_t seed, int size = 32) {
  if (class_id < 0 || class_id >= kMaxSyntheticClasses) throw DataError("invalid class id " + std::to_string(class_id));
  if (size < 8) throw ConfigError("scene size must be >= 8");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int shape = class_id % 5;
  const int texture = class_id / 5;
  const double s = static_cast<double>(size);
  const double cx = s * (0.5 + 0.12 * (2.0 * unit(rng) - 1.0));
  const double cy = s * (0.5 + 0.12 * (2.0 * unit(rng) - 1.0));
  const double radius = s * 0.30 * (0.9 + 0.2 * unit(rng));
  const double rotation = 0.25 * (2.0 * unit(rng) - 1.0);
  const double fg = 0.8 + 0.15 * unit(rng);
  const double bg = 0.1;
  const double cr = std::cos(rotation), sr = std::sin(rotation);

  // gauge of a point: <= radius means inside the shape
  auto polygon = [](double u, double v, int sides) {
    const double apothem = std::cos(std::numbers::pi / sides);
    double best = -1e300;
    for (int j = 0; j < sides; ++j) {
      const double a = -std::numbers::pi / 2.0 + (2.0 * j + 1.0) * std::numbers::pi / sides;
      best = std::max(best, (u * std::cos(a) + v * std::sin(a)) / apothem);
    }
    return best;
  };
  auto extent = [&](double px, double py) {
    const double u = (px - cx) * cr + (py - cy) * sr;
    const double v = -(px - cx) * sr + (py - cy) * cr;
    switch (shape) {
      case 0: return polygon(u, v, 3);
      case 1: return std::max(std::abs(u), std::abs(v)) * std::numbers::sqrt2;
      case 2: return std::hypot(u, v);
      case 3: return std::min(std::max(std::abs(u), 3.0 * std::abs(v)), std::max(3.0 * std::abs(u), std::abs(v)));
      default: return std::max(std::abs(u), 3.0 * std::abs(v));
    }
  };

  constexpr int kSuper = 4;
  Image img(size, size);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      double acc = 0.0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = x + (sx + 0.5) / kSuper;
          const double py = y + (sy + 0.5) / kSuper;
          const double e = extent(px, py);
          bool on = e <= radius;
          if (on && texture == 3) on = e > radius - 0.12 * s;
          if (on && texture == 1) on = static_cast<int>(std::floor(py / 3.0)) % 2 == 0;
          if (on && texture == 2) on = (static_cast<int>(std::floor(px / 4.0)) + static_cast<int>(std::floor(py / 4.0))) % 2 == 0;
          acc += on ? fg : bg;
        }
      }
      img(y, x) = std::round(acc / (kSuper * kSuper) * 255.0) / 255.0;
    }
  }
  return img;
}

inline GrayFrame to_gray_frame(const Image& img) {
  GrayFrame f(img.rows(), img.cols());
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    f.data()[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data()[i], 0.0, 1.0) * 255.0));
  }
  return f;
}

/// Frames f_0 .. f_steps: f_0 is the image itself, later frames are shifted
/// (edge-replicated) and brightness-scaled copies.
inline std::vector<GrayFrame> jitter_sequence(const Image& img, const JitterParams& jitter, std::uint64_t seed) {
  jitter.validate();
  Rng rng(seed);
  std::uniform_int_distribution<int> dx_dist(-jitter.shift_x, jitter.shift_x);
  std::uniform_int_distribution<int> dy_dist(-jitter.shift_y, jitter.shift_y);
  std::uniform_real_distribution<double> b_dist(-jitter.brightness, jitter.brightness);
  const auto h = static_cast<int>(img.rows());
  const auto w = static_cast<int>(img.cols());
  std::vector<GrayFrame> frames;
  frames.push_back(to_gray_frame(img));
  for (int s = 0; s < jitter.steps; ++s) {
    const int dx = jitter.shift_x > 0 ? dx_dist(rng) : 0;
    const int dy = jitter.shift_y > 0 ? dy_dist(rng) : 0;
    const double gain = 1.0 + (jitter.brightness > 0.0 ? b_dist(rng) : 0.0);
    Image shifted(h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        shifted(y, x) = gain * img(std::clamp(y - dy, 0, h - 1), std::clamp(x - dx, 0, w - 1));
      }
    }
    frames.push_back(to_gray_frame(shifted));
  }
  return frames;
}

/// Events at every pixel whose change between consecutive jittered frames
/// strictly exceeds the threshold; polarity is the sign of the change.
inline EventStream simulate_events(const Image& img, const JitterParams& jitter, std::uint64_t seed) {
  EventStream out;
  out.width = static_cast<int>(img.cols());
  out.height = static_cast<int>(img.rows());
  if (jitter.is_static()) return out;
  const auto frames = jitter_sequence(img, jitter, seed);
  for (std::size_t s = 1; s < frames.size(); ++s) {
    const GrayFrame& prev = frames[s - 1];
    const GrayFrame& curr = frames[s];
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        const int d = static_cast<int>(curr(y, x)) - static_cast<int>(prev(y, x));
        if (std::abs(d) > jitter.threshold) {
          out.events.push_back(Event{static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y), s * jitter.dt_us,
                                     static_cast<std::int8_t>(d > 0 ? 1 : -1)});
        }
      }
    }
  }
  return out;
}

/// Classes permuted by the seed; the first round(n * fraction) (at least one,
/// at most n - 1) are held out.
inline std::pair<std::vector<int>, std::vector<int>> split_classes(int num_classes, double holdout_fraction,
                                                                   std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(num_classes));
  for (int i = 0; i < num_classes; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(seed, "class-split"));
  std::shuffle(perm.begin(), perm.end(), rng);
  const int held = std::clamp(static_cast<int>(std::lround(num_classes * holdout_fraction)), 1, num_classes - 1);
  std::vector<int> heldout(perm.begin(), perm.begin() + held);
  std::vector<int> train(perm.begin() + held, perm.end());
  std::sort(heldout.begin(), heldout.end());
  std::sort(train.begin(), train.end());
  return {train, heldout};
}

/// Generates both splits. Samples are ordered class-major then by index; ids
/// are class * samples_per_class + index.
inline SplitDataset gen_dataset(const SyntheticConfig& cfg, int threads = 1) {
  cfg.validate();
  const auto names = synthetic_class_names(cfg.num_classes);
  const auto [train_classes, heldout_classes] = split_classes(cfg.num_classes, cfg.holdout_fraction, cfg.seed);

  auto build = [&](const std::vector<int>& classes) {
    Dataset d;
    d.class_names = names;
    d.classes = classes;
    d.samples.resize(classes.size() * static_cast<std::size_t>(cfg.samples_per_class));
    parallel_for(d.samples.size(), threads, [&](std::size_t k) {
      const int c = classes[k / static_cast<std::size_t>(cfg.samples_per_class)];
      const int idx = static_cast<int>(k % static_cast<std::size_t>(cfg.samples_per_class));
      PairedSample& s = d.samples[k];
      s.id = static_cast<std::uint64_t>(c) * static_cast<std::uint64_t>(cfg.samples_per_class) + static_cast<std::uint64_t>(idx);
      s.class_id = c;
      s.prompt = fill_template(cfg.prompt_template, names[static_cast<std::size_t>(c)]);
      const std::uint64_t sample_seed = derive_seed(cfg.seed, "sample", s.id);
      s.image = gen_scene(c, derive_seed(sample_seed, "scene"), cfg.image_size);
      s.stream = simulate_events(s.image, cfg.jitter, derive_seed(sample_seed, "jitter"));
      s.event = events_to_frame(s.stream, cfg.clamp_cap);
    });
    return d;
  };
  return SplitDataset{build(train_classes), build(heldout_classes)};
}

// ---------------------------------------------------------------------------
// Teacher

struct TeacherConfig {
  int epochs = 12;
  double learning_rate = 3e-3;
  int groups_per_batch = 4;  // one image per class in each group
  double temperature = 0.1;
  double min_accuracy = 0.9;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct TeacherPair {
  EncoderParams image;
  EncoderParams text;
};

inline RealMatrix encode_prompts(const EncoderParams& text, const std::vector<std::string>& prompts) {
  RealMatrix out(static_cast<Eigen::Index>(prompts.size()), text.arch.z);
  for (std::size_t i = 0; i < prompts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = encode_text(text, prompts[i]).transpose();
  return out;
}

/// Fraction of images whose nearest prompt (cosine) is their own class.
inline double teacher_accuracy(const TeacherPair& t, const std::vector<const PairedSample*>& samples,
                               const std::vector<std::string>& prompts, int threads = 1) {
  const RealMatrix texts = encode_prompts(t.text, prompts);
  std::vector<int> hit(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const Embedding e = encode_image(t.image, samples[i]->image);
    Eigen::Index best = 0;
    (texts * e).maxCoeff(&best);
    hit[i] = static_cast<int>(best) == samples[i]->class_id ? 1 : 0;
  });
  double sum = 0.0;
  for (int h : hit) sum += h;
  return samples.empty() ? 0.0 : sum / static_cast<double>(samples.size());
}

/// Trains the toy image and text encoders with symmetric image-text InfoNCE
/// over groups holding one image per class, then freezes both.
inline TeacherPair pretrain_teacher(const EncoderArch& arch, const SplitDataset& data, const std::string& prompt_template,
                                    const TeacherConfig& cfg) {
  TeacherPair t{make_vision_encoder(arch, derive_seed(cfg.seed, "teacher-image")),
                make_text_encoder(arch, derive_seed(cfg.seed, "teacher-text"))};
  const auto& names = data.train.class_names;
  const int m = static_cast<int>(names.size());
  std::vector<std::string> prompts;
  for (const auto& n : names) prompts.push_back(fill_template(prompt_template, n));
  std::vector<std::vector<int>> tokens;
  for (const auto& p : prompts) tokens.push_back(tokenize(p, arch.vocab));

  // per-class pools over both splits; the teacher sees every class, as a
  // web-scale image-text model would
  std::vector<std::vector<const PairedSample*>> pools(static_cast<std::size_t>(m));
  std::vector<const PairedSample*> all;
  for (const Dataset* d : {&data.train, &data.heldout}) {
    for (const auto& s : d->samples) {
      pools[static_cast<std::size_t>(s.class_id)].push_back(&s);
      all.push_back(&s);
    }
  }
  std::size_t per_class = SIZE_MAX;
  for (const auto& p : pools) per_class = std::min(per_class, p.size());
  if (per_class == 0 || per_class == SIZE_MAX) throw DataError("teacher pretraining needs samples for every class");
  const int groups = std::max(1, std::min<int>(cfg.groups_per_batch, static_cast<int>(per_class)));
  const std::size_t steps_per_epoch = per_class / static_cast<std::size_t>(groups);

  Adam img_opt(cfg.learning_rate), txt_opt(cfg.learning_rate);
  Rng rng(derive_seed(cfg.seed, "teacher-order"));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::vector<const PairedSample*>> order = pools;
    for (auto& o : order) std::shuffle(o.begin(), o.end(), rng);
    for (std::size_t step = 0; step < steps_per_epoch; ++step) {
      std::vector<TextTrace> ttr(static_cast<std::size_t>(m));
      RealMatrix texts(m, arch.z);
      for (int c = 0; c < m; ++c) texts.row(c) = encode_text(t.text, tokens[static_cast<std::size_t>(c)], &ttr[static_cast<std::size_t>(c)]).transpose();

      const std::size_t batch = static_cast<std::size_t>(groups) * static_cast<std::size_t>(m);
      std::vector<VisionTrace> itr(batch);
      RealMatrix images(static_cast<Eigen::Index>(batch), arch.z);
      parallel_for(batch, cfg.threads, [&](std::size_t k) {
        const std::size_t g = k / static_cast<std::size_t>(m);
        const std::size_t c = k % static_cast<std::size_t>(m);
        const PairedSample* s = order[c][step * static_cast<std::size_t>(groups) + g];
        images.row(static_cast<Eigen::Index>(k)) = encode_image(t.image, s->image, &itr[k]).transpose();
      });

      RealMatrix d_images = RealMatrix::Zero(images.rows(), images.cols());
      RealMatrix d_texts = RealMatrix::Zero(m, arch.z);
      for (int g = 0; g < groups; ++g) {
        const RealMatrix group = images.middleRows(static_cast<Eigen::Index>(g) * m, m);
        const TermResult i2t = info_nce(group, texts, cfg.temperature);
        const TermResult t2i = info_nce(texts, group, cfg.temperature);
        // d(i2t)/d(texts) and d(t2i)/d(group) by symmetry of the logits
        const RealMatrix p_i2t = nn::softmax_rows(group * texts.transpose() / cfg.temperature);
        const RealMatrix p_t2i = nn::softmax_rows(texts * group.transpose() / cfg.temperature);
        const RealMatrix eye = RealMatrix::Identity(m, m);
        const RealMatrix d_i2t_texts = (p_i2t - eye).transpose() * group / (cfg.temperature * m);
        const RealMatrix d_t2i_group = (p_t2i - eye).transpose() * texts / (cfg.temperature * m);
        const double w = 0.5 / groups;
        d_images.middleRows(static_cast<Eigen::Index>(g) * m, m) += w * (i2t.d_query + d_t2i_group);
        d_texts += w * (t2i.d_query + d_i2t_texts);
      }

      std::vector<ParamSet> img_grads(batch);
      parallel_for(batch, cfg.threads, [&](std::size_t k) {
        img_grads[k] = t.image.params.zeros_like();
        vision_backward(t.image, itr[k], d_images.row(static_cast<Eigen::Index>(k)).transpose(), img_grads[k]);
      });
      ParamSet img_grad = t.image.params.zeros_like();
      for (const auto& g : img_grads) img_grad.axpy(1.0, g);
      ParamSet txt_grad = t.text.params.zeros_like();
      for (int c = 0; c < m; ++c) text_backward(t.text, ttr[static_cast<std::size_t>(c)], d_texts.row(c).transpose(), txt_grad);
      if (!img_grad.all_finite() || !txt_grad.all_finite()) throw NumericalError("teacher pretraining diverged");
      img_opt.step(t.image.params, img_grad);
      txt_opt.step(t.text.params, txt_grad);
    }
  }
  t.image.frozen = true;
  t.text.frozen = true;
  const double acc = teacher_accuracy(t, all, prompts, cfg.threads);
  if (acc < cfg.min_accuracy) {
    throw NumericalError("teacher zero-shot accuracy " + std::to_string(acc) + " is below " +
                         std::to_string(cfg.min_accuracy) + "; increase teacher epochs or change the seed");
  }
  return t;
}

inline void save_teacher(const TeacherPair& t, const std::string& path) {
  Archive a;
  a.meta["kind"] = "teacher";
  put_encoder(a, "image/", t.image);
  put_encoder(a, "text/", t.text);
  save_archive(a, path);
}

inline TeacherPair load_teacher(const std::string& path) {
  const Archive a = load_archive(path);
  TeacherPair t{get_encoder(a, "image/"), get_encoder(a, "text/")};
  if (t.image.role != Role::image || t.text.role != Role::text) throw FormatError("'" + path + "' is not a teacher checkpoint");
  return t;
}

}  // namespace evclip
