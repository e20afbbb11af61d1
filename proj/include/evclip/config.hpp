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

// Run configuration as a JSON document. Every key is optional except the
// top-level "seed"; unknown keys, wrong types and out-of-range values raise
// ConfigError naming the dotted key.

#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evclip/errors.hpp"
#include "evclip/losses.hpp"
#include "evclip/synth_data.hpp"
#include "evclip/training.hpp"
#include "evclip/video_ingest.hpp"

namespace evclip {

struct PretrainSchedule {
  std::int64_t max_steps = 0;  // 0: run optimizer.epochs full passes
  int eval_every = 10;
};

struct FinetuneSchedule {
  std::int64_t steps = 500;
  double learning_rate = 0.1;
  int batch_size = 64;
  double pretrain_mix = 0.0;
};

struct FewShotConfig {
  std::vector<int> shots = {0, 1, 2, 5};
  std::int64_t steps = 100;
};

struct VadConfig {
  std::vector<std::string> normal_prompts = {"a photo of normal activity"};
  std::vector<std::string> abnormal_prompts = {"a photo of abnormal activity"};
};

struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  SyntheticConfig data;
  EncoderArch arch;
  TeacherConfig teacher;
  LossConfig loss;
  OptimizerConfig optimizer;
  PretrainSchedule pretrain;
  FinetuneSchedule finetune;
  FewShotConfig fewshot;
  IngestConfig ingest;
  VadConfig vad;

  /// Pushes the shared seed and thread count into every component.
  void propagate() {
    data.seed = derive_seed(seed, "data");
    teacher.seed = derive_seed(seed, "teacher");
    optimizer.seed = derive_seed(seed, "optimizer");
    teacher.threads = threads;
    optimizer.threads = threads;
  }

  void validate() const {
    if (threads < 1) throw ConfigError("threads must be >= 1");
    data.validate();
    arch.validate();
    if (arch.image_size != data.image_size) throw ConfigError("arch.image_size must equal data.image_size");
    loss.validate();
    optimizer.validate();
    ingest.validate();
    if (pretrain.max_steps < 0) throw ConfigError("pretrain.max_steps must be >= 0");
    if (finetune.steps < 0) throw ConfigError("finetune.steps must be >= 0");
    if (finetune.batch_size < 1) throw ConfigError("finetune.batch_size must be >= 1");
    if (!(finetune.pretrain_mix >= 0.0)) throw ConfigError("finetune.pretrain_mix must be >= 0");
    if (!(finetune.learning_rate >= 0.0)) throw ConfigError("finetune.learning_rate must be >= 0");
    for (int n : fewshot.shots) {
      if (n < 0) throw ConfigError("fewshot.shots entries must be >= 0");
    }
    if (vad.normal_prompts.empty() || vad.abnormal_prompts.empty()) throw ConfigError("vad prompt groups must be nonempty");
  }
};

namespace detail {

/// Reads one JSON object, tracking which keys were consumed.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config key '" + display() + "' must be an object");
  }

  template <typename T>
  void get(const std::string& key, T& out, bool required = false) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) {
      if (required) throw ConfigError("missing required config key '" + name(key) + "'");
      return;
    }
    if (!type_ok<T>(*it)) throw ConfigError("config key '" + name(key) + "' has the wrong type (" + it->type_name() + ")");
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("config key '" + name(key) + "' has an unusable value");
    }
  }

  template <typename Fn>
  void section(const std::string& key, Fn&& fn) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    Section s(*it, name(key));
    fn(s);
    s.finish();
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + name(k) + "'");
    }
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  template <typename T>
  static bool type_ok(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) {
      return v.is_boolean();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
    } else if constexpr (std::is_integral_v<T>) {
      return v.is_number_integer();
    } else if constexpr (std::is_floating_point_v<T>) {
      return v.is_number();
    } else if constexpr (std::is_same_v<T, std::string>) {
      return v.is_string();
    } else {
      return v.is_array();
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline KlMode parse_kl_mode(const std::string& s) {
  if (s == "components") return KlMode::components;
  if (s == "batch_rows") return KlMode::batch_rows;
  throw ConfigError("config key 'loss.kl_mode' must be components or batch_rows, got '" + s + "'");
}

inline ZsScope parse_zs_scope(const std::string& s) {
  if (s == "full") return ZsScope::full;
  if (s == "batch") return ZsScope::batch;
  throw ConfigError("config key 'loss.zs_scope' must be full or batch, got '" + s + "'");
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::Section root(j, "");
  root.get("seed", c.seed, true);
  root.get("threads", c.threads);
  root.section("data", [&](detail::Section& s) {
    s.get("num_classes", c.data.num_classes);
    s.get("samples_per_class", c.data.samples_per_class);
    s.get("image_size", c.data.image_size);
    s.get("holdout_fraction", c.data.holdout_fraction);
    s.get("clamp_cap", c.data.clamp_cap);
    s.get("prompt_template", c.data.prompt_template);
    s.section("jitter", [&](detail::Section& t) {
      t.get("shift_x", c.data.jitter.shift_x);
      t.get("shift_y", c.data.jitter.shift_y);
      t.get("brightness", c.data.jitter.brightness);
      t.get("steps", c.data.jitter.steps);
      t.get("threshold", c.data.jitter.threshold);
      t.get("dt_us", c.data.jitter.dt_us);
    });
  });
  root.section("arch", [&](detail::Section& s) {
    s.get("image_size", c.arch.image_size);
    s.get("patch", c.arch.patch);
    s.get("depth", c.arch.depth);
    s.get("width", c.arch.width);
    s.get("heads", c.arch.heads);
    s.get("mlp_ratio", c.arch.mlp_ratio);
    s.get("z", c.arch.z);
    s.get("vocab", c.arch.vocab);
    s.get("text_width", c.arch.text_width);
  });
  root.section("teacher", [&](detail::Section& s) {
    s.get("epochs", c.teacher.epochs);
    s.get("learning_rate", c.teacher.learning_rate);
    s.get("groups_per_batch", c.teacher.groups_per_batch);
    s.get("temperature", c.teacher.temperature);
    s.get("min_accuracy", c.teacher.min_accuracy);
  });
  root.section("loss", [&](detail::Section& s) {
    s.get("tau_ct", c.loss.tau_ct);
    s.get("tau_zs", c.loss.tau_zs);
    s.get("alpha", c.loss.alpha);
    s.get("tau_pred", c.loss.tau_pred);
    std::string kl = "components", zs = "full";
    s.get("kl_mode", kl);
    s.get("zs_scope", zs);
    c.loss.kl_mode = detail::parse_kl_mode(kl);
    c.loss.zs_scope = detail::parse_zs_scope(zs);
    s.get("use_ct", c.loss.use_ct);
    s.get("use_zs", c.loss.use_zs);
    s.get("use_kl", c.loss.use_kl);
  });
  root.section("optimizer", [&](detail::Section& s) {
    s.get("learning_rate", c.optimizer.learning_rate);
    s.get("momentum", c.optimizer.momentum);
    s.get("epochs", c.optimizer.epochs);
    s.get("batch_size", c.optimizer.batch_size);
    std::string rule = update_rule_name(c.optimizer.update_rule);
    s.get("update_rule", rule);
    try {
      c.optimizer.update_rule = parse_update_rule(rule);
    } catch (const ConfigError&) {
      throw ConfigError("config key 'optimizer.update_rule' must be plain_sgd or proposition1, got '" + rule + "'");
    }
  });
  root.section("pretrain", [&](detail::Section& s) {
    s.get("max_steps", c.pretrain.max_steps);
    s.get("eval_every", c.pretrain.eval_every);
  });
  root.section("finetune", [&](detail::Section& s) {
    s.get("steps", c.finetune.steps);
    s.get("learning_rate", c.finetune.learning_rate);
    s.get("batch_size", c.finetune.batch_size);
    s.get("pretrain_mix", c.finetune.pretrain_mix);
  });
  root.section("fewshot", [&](detail::Section& s) {
    s.get("shots", c.fewshot.shots);
    s.get("steps", c.fewshot.steps);
  });
  root.section("ingest", [&](detail::Section& s) {
    s.get("window", c.ingest.window);
    s.get("stride", c.ingest.stride);
    s.get("threshold", c.ingest.threshold);
  });
  root.section("vad", [&](detail::Section& s) {
    s.get("normal_prompts", c.vad.normal_prompts);
    s.get("abnormal_prompts", c.vad.abnormal_prompts);
  });
  root.finish();
  c.propagate();
  c.validate();
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  const auto& d = c.data;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"data",
       {{"num_classes", d.num_classes},
        {"samples_per_class", d.samples_per_class},
        {"image_size", d.image_size},
        {"holdout_fraction", d.holdout_fraction},
        {"clamp_cap", d.clamp_cap},
        {"prompt_template", d.prompt_template},
        {"jitter",
         {{"shift_x", d.jitter.shift_x},
          {"shift_y", d.jitter.shift_y},
          {"brightness", d.jitter.brightness},
          {"steps", d.jitter.steps},
          {"threshold", d.jitter.threshold},
          {"dt_us", d.jitter.dt_us}}}}},
      {"arch", arch_to_json(c.arch)},
      {"teacher",
       {{"epochs", c.teacher.epochs},
        {"learning_rate", c.teacher.learning_rate},
        {"groups_per_batch", c.teacher.groups_per_batch},
        {"temperature", c.teacher.temperature},
        {"min_accuracy", c.teacher.min_accuracy}}},
      {"loss",
       {{"tau_ct", c.loss.tau_ct},
        {"tau_zs", c.loss.tau_zs},
        {"alpha", c.loss.alpha},
        {"tau_pred", c.loss.tau_pred},
        {"kl_mode", c.loss.kl_mode == KlMode::components ? "components" : "batch_rows"},
        {"zs_scope", c.loss.zs_scope == ZsScope::full ? "full" : "batch"},
        {"use_ct", c.loss.use_ct},
        {"use_zs", c.loss.use_zs},
        {"use_kl", c.loss.use_kl}}},
      {"optimizer",
       {{"learning_rate", c.optimizer.learning_rate},
        {"momentum", c.optimizer.momentum},
        {"epochs", c.optimizer.epochs},
        {"batch_size", c.optimizer.batch_size},
        {"update_rule", update_rule_name(c.optimizer.update_rule)}}},
      {"pretrain", {{"max_steps", c.pretrain.max_steps}, {"eval_every", c.pretrain.eval_every}}},
      {"finetune",
       {{"steps", c.finetune.steps},
        {"learning_rate", c.finetune.learning_rate},
        {"batch_size", c.finetune.batch_size},
        {"pretrain_mix", c.finetune.pretrain_mix}}},
      {"fewshot", {{"shots", c.fewshot.shots}, {"steps", c.fewshot.steps}}},
      {"ingest", {{"window", c.ingest.window}, {"stride", c.ingest.stride}, {"threshold", c.ingest.threshold}}},
      {"vad", {{"normal_prompts", c.vad.normal_prompts}, {"abnormal_prompts", c.vad.abnormal_prompts}}},
  };
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace evclip
