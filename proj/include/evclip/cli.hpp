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

// Command-line front end. Every command writes its outputs plus a run
// manifest at "<out>.manifest.json"; `evclip replay <manifest>` re-executes
// the recorded command from the manifest alone.
//
// Exit codes: 0 success, 1 internal error, 2 usage or configuration error,
// 3 data or format error, 4 numerical failure.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "evclip/config.hpp"
#include "evclip/evaluation.hpp"
#include "evclip/training.hpp"
#include "evclip/video_ingest.hpp"

#ifndef EVCLIP_VERSION
#define EVCLIP_VERSION "0.0.0"
#endif

namespace evclip::cli {

enum ExitCode : int { kOk = 0, kInternal = 1, kUsage = 2, kData = 3, kNumerical = 4 };

class UsageError : public Error {
 public:
  using Error::Error;
};

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Relative output paths are placed under $EVCLIP_OUTPUT_ROOT when it is set.
inline std::string resolve_output(const std::string& path) {
  const char* root = std::getenv("EVCLIP_OUTPUT_ROOT");
  if (root == nullptr || *root == '\0' || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

inline void require_input(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::exists(path)) throw UsageError(what + " '" + path + "' does not exist");
}

inline void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

/// Matplotlib script that plots columns of a tab-separated file; rows with
/// "nan" in a column are skipped for that column.
inline void write_plot_script(const std::string& path, const std::string& data_file, const std::string& x,
                              const std::vector<std::string>& ys, const std::string& group = "",
                              const std::string& ylabel = "") {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << "#!/usr/bin/env python3\n"
         "\"\"\"Plots " << data_file << "; writes a PNG next to this script.\"\"\"\n"
         "import csv\nimport math\nimport os\n\n"
         "import matplotlib\nmatplotlib.use(\"Agg\")\nimport matplotlib.pyplot as plt\n\n"
         "HERE = os.path.dirname(os.path.abspath(__file__))\n"
         "DATA = os.path.join(HERE, \"" << data_file << "\")\n"
         "X = \"" << x << "\"\n"
         "YS = [";
  for (std::size_t i = 0; i < ys.size(); ++i) out << (i ? ", " : "") << '"' << ys[i] << '"';
  out << "]\nGROUP = \"" << group << "\"\n\n"
         "with open(DATA, newline=\"\") as f:\n"
         "    rows = list(csv.DictReader(f, delimiter=\"\\t\"))\n\n"
         "groups = {}\n"
         "for r in rows:\n"
         "    groups.setdefault(r[GROUP] if GROUP else \"\", []).append(r)\n\n"
         "fig, ax = plt.subplots(figsize=(7, 4))\n"
         "for name, rs in groups.items():\n"
         "    for y in YS:\n"
         "        pts = [(float(r[X]), float(r[y])) for r in rs if r[y] != \"nan\" and not math.isnan(float(r[y]))]\n"
         "        if pts:\n"
         "            label = \" \".join(p for p in (name, y) if p)\n"
         "            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=\".\", label=label)\n"
         "ax.set_xlabel(X)\n"
         "ax.set_ylabel(\"" << ylabel << "\")\n"
         "ax.legend()\n"
         "fig.tight_layout()\n"
         "fig.savefig(os.path.splitext(DATA)[0] + \".png\", dpi=120)\n";
}

/// State shared by every command invocation.
struct Invocation {
  std::string command;
  std::vector<std::string> args;  // argv after the program name
  RunConfig cfg;
  std::chrono::steady_clock::time_point started = std::chrono::steady_clock::now();
  std::ostream* out = &std::cout;

  void write_manifest(const std::string& primary_output, const json& outputs, const json& extra = json::object()) const {
    json m;
    m["command"] = command;
    m["args"] = args;
    m["config"] = config_to_json(cfg);
    m["seed"] = cfg.seed;
    m["threads"] = cfg.threads;
    m["code_version"] = EVCLIP_VERSION;
    m["outputs"] = outputs;
    m["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    for (const auto& [k, v] : extra.items()) m[k] = v;
    const std::string path = primary_output + ".manifest.json";
    ensure_parent(path);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write manifest '" + path + "'");
    f << m.dump(2) << '\n';
  }
};

// ---------------------------------------------------------------------------
// Shared loaders

inline SplitDataset load_dataset(const std::string& dir, const RunConfig& cfg) {
  require_input(dir, "--data directory");
  return SplitDataset{read_dataset_split(dir, "train", cfg.data.clamp_cap), read_dataset_split(dir, "heldout", cfg.data.clamp_cap)};
}

inline TeacherPair load_teacher_or_explain(const std::string& path, const std::string& data_dir) {
  if (path.empty() || !fs::exists(path)) {
    throw UsageError("teacher checkpoint '" + path + "' not found; create it first with `evclip pretrain-teacher --data " +
                     (data_dir.empty() ? std::string("<dataset>") : data_dir) + " --out " +
                     (path.empty() ? std::string("<teacher.evck>") : path) + "`");
  }
  TeacherPair t = load_teacher(path);
  if (!t.image.frozen || !t.text.frozen) throw DataError("teacher checkpoint '" + path + "' is not frozen");
  return t;
}

/// Event encoder from a training checkpoint, or the step-0 copy of the image teacher.
inline EncoderParams load_event_encoder(const std::string& checkpoint, const TeacherPair& t) {
  if (checkpoint.empty()) return init_event_encoder(t.image);
  require_input(checkpoint, "--checkpoint");
  return load_checkpoint(checkpoint).event;
}

inline Dataset select_split(const SplitDataset& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "heldout") return d.heldout;
  throw UsageError("--split must be train or heldout, got '" + split + "'");
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& flag) {
  std::vector<int> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(flag + " expects comma-separated integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError(flag + " is empty");
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline void write_loss_log(const std::string& path, const std::vector<MetricRecord>& history) {
  std::vector<std::vector<std::string>> rows;
  for (const auto& r : history) {
    rows.push_back({std::to_string(r.step), format_real(r.total), format_real(r.ct), format_real(r.zs), format_real(r.kl),
                    format_real(r.heldout_acc)});
  }
  write_table(path, {"step", "L", "L_ct", "L_zs", "L_kl", "heldout_acc"}, rows);
}

struct GenDataOptions {
  std::string out;
};

inline void cmd_gen_data(const Invocation& inv, const GenDataOptions& o) {
  const std::string dir = resolve_output(o.out);
  const SplitDataset data = gen_dataset(inv.cfg.data, inv.cfg.threads);
  write_dataset(data, dir);
  inv.write_manifest(dir, {{"dataset", dir}},
                     {{"train_samples", data.train.samples.size()},
                      {"heldout_samples", data.heldout.samples.size()},
                      {"heldout_classes", data.heldout.classes}});
  *inv.out << "wrote " << data.train.samples.size() << " train and " << data.heldout.samples.size()
           << " heldout samples to " << dir << '\n';
}

struct TeacherOptions {
  std::string data;
  std::string out;
};

inline void cmd_pretrain_teacher(const Invocation& inv, const TeacherOptions& o) {
  const SplitDataset data = load_dataset(o.data, inv.cfg);
  const std::string out = resolve_output(o.out);
  const TeacherPair t = pretrain_teacher(inv.cfg.arch, data, inv.cfg.data.prompt_template, inv.cfg.teacher);
  ensure_parent(out);
  save_teacher(t, out);
  std::vector<const PairedSample*> all;
  for (const Dataset* d : {&data.train, &data.heldout}) {
    for (const auto& s : d->samples) all.push_back(&s);
  }
  std::vector<std::string> prompts;
  for (const auto& n : data.train.class_names) prompts.push_back(fill_template(inv.cfg.data.prompt_template, n));
  const double acc = teacher_accuracy(t, all, prompts, inv.cfg.threads);
  inv.write_manifest(out, {{"teacher", out}}, {{"teacher_accuracy", acc}});
  *inv.out << "teacher zero-shot accuracy " << format_real(acc) << "; saved " << out << '\n';
}

struct PretrainOptions {
  std::string data;
  std::string teacher;
  std::string out;
  std::string resume;
  std::int64_t steps = -1;
  int eval_every = -1;
  bool no_ct = false;
  bool no_zs = false;
  bool no_kl = false;
};

inline LossConfig ablated_loss(LossConfig l, bool no_ct, bool no_zs, bool no_kl) {
  if (no_ct) l.use_ct = false;
  if (no_zs) l.use_zs = false;
  if (no_kl) l.use_kl = false;
  return l;
}

inline std::int64_t pretrain_steps(const RunConfig& cfg, const Pretrainer& p, std::int64_t override_steps) {
  if (override_steps >= 0) return override_steps;
  if (cfg.pretrain.max_steps > 0) return cfg.pretrain.max_steps;
  return static_cast<std::int64_t>(cfg.optimizer.epochs) * static_cast<std::int64_t>(p.steps_per_epoch());
}

inline void cmd_pretrain(const Invocation& inv, const PretrainOptions& o) {
  const SplitDataset data = load_dataset(o.data, inv.cfg);
  const TeacherPair t = load_teacher_or_explain(o.teacher, o.data);
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  const LossConfig loss = ablated_loss(inv.cfg.loss, o.no_ct, o.no_zs, o.no_kl);
  const Pretrainer p(t, data.train, data.heldout, loss, inv.cfg.optimizer, inv.cfg.data.prompt_template);
  TrainState state;
  if (!o.resume.empty()) {
    require_input(o.resume, "--resume checkpoint");
    state = load_checkpoint(o.resume);
    if (!state.event.params.same_layout(t.image.params)) throw DataError("resume checkpoint does not match the teacher architecture");
  } else {
    state = make_train_state(t.image, inv.cfg.optimizer.seed);
  }
  const std::int64_t total = pretrain_steps(inv.cfg, p, o.steps);
  if (state.step > total) throw UsageError("checkpoint is already past the requested step count");
  const int eval_every = o.eval_every >= 0 ? o.eval_every : inv.cfg.pretrain.eval_every;
  p.run(state, total - state.step, eval_every);
  const std::string ckpt = (fs::path(dir) / "checkpoint.evck").string();
  const std::string log = (fs::path(dir) / "loss_log.tsv").string();
  save_checkpoint(state, ckpt);
  const std::vector<MetricRecord> history = p.report(state);
  write_loss_log(log, history);
  write_plot_script((fs::path(dir) / "plot_loss_log.py").string(), "loss_log.tsv", "step", {"L", "L_ct", "L_zs", "L_kl"}, "",
                    "loss");
  write_plot_script((fs::path(dir) / "plot_heldout_acc.py").string(), "loss_log.tsv", "step", {"heldout_acc"}, "",
                    "heldout zero-shot top-1");
  inv.write_manifest(dir, {{"checkpoint", ckpt}, {"loss_log", log}},
                     {{"steps", state.step}, {"use_ct", loss.use_ct}, {"use_zs", loss.use_zs}, {"use_kl", loss.use_kl}});
  const auto& last = history.back();
  *inv.out << "pretrained " << state.step << " steps; heldout zero-shot " << format_real(last.heldout_acc) << '\n';
}

struct FinetuneOptions {
  std::string data;
  std::string teacher;
  std::string init;
  std::string split = "train";
  std::string out;
  std::int64_t steps = -1;
  int eval_every = 25;
};

inline OptimizerConfig finetune_optimizer(const RunConfig& cfg) {
  OptimizerConfig opt = cfg.optimizer;
  opt.learning_rate = cfg.finetune.learning_rate;
  opt.batch_size = cfg.finetune.batch_size;
  opt.seed = derive_seed(cfg.seed, "finetune");
  return opt;
}

inline void cmd_finetune(const Invocation& inv, const FinetuneOptions& o) {
  const SplitDataset data = load_dataset(o.data, inv.cfg);
  const TeacherPair t = load_teacher_or_explain(o.teacher, o.data);
  const Dataset split = select_split(data, o.split);
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  const OptimizerConfig opt = finetune_optimizer(inv.cfg);
  const Finetuner ft(t, split, inv.cfg.loss, opt, FinetuneConfig{inv.cfg.finetune.pretrain_mix}, inv.cfg.data.prompt_template);
  TrainState state = make_train_state(t.image, opt.seed);
  state.event = load_event_encoder(o.init, t);
  const std::int64_t steps = o.steps >= 0 ? o.steps : inv.cfg.finetune.steps;
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"0", "nan", format_real(ft.accuracy(state.event, split))});
  for (std::int64_t s = 1; s <= steps; ++s) {
    const double l = ft.step(state);
    const bool eval = (o.eval_every > 0 && s % o.eval_every == 0) || s == steps;
    rows.push_back({std::to_string(s), format_real(l), eval ? format_real(ft.accuracy(state.event, split)) : "nan"});
  }
  const std::string ckpt = (fs::path(dir) / "checkpoint.evck").string();
  const std::string log = (fs::path(dir) / "finetune_log.tsv").string();
  save_checkpoint(state, ckpt);
  write_table(log, {"step", "L_pred", "train_acc"}, rows);
  write_plot_script((fs::path(dir) / "plot_finetune_log.py").string(), "finetune_log.tsv", "step", {"train_acc"}, "",
                    "top-1");
  const std::string final_acc = rows.back()[2];
  inv.write_manifest(dir, {{"checkpoint", ckpt}, {"finetune_log", log}}, {{"steps", steps}, {"final_accuracy", final_acc}});
  *inv.out << "fine-tuned " << steps << " steps on " << o.split << "; top-1 " << final_acc << '\n';
}

struct ZeroShotOptions {
  std::string data;
  std::string teacher;
  std::string checkpoint;
  std::string split = "heldout";
  std::string out;
};

inline double split_accuracy(const EncoderParams& enc, const Dataset& d, const RealMatrix& prompts, int threads,
                             bool images) {
  return Pretrainer::zero_shot_accuracy(enc, d, prompts, threads, images);
}

inline void cmd_eval_zeroshot(const Invocation& inv, const ZeroShotOptions& o) {
  const SplitDataset data = load_dataset(o.data, inv.cfg);
  const TeacherPair t = load_teacher_or_explain(o.teacher, o.data);
  const Dataset split = select_split(data, o.split);
  const EncoderParams event = load_event_encoder(o.checkpoint, t);
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  const RealMatrix prompts = Pretrainer::class_prompts(t.text, split, inv.cfg.data.prompt_template);
  const int th = inv.cfg.threads;
  const double ev = split_accuracy(event, split, prompts, th, false);
  const double ev_img = split_accuracy(event, split, prompts, th, true);
  EncoderParams teacher_as_event = init_event_encoder(t.image);
  const double teacher_img = split_accuracy(teacher_as_event, split, prompts, th, true);
  const std::string n = std::to_string(split.samples.size());
  const std::string table = (fs::path(dir) / "zeroshot.tsv").string();
  write_table(table, {"encoder", "input", "split", "samples", "top1"},
              {{"event", "event_frame", o.split, n, format_real(ev)},
               {"event", "paired_image", o.split, n, format_real(ev_img)},
               {"image_teacher", "paired_image", o.split, n, format_real(teacher_img)}});
  std::vector<std::vector<std::string>> preds;
  for (const auto& s : split.samples) {
    const ZeroShotResult r = zero_shot_classify(encode_event(event, s.event), prompts);
    preds.push_back({std::to_string(s.id), std::to_string(s.class_id),
                     std::to_string(split.classes[static_cast<std::size_t>(r.index)]),
                     format_real(r.probabilities[r.index])});
  }
  const std::string pred_path = (fs::path(dir) / "predictions.tsv").string();
  write_table(pred_path, {"id", "class", "predicted", "probability"}, preds);
  inv.write_manifest(dir, {{"table", table}, {"predictions", pred_path}},
                     {{"event_top1", ev}, {"event_on_images_top1", ev_img}, {"teacher_top1", teacher_img}});
  *inv.out << "zero-shot top-1 on " << o.split << ": event " << format_real(ev) << ", teacher on images "
           << format_real(teacher_img) << '\n';
}

struct FewShotOptions {
  std::string data;
  std::string teacher;
  std::string checkpoint;
  std::string shots;
  std::string out;
};

/// Per-shot result: trains on exactly n samples per heldout class, evaluates
/// on the remaining heldout samples. n = 0 is plain zero-shot on the split.
struct FewShotRow {
  int shots = 0;
  std::size_t train_samples = 0;
  std::size_t eval_samples = 0;
  double top1 = 0.0;
};

inline FewShotRow run_few_shot(const RunConfig& cfg, const TeacherPair& t, const EncoderParams& start, const Dataset& heldout,
                               int n) {
  OptimizerConfig opt = finetune_optimizer(cfg);
  const Dataset subset = few_shot_subset(heldout, n, derive_seed(cfg.seed, "few-shot-sample"));
  std::set<std::uint64_t> used;
  for (const auto& s : subset.samples) used.insert(s.id);
  Dataset eval;
  eval.class_names = heldout.class_names;
  eval.classes = heldout.classes;
  for (const auto& s : heldout.samples) {
    if (!used.count(s.id)) eval.samples.push_back(s);
  }
  if (eval.samples.empty()) throw DataError("few-shot n=" + std::to_string(n) + " leaves no heldout samples to evaluate");
  const RealMatrix prompts = Pretrainer::class_prompts(t.text, heldout, cfg.data.prompt_template);
  EncoderParams enc = start;
  if (n > 0) {
    const Finetuner ft(t, subset, cfg.loss, opt, FinetuneConfig{cfg.finetune.pretrain_mix}, cfg.data.prompt_template);
    TrainState state = make_train_state(t.image, derive_seed(opt.seed, "shots", static_cast<std::uint64_t>(n)));
    state.event = start;
    for (std::int64_t s = 0; s < cfg.fewshot.steps; ++s) ft.step(state);
    enc = state.event;
  }
  return FewShotRow{n, subset.samples.size(), eval.samples.size(),
                    Pretrainer::zero_shot_accuracy(enc, eval, prompts, cfg.threads)};
}

inline void cmd_eval_fewshot(const Invocation& inv, const FewShotOptions& o) {
  const SplitDataset data = load_dataset(o.data, inv.cfg);
  const TeacherPair t = load_teacher_or_explain(o.teacher, o.data);
  const EncoderParams start = load_event_encoder(o.checkpoint, t);
  const std::vector<int> shots = o.shots.empty() ? inv.cfg.fewshot.shots : parse_int_list(o.shots, "--shots");
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  std::vector<std::vector<std::string>> rows;
  json summary = json::object();
  for (int n : shots) {
    if (n < 0) throw UsageError("--shots entries must be >= 0");
    const FewShotRow r = run_few_shot(inv.cfg, t, start, data.heldout, n);
    rows.push_back({std::to_string(r.shots), std::to_string(r.train_samples), std::to_string(r.eval_samples), format_real(r.top1)});
    summary[std::to_string(n)] = r.top1;
    *inv.out << n << "-shot top-1 " << format_real(r.top1) << '\n';
  }
  const std::string table = (fs::path(dir) / "fewshot.tsv").string();
  write_table(table, {"shots", "train_samples", "eval_samples", "top1"}, rows);
  write_plot_script((fs::path(dir) / "plot_fewshot.py").string(), "fewshot.tsv", "shots", {"top1"}, "", "top-1");
  inv.write_manifest(dir, {{"table", table}}, {{"top1", summary}});
}

struct VadOptions {
  std::string instances;
  std::string teacher;
  std::string checkpoint;
  std::string out;
};

inline void cmd_eval_vad(const Invocation& inv, const VadOptions& o) {
  require_input(o.instances, "--instances file");
  const TeacherPair t = load_teacher_or_explain(o.teacher, "");
  const EncoderParams event = load_event_encoder(o.checkpoint, t);
  const auto instances = read_instances(o.instances);
  const RealMatrix normal = encode_prompts(t.text, inv.cfg.vad.normal_prompts);
  const RealMatrix abnormal = encode_prompts(t.text, inv.cfg.vad.abnormal_prompts);
  std::vector<double> scores(instances.size());
  std::vector<int> labels;
  parallel_for(instances.size(), inv.cfg.threads, [&](std::size_t i) {
    scores[i] = anomaly_score(encode_event(event, instances[i].frame), normal, abnormal);
  });
  std::vector<std::vector<std::string>> rows;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const auto& inst = instances[i];
    if (!inst.label) throw DataError("instance " + std::to_string(i) + " has no label; AUC needs labeled instances");
    labels.push_back(*inst.label);
    rows.push_back({std::to_string(i), std::to_string(inst.start), std::to_string(inst.end), std::to_string(*inst.label),
                    format_real(scores[i])});
  }
  const double a = auc(scores, labels);
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  const std::string score_path = (fs::path(dir) / "scores.tsv").string();
  write_table(score_path, {"instance", "start", "end", "label", "score"}, rows);
  const std::string metric_path = (fs::path(dir) / "vad.tsv").string();
  write_table(metric_path, {"metric", "value"}, {{"AUC", format_real(a)}, {"instances", std::to_string(instances.size())}});
  // ROC points at every distinct threshold, highest first
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return scores[x] > scores[y]; });
  const double pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const double neg = static_cast<double>(labels.size()) - pos;
  std::vector<std::vector<std::string>> roc{{"0", "0"}};
  double tp = 0.0, fp = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (labels[order[k]] == 1 ? tp : fp) += 1.0;
    if (k + 1 == order.size() || scores[order[k + 1]] != scores[order[k]]) roc.push_back({format_real(fp / neg), format_real(tp / pos)});
  }
  const std::string roc_path = (fs::path(dir) / "roc.tsv").string();
  write_table(roc_path, {"fpr", "tpr"}, roc);
  write_plot_script((fs::path(dir) / "plot_roc.py").string(), "roc.tsv", "fpr", {"tpr"}, "", "true positive rate");
  inv.write_manifest(dir, {{"scores", score_path}, {"metrics", metric_path}, {"roc", roc_path}}, {{"auc", a}});
  *inv.out << "VAD AUC " << format_real(a) << " over " << instances.size() << " instances\n";
}

struct RetrievalOptions {
  std::string queries;
  std::string keys;
  std::string relevance;
  std::string ks = "1,5,10";
  std::string out;
};

inline void cmd_eval_retrieval(const Invocation& inv, const RetrievalOptions& o) {
  require_input(o.queries, "--queries embedding set");
  require_input(o.keys, "--keys embedding set");
  require_input(o.relevance, "--relevance file");
  const EmbeddingSet q = read_embedding_set(o.queries);
  const EmbeddingSet k = read_embedding_set(o.keys);
  RetrievalSet rs{q.vectors, q.ids, k.vectors, k.ids, read_relevance(o.relevance)};
  const RetrievalMetrics m = retrieval_metrics(rs, parse_int_list(o.ks, "--ks"));
  std::vector<std::vector<std::string>> rows;
  json summary = json::object();
  for (const auto& [cut, v] : m.recall) {
    rows.push_back({"Recall@" + std::to_string(cut), format_real(v)});
    summary["Recall@" + std::to_string(cut)] = v;
  }
  for (const auto& [cut, v] : m.mean_ap) {
    rows.push_back({"mAP@" + std::to_string(cut), format_real(v)});
    summary["mAP@" + std::to_string(cut)] = v;
  }
  rows.push_back({"MRR", format_real(m.mrr)});
  summary["MRR"] = m.mrr;
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  const std::string table = (fs::path(dir) / "retrieval.tsv").string();
  write_table(table, {"metric", "value"}, rows);
  inv.write_manifest(dir, {{"table", table}}, {{"metrics", summary}});
  for (const auto& r : rows) *inv.out << r[0] << ' ' << r[1] << '\n';
}

struct ExtractOptions {
  std::string video;
  std::string labels;
  std::string out;
  int window = -1;
  int stride = -1;
  int threshold = -1;
};

inline void cmd_extract_events(const Invocation& inv, const ExtractOptions& o) {
  require_input(o.video, "--video dump");
  IngestConfig ic = inv.cfg.ingest;
  if (o.window >= 0) ic.window = o.window;
  if (o.stride >= 0) ic.stride = o.stride;
  else if (o.window >= 0) ic.stride = ic.window;
  if (o.threshold >= 0) ic.threshold = o.threshold;
  VideoClip clip{read_video_dump(o.video), std::nullopt};
  if (!o.labels.empty()) {
    require_input(o.labels, "--labels file");
    clip.labels = read_labels(o.labels);
  }
  const auto instances = segment_video(clip, ic);
  const std::string out = resolve_output(o.out);
  ensure_parent(out);
  write_instances(instances, out);
  json hist = json::object();
  for (const auto& inst : instances) {
    if (inst.label) hist[std::to_string(*inst.label)] = hist.value(std::to_string(*inst.label), 0) + 1;
  }
  inv.write_manifest(out, {{"instances", out}},
                     {{"instance_count", instances.size()},
                      {"label_histogram", hist},
                      {"window", ic.window},
                      {"stride", ic.stride},
                      {"threshold", ic.threshold}});
  *inv.out << "extracted " << instances.size() << " event instances to " << out << '\n';
}

struct GenVideoOptions {
  std::string out;
  std::string labels;
  int frames = 320;
  int size = 32;
};

/// Synthetic surveillance-style clip: a shape drifting slowly, with abnormal
/// stretches where it jumps erratically. Frame labels mark the abnormal spans.
inline void cmd_gen_video(const Invocation& inv, const GenVideoOptions& o) {
  if (o.frames < 1) throw UsageError("--frames must be >= 1");
  if (o.size < 8) throw UsageError("--size must be >= 8");
  Rng rng(derive_seed(inv.cfg.seed, "video"));
  std::uniform_int_distribution<int> cls(0, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Image base = gen_scene(cls(rng), derive_seed(inv.cfg.seed, "video-scene"), o.size);
  const GrayFrame still = to_gray_frame(base);
  std::vector<GrayFrame> frames;
  std::vector<int> labels;
  int dx = 0, dy = 0;
  bool abnormal = false;
  for (int f = 0; f < o.frames; ++f) {
    if (f % 16 == 0) abnormal = unit(rng) < 0.3;
    if (abnormal) {
      std::uniform_int_distribution<int> jump(-4, 4);
      dx = std::clamp(dx + jump(rng), -o.size / 4, o.size / 4);
      dy = std::clamp(dy + jump(rng), -o.size / 4, o.size / 4);
    } else if (f % 8 == 0) {
      dx = std::clamp(dx + (unit(rng) < 0.5 ? -1 : 1), -o.size / 4, o.size / 4);
    }
    GrayFrame g(o.size, o.size);
    for (int y = 0; y < o.size; ++y) {
      for (int x = 0; x < o.size; ++x) g(y, x) = still(std::clamp(y - dy, 0, o.size - 1), std::clamp(x - dx, 0, o.size - 1));
    }
    frames.push_back(std::move(g));
    labels.push_back(abnormal ? 1 : 0);
  }
  const std::string out = resolve_output(o.out);
  ensure_parent(out);
  write_video_dump(frames, out);
  json outputs{{"video", out}};
  if (!o.labels.empty()) {
    const std::string lp = resolve_output(o.labels);
    ensure_parent(lp);
    write_labels(labels, lp);
    outputs["labels"] = lp;
  }
  inv.write_manifest(out, outputs, {{"frames", o.frames}});
  *inv.out << "wrote " << o.frames << " frames to " << out << '\n';
}

struct AblateOptions {
  std::string data;
  std::string teacher;
  std::string out;
  std::int64_t steps = -1;
  int eval_every = -1;
};

inline void cmd_ablate(const Invocation& inv, const AblateOptions& o) {
  const SplitDataset data = load_dataset(o.data, inv.cfg);
  const TeacherPair t = load_teacher_or_explain(o.teacher, o.data);
  const std::string dir = resolve_output(o.out);
  fs::create_directories(dir);
  struct Variant {
    const char* name;
    bool no_ct, no_zs, no_kl;
  };
  const Variant variants[] = {{"all", false, false, false}, {"no_ct", true, false, false}, {"no_zs", false, true, false},
                              {"no_kl", false, false, true}};
  std::vector<std::vector<std::string>> curves, summary;
  json js = json::object();
  for (const auto& v : variants) {
    const LossConfig loss = ablated_loss(inv.cfg.loss, v.no_ct, v.no_zs, v.no_kl);
    const Pretrainer p(t, data.train, data.heldout, loss, inv.cfg.optimizer, inv.cfg.data.prompt_template);
    TrainState state = make_train_state(t.image, inv.cfg.optimizer.seed);
    const std::int64_t steps = pretrain_steps(inv.cfg, p, o.steps);
    p.run(state, steps, o.eval_every >= 0 ? o.eval_every : inv.cfg.pretrain.eval_every);
    const std::vector<MetricRecord> history = p.report(state);
    double lo = 1.0;
    for (const auto& r : history) {
      if (std::isnan(r.heldout_acc)) continue;
      lo = std::min(lo, r.heldout_acc);
      curves.push_back({v.name, std::to_string(r.step), format_real(r.total), format_real(r.heldout_acc)});
    }
    const double first = history.front().heldout_acc;
    const double last = history.back().heldout_acc;
    summary.push_back({v.name, format_real(first), format_real(lo), format_real(last)});
    js[v.name] = {{"step0", first}, {"min", lo}, {"final", last}};
    *inv.out << v.name << ": heldout step0 " << format_real(first) << " min " << format_real(lo) << " final "
             << format_real(last) << '\n';
  }
  const std::string curve_path = (fs::path(dir) / "ablation_curves.tsv").string();
  const std::string summary_path = (fs::path(dir) / "ablation_summary.tsv").string();
  write_table(curve_path, {"config", "step", "L", "heldout_acc"}, curves);
  write_table(summary_path, {"config", "step0_acc", "min_acc", "final_acc"}, summary);
  write_plot_script((fs::path(dir) / "plot_ablation_curves.py").string(), "ablation_curves.tsv", "step", {"heldout_acc"},
                    "config", "heldout zero-shot top-1");
  inv.write_manifest(dir, {{"curves", curve_path}, {"summary", summary_path}}, {{"summary", js}});
}

// ---------------------------------------------------------------------------
// Dispatch

inline int exit_code_for(const std::exception_ptr& e, std::ostream& err) {
  try {
    std::rethrow_exception(e);
  } catch (const UsageError& x) {
    err << "usage error: " << x.what() << '\n';
    return kUsage;
  } catch (const ConfigError& x) {
    err << "config error: " << x.what() << '\n';
    return kUsage;
  } catch (const NumericalError& x) {
    err << "numerical error: " << x.what() << '\n';
    return kNumerical;
  } catch (const DataError& x) {
    err << "data error: " << x.what() << '\n';
    return kData;
  } catch (const DimensionError& x) {
    err << "data error: " << x.what() << '\n';
    return kData;
  } catch (const std::exception& x) {
    err << "internal error: " << x.what() << '\n';
    return kInternal;
  }
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

/// Re-runs the command recorded in a manifest with its stored config.
inline int replay(const std::string& manifest_path, std::ostream& out, std::ostream& err) {
  require_input(manifest_path, "manifest");
  std::ifstream in(manifest_path);
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + manifest_path + "' is not valid JSON: " + e.what());
  }
  std::vector<std::string> args;
  try {
    args = m.at("args").get<std::vector<std::string>>();
    const std::string cfg_path = manifest_path + ".config.json";
    std::ofstream(cfg_path) << m.at("config").dump(2) << '\n';
    // replace any recorded --config/--seed/--threads with the stored snapshot
    std::vector<std::string> clean;
    for (std::size_t i = 0; i < args.size(); ++i) {
      const std::string& a = args[i];
      if (a == "--config" || a == "--seed" || a == "--threads") {
        ++i;
        continue;
      }
      if (a.rfind("--config=", 0) == 0 || a.rfind("--seed=", 0) == 0 || a.rfind("--threads=", 0) == 0) continue;
      clean.push_back(a);
    }
    clean.push_back("--config");
    clean.push_back(cfg_path);
    args = clean;
  } catch (const json::exception& e) {
    throw FormatError("manifest '" + manifest_path + "' is incomplete: " + e.what());
  }
  return run(args, out, err);
}

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Event-encoder alignment toolkit: data generation, training and evaluation", "evclip"};
  app.require_subcommand(1);
  app.set_version_flag("--version", EVCLIP_VERSION);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration (defaults apply to absent keys)");
    sub->add_option("--seed", seed, "root seed; overrides the config");
    sub->add_option("--threads", threads, "worker threads; 1 is bit-reproducible")->check(CLI::PositiveNumber);
  };

  std::function<void(Invocation&)> action;

  auto* print = app.add_subcommand("print-config", "print the default configuration as JSON");
  common(print);
  print->callback([&] { action = [&](Invocation& inv) { *inv.out << config_to_json(inv.cfg).dump(2) << '\n'; }; });

  GenDataOptions gd;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic paired dataset");
  common(gen);
  gen->add_option("--out", gd.out, "dataset directory")->required();
  gen->callback([&] { action = [&](Invocation& inv) { cmd_gen_data(inv, gd); }; });

  TeacherOptions to;
  auto* teach = app.add_subcommand("pretrain-teacher", "train and freeze the toy image/text teacher");
  common(teach);
  teach->add_option("--data", to.data, "dataset directory")->required();
  teach->add_option("--out", to.out, "teacher checkpoint path")->required();
  teach->callback([&] { action = [&](Invocation& inv) { cmd_pretrain_teacher(inv, to); }; });

  PretrainOptions po;
  auto* pre = app.add_subcommand("pretrain", "align the event encoder to the frozen teacher");
  common(pre);
  pre->add_option("--data", po.data, "dataset directory")->required();
  pre->add_option("--teacher", po.teacher, "teacher checkpoint")->required();
  pre->add_option("--out", po.out, "run directory")->required();
  pre->add_option("--resume", po.resume, "training checkpoint to continue from");
  pre->add_option("--steps", po.steps, "total optimizer steps (default: from config)");
  pre->add_option("--eval-every", po.eval_every, "heldout evaluation period in steps");
  pre->add_flag("--no-ct", po.no_ct, "drop the event-image contrastive term");
  pre->add_flag("--no-zs", po.no_zs, "drop the zero-shot preservation term");
  pre->add_flag("--no-kl", po.no_kl, "drop the distribution alignment term");
  pre->callback([&] { action = [&](Invocation& inv) { cmd_pretrain(inv, po); }; });

  FinetuneOptions fo;
  auto* fine = app.add_subcommand("finetune", "fine-tune the event encoder with the prediction loss");
  common(fine);
  fine->add_option("--data", fo.data, "dataset directory")->required();
  fine->add_option("--teacher", fo.teacher, "teacher checkpoint")->required();
  fine->add_option("--init", fo.init, "starting training checkpoint (default: copy of the image teacher)");
  fine->add_option("--split", fo.split, "train or heldout");
  fine->add_option("--steps", fo.steps, "optimizer steps (default: from config)");
  fine->add_option("--eval-every", fo.eval_every, "accuracy evaluation period in steps");
  fine->add_option("--out", fo.out, "run directory")->required();
  fine->callback([&] { action = [&](Invocation& inv) { cmd_finetune(inv, fo); }; });

  ZeroShotOptions zo;
  auto* zs = app.add_subcommand("eval-zeroshot", "zero-shot top-1 on a split");
  common(zs);
  zs->add_option("--data", zo.data, "dataset directory")->required();
  zs->add_option("--teacher", zo.teacher, "teacher checkpoint")->required();
  zs->add_option("--checkpoint", zo.checkpoint, "training checkpoint (default: step-0 encoder)");
  zs->add_option("--split", zo.split, "train or heldout");
  zs->add_option("--out", zo.out, "report directory")->required();
  zs->callback([&] { action = [&](Invocation& inv) { cmd_eval_zeroshot(inv, zo); }; });

  FewShotOptions fso;
  auto* few = app.add_subcommand("eval-fewshot", "n-shot fine-tuning on heldout classes");
  common(few);
  few->add_option("--data", fso.data, "dataset directory")->required();
  few->add_option("--teacher", fso.teacher, "teacher checkpoint")->required();
  few->add_option("--checkpoint", fso.checkpoint, "training checkpoint (default: step-0 encoder)");
  few->add_option("--shots", fso.shots, "comma-separated shots per class (default: config fewshot.shots)");
  few->add_option("--out", fso.out, "report directory")->required();
  few->callback([&] { action = [&](Invocation& inv) { cmd_eval_fewshot(inv, fso); }; });

  VadOptions vo;
  auto* vad = app.add_subcommand("eval-vad", "anomaly scores and AUC over event instances");
  common(vad);
  vad->add_option("--instances", vo.instances, "EVF1 instance file with labels")->required();
  vad->add_option("--teacher", vo.teacher, "teacher checkpoint")->required();
  vad->add_option("--checkpoint", vo.checkpoint, "training checkpoint (default: step-0 encoder)");
  vad->add_option("--out", vo.out, "report directory")->required();
  vad->callback([&] { action = [&](Invocation& inv) { cmd_eval_vad(inv, vo); }; });

  RetrievalOptions ro;
  auto* ret = app.add_subcommand("eval-retrieval", "Recall@k, mAP@k and MRR over embedding sets");
  common(ret);
  ret->add_option("--queries", ro.queries, "EMB1 query set")->required();
  ret->add_option("--keys", ro.keys, "EMB1 key set")->required();
  ret->add_option("--relevance", ro.relevance, "relevance pairs file")->required();
  ret->add_option("--ks", ro.ks, "comma-separated cutoffs");
  ret->add_option("--out", ro.out, "report directory")->required();
  ret->callback([&] { action = [&](Invocation& inv) { cmd_eval_retrieval(inv, ro); }; });

  ExtractOptions eo;
  auto* ext = app.add_subcommand("extract-events", "segment a frame dump into event instances");
  common(ext);
  ext->add_option("--video", eo.video, "VFR1 frame dump")->required();
  ext->add_option("--labels", eo.labels, "per-frame 0/1 labels");
  ext->add_option("--window", eo.window, "frames per instance (default: config)");
  ext->add_option("--stride", eo.stride, "frames between window starts (default: window)");
  ext->add_option("--threshold", eo.threshold, "strict per-pixel difference threshold");
  ext->add_option("--out", eo.out, "EVF1 output file")->required();
  ext->callback([&] { action = [&](Invocation& inv) { cmd_extract_events(inv, eo); }; });

  GenVideoOptions gv;
  auto* vid = app.add_subcommand("gen-video", "write a synthetic labeled frame dump");
  common(vid);
  vid->add_option("--out", gv.out, "VFR1 output file")->required();
  vid->add_option("--labels", gv.labels, "per-frame label output file");
  vid->add_option("--frames", gv.frames, "frame count");
  vid->add_option("--size", gv.size, "frame side length");
  vid->callback([&] { action = [&](Invocation& inv) { cmd_gen_video(inv, gv); }; });

  AblateOptions ao;
  auto* abl = app.add_subcommand("ablate", "pretrain with each loss term removed");
  common(abl);
  abl->add_option("--data", ao.data, "dataset directory")->required();
  abl->add_option("--teacher", ao.teacher, "teacher checkpoint")->required();
  abl->add_option("--out", ao.out, "report directory")->required();
  abl->add_option("--steps", ao.steps, "steps per variant (default: from config)");
  abl->add_option("--eval-every", ao.eval_every, "heldout evaluation period in steps");
  abl->callback([&] { action = [&](Invocation& inv) { cmd_ablate(inv, ao); }; });

  std::string manifest;
  auto* rep = app.add_subcommand("replay", "re-run a command from its manifest");
  rep->add_option("manifest", manifest, "manifest JSON")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (rep->parsed()) return replay(manifest, out, err);
    Invocation inv;
    inv.command = app.get_subcommands().front()->get_name();
    inv.args = args;
    inv.out = &out;
    if (!config_path.empty()) {
      require_input(config_path, "--config");
      inv.cfg = load_config(config_path);
    }
    if (seed) inv.cfg.seed = *seed;
    if (threads) inv.cfg.threads = *threads;
    inv.cfg.propagate();
    inv.cfg.validate();
    action(inv);
    return kOk;
  } catch (...) {
    return exit_code_for(std::current_exception(), err);
  }
}

}  // namespace evclip::cli
