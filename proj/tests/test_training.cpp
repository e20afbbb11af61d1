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

#include <gtest/gtest.h>

#include <fstream>

#include "evclip/training.hpp"
#include "test_support.hpp"

namespace evclip {
namespace {

using testing::small_config;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Small dataset with randomly initialized (untrained) frozen teachers.
class TrainingFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg = small_config(3, 8);
    data = gen_dataset(cfg.data);
    teachers.image = make_vision_encoder(cfg.arch, 100);
    teachers.text = make_text_encoder(cfg.arch, 101);
    teachers.image.frozen = teachers.text.frozen = true;
    cfg.optimizer.batch_size = 8;
  }

  RunConfig cfg;
  SplitDataset data;
  TeacherPair teachers;
};

TEST(Proposition1, WorkedCase) {
  ParamSet theta, target, grad;
  theta.add("w", RealMatrix::Constant(1, 1, 3.0));
  target.add("w", RealMatrix::Constant(1, 1, 3.0));
  grad.add("w", RealMatrix::Constant(1, 1, 5.0));
  proposition1_update(theta, target, grad, 0.9, 0.1);
  EXPECT_NEAR(theta.at("w")(0, 0), 2.95, 1e-15);
}

TEST(Proposition1, MomentumOneIsFixedPoint) {
  ParamSet theta, target, grad;
  theta.add("w", RealMatrix::Constant(2, 2, 1.5));
  target.add("w", RealMatrix::Constant(2, 2, -4.0));
  grad.add("w", RealMatrix::Constant(2, 2, 7.0));
  const ParamSet before = theta;
  proposition1_update(theta, target, grad, 1.0, 0.3);
  EXPECT_EQ(theta, before);
}

TEST(Proposition1, MomentumZeroWithoutStepProjectsOntoTarget) {
  ParamSet theta, target, grad;
  theta.add("w", RealMatrix::Constant(1, 3, 9.0));
  target.add("w", RealMatrix::Constant(1, 3, -1.0));
  grad.add("w", RealMatrix::Constant(1, 3, 2.0));
  proposition1_update(theta, target, grad, 0.0, 0.0);
  EXPECT_EQ(theta, target);
}

TEST(Proposition1, RejectsOutOfRangeMomentum) {
  ParamSet theta;
  theta.add("w", RealMatrix::Zero(1, 1));
  EXPECT_THROW(proposition1_update(theta, theta, theta, 1.5, 0.1), ConfigError);
}

TEST(UpdateRule, ParseAndName) {
  EXPECT_EQ(parse_update_rule("plain_sgd"), UpdateRule::plain_sgd);
  EXPECT_EQ(parse_update_rule(update_rule_name(UpdateRule::proposition1)), UpdateRule::proposition1);
  EXPECT_THROW(parse_update_rule("adam"), ConfigError);
}

TEST(CheckFiniteLoss, NamesTheOffendingTerm) {
  LossBreakdown l;
  l.kl = std::numeric_limits<double>::infinity();
  try {
    check_finite_loss(l);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("L_kl"), std::string::npos);
  }
  l.kl = 0.0;
  l.ct = std::nan("");
  EXPECT_THROW(check_finite_loss(l), NumericalError);
}

TEST_F(TrainingFixture, ZeroLearningRateLeavesParametersUnchanged) {
  cfg.optimizer.learning_rate = 0.0;
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  TrainState s = make_train_state(teachers.image, 1);
  const ParamSet before = s.event.params;
  for (int i = 0; i < 3; ++i) p.step(s);
  EXPECT_EQ(s.event.params, before);
  EXPECT_EQ(s.step, 3);
}

TEST_F(TrainingFixture, TeachersAreNeverModified) {
  const ParamSet img = teachers.image.params, txt = teachers.text.params;
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  TrainState s = make_train_state(teachers.image, 1);
  for (int i = 0; i < 3; ++i) p.step(s);
  EXPECT_EQ(teachers.image.params, img);
  EXPECT_EQ(teachers.text.params, txt);
  EXPECT_FALSE(s.event.params == img);
}

TEST_F(TrainingFixture, FrozenOrWrongRoleEncoderHasNoGradientPath) {
  const EventFrame f{RealMatrix::Zero(16, 16)};
  const std::vector<const EventFrame*> frames = {&f};
  Rng rng(1);
  const RealMatrix img = testing::random_unit_rows(rng, 1, 16);
  EXPECT_THROW(grad_wrt_event_encoder(teachers.image, frames, img, img, {0}, cfg.loss), DataError);
  EncoderParams ev = init_event_encoder(teachers.image);
  ev.frozen = true;
  EXPECT_THROW(grad_wrt_event_encoder(ev, frames, img, img, {0}, cfg.loss), DataError);
  ParamSet g = ev.params.zeros_like();
  EXPECT_THROW(apply_update(ev, teachers.image, g, cfg.optimizer), DataError);
}

TEST_F(TrainingFixture, NonFiniteGradientRejected) {
  EncoderParams ev = init_event_encoder(teachers.image);
  ParamSet g = ev.params.zeros_like();
  g.scalar(0) = std::nan("");
  EXPECT_THROW(apply_update(ev, teachers.image, g, cfg.optimizer), NumericalError);
}

TEST_F(TrainingFixture, FixedBatchLossDecreases) {
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  std::vector<std::size_t> idx(8);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i * 7;
  const PretrainBatch b = p.make_batch(idx);
  auto trajectory = [&](double lr, int steps) {
    OptimizerConfig opt = cfg.optimizer;
    opt.learning_rate = lr;
    TrainState s = make_train_state(teachers.image, 1);
    std::vector<double> losses;
    for (int i = 0; i < steps; ++i) losses.push_back(pretrain_step(s, teachers.image, b, p.train_prompts(), cfg.loss, opt).total);
    return losses;
  };
  const auto fast = trajectory(cfg.optimizer.learning_rate, 100);
  EXPECT_LT(fast.back(), fast.front());
  const auto slow = trajectory(1e-3, 30);
  for (std::size_t i = 1; i < slow.size(); ++i) EXPECT_LT(slow[i], slow[i - 1]) << "step " << i;
}

TEST_F(TrainingFixture, EventEncoderGradientMatchesFiniteDifferences) {
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  const PretrainBatch b = p.make_batch({0, 5, 11, 17});
  TrainState s = make_train_state(teachers.image, 1);
  GradResult g = grad_wrt_event_encoder(s.event, b.frames, b.image_emb, p.train_prompts(), b.labels, cfg.loss);
  // sample 200 coordinates spread over every array
  const std::size_t n = s.event.params.num_scalars();
  double num = 0.0, den = 0.0;
  const double h = 1e-5;
  for (std::size_t k = 0; k < n; k += n / 200) {
    double& v = s.event.params.scalar(k);
    const double saved = v;
    auto loss = [&] {
      return grad_wrt_event_encoder(s.event, b.frames, b.image_emb, p.train_prompts(), b.labels, cfg.loss).loss.total;
    };
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    const double fd = (up - down) / (2 * h);
    const double an = g.grad.scalar(k);
    num += (fd - an) * (fd - an);
    den += fd * fd;
  }
  EXPECT_LT(std::sqrt(num / den), 1e-6);
}

TEST_F(TrainingFixture, NextBatchCoversEpochOnce) {
  TrainState s = make_train_state(teachers.image, 5);
  std::vector<int> seen(20, 0);
  for (int b = 0; b < 3; ++b) {
    for (auto i : next_batch(s, 20, 7)) ++seen[i];
  }
  for (int c : seen) EXPECT_EQ(c, 1);
  EXPECT_EQ(next_batch(s, 20, 7).size(), 7u);  // new epoch
}

TEST_F(TrainingFixture, CheckpointSaveLoadSaveIsByteIdentical) {
  testing::TempDir dir("ts");
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  TrainState s = make_train_state(teachers.image, 2);
  p.run(s, 3, 2);
  save_checkpoint(s, dir / "a.evck");
  const TrainState back = load_checkpoint(dir / "a.evck");
  EXPECT_EQ(back.step, 3);
  EXPECT_EQ(back.history.size(), s.history.size());
  save_checkpoint(back, dir / "b.evck");
  EXPECT_EQ(slurp(dir / "a.evck"), slurp(dir / "b.evck"));
}

TEST_F(TrainingFixture, ResumeMatchesUninterruptedRun) {
  testing::TempDir dir("resume");
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  TrainState full = make_train_state(teachers.image, 4);
  p.run(full, 10, 5);

  TrainState first = make_train_state(teachers.image, 4);
  p.run(first, 4, 5);
  save_checkpoint(first, dir / "mid.evck");
  TrainState resumed = load_checkpoint(dir / "mid.evck");
  p.run(resumed, 6, 5);

  EXPECT_EQ(resumed.step, full.step);
  EXPECT_EQ(resumed.event.params, full.event.params);
  EXPECT_TRUE(resumed.rng == full.rng);
  EXPECT_EQ(resumed.epoch_order, full.epoch_order);
  EXPECT_EQ(resumed.cursor, full.cursor);
  // the first segment stopped off the eval schedule; the log must not show it
  auto same = [](double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); };
  ASSERT_EQ(resumed.history.size(), full.history.size());
  for (std::size_t i = 0; i < full.history.size(); ++i) {
    EXPECT_EQ(resumed.history[i].step, full.history[i].step);
    EXPECT_TRUE(same(resumed.history[i].total, full.history[i].total)) << i;
    EXPECT_TRUE(same(resumed.history[i].heldout_acc, full.history[i].heldout_acc)) << i;
  }
}

TEST_F(TrainingFixture, CorruptCheckpointRejected) {
  testing::TempDir dir("tsbad");
  save_checkpoint(make_train_state(teachers.image, 1), dir / "a.evck");
  std::string bytes = slurp(dir / "a.evck");
  bytes[1] = 'Z';
  std::ofstream(dir / "a.evck", std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(dir / "a.evck"), FormatError);
  save_teacher(teachers, dir / "t.evck");
  EXPECT_THROW(load_checkpoint(dir / "t.evck"), FormatError);
}

TEST_F(TrainingFixture, RunLogsStepZeroAndSchedule) {
  const Pretrainer p(teachers, data.train, data.heldout, cfg.loss, cfg.optimizer);
  TrainState s = make_train_state(teachers.image, 1);
  p.run(s, 5, 2);
  ASSERT_EQ(s.history.size(), 6u);
  EXPECT_EQ(s.history[0].step, 0);
  EXPECT_TRUE(std::isnan(s.history[0].total));
  EXPECT_FALSE(std::isnan(s.history[0].heldout_acc));
  EXPECT_TRUE(std::isnan(s.history[1].heldout_acc));
  EXPECT_FALSE(std::isnan(s.history[2].heldout_acc));
  EXPECT_TRUE(std::isnan(s.history[5].heldout_acc));  // off schedule
  const auto report = p.report(s);
  EXPECT_FALSE(std::isnan(report.back().heldout_acc));
  EXPECT_EQ(report.back().heldout_acc, p.heldout_accuracy(s.event));
  EXPECT_TRUE(std::isnan(s.history.back().heldout_acc));  // state untouched
}

TEST_F(TrainingFixture, FewShotSubsetCountsAndDeterminism) {
  const Dataset& d = data.heldout;
  for (int n : {0, 1, 2, 5}) {
    const Dataset sub = few_shot_subset(d, n, 9);
    EXPECT_EQ(sub.samples.size(), d.classes.size() * static_cast<std::size_t>(n));
    for (int c : d.classes) {
      EXPECT_EQ(std::count_if(sub.samples.begin(), sub.samples.end(), [&](const PairedSample& s) { return s.class_id == c; }), n);
    }
    const Dataset again = few_shot_subset(d, n, 9);
    for (std::size_t i = 0; i < sub.samples.size(); ++i) EXPECT_EQ(sub.samples[i].id, again.samples[i].id);
  }
  EXPECT_THROW(few_shot_subset(d, 9, 0), DataError);
  EXPECT_THROW(few_shot_subset(d, -1, 0), ConfigError);
}

TEST_F(TrainingFixture, FewShotErrorNamesClass) {
  try {
    few_shot_subset(data.heldout, 100, 0);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string name = data.heldout.class_names[static_cast<std::size_t>(data.heldout.classes[0])];
    EXPECT_NE(std::string(e.what()).find(name), std::string::npos);
  }
}

TEST_F(TrainingFixture, FinetuneLossMonotoneAtSmallStep) {
  cfg.optimizer.learning_rate = 1e-3;
  cfg.optimizer.batch_size = static_cast<int>(data.heldout.samples.size());  // full batch
  const Finetuner ft(teachers, data.heldout, cfg.loss, cfg.optimizer);
  TrainState s = make_train_state(teachers.image, 2);
  double prev = ft.step(s);
  for (int i = 1; i < 50; ++i) {
    const double cur = ft.step(s);
    EXPECT_LE(cur, prev + 1e-12) << "step " << i;
    prev = cur;
  }
}

TEST_F(TrainingFixture, FinetuneWithPretrainMixRuns) {
  cfg.optimizer.learning_rate = 0.01;
  const Finetuner ft(teachers, data.heldout, cfg.loss, cfg.optimizer, FinetuneConfig{0.5});
  TrainState s = make_train_state(teachers.image, 2);
  EXPECT_TRUE(std::isfinite(ft.step(s)));
  EXPECT_EQ(s.step, 1);
}

TEST(OptimizerConfig, Validate) {
  OptimizerConfig o;
  EXPECT_NO_THROW(o.validate());
  o.batch_size = 0;
  EXPECT_THROW(o.validate(), ConfigError);
  o = OptimizerConfig{};
  o.learning_rate = -1.0;
  EXPECT_THROW(o.validate(), ConfigError);
}

}  // namespace
}  // namespace evclip
