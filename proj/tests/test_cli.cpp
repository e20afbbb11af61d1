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

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "evclip/cli.hpp"
#include "test_support.hpp"

namespace evclip {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

std::vector<std::string> cells(const std::string& line) { return detail::split_tabs(line); }

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

// Map of relative path -> contents for every regular file under `root`.
std::map<std::string, std::string> tree(const std::string& root) {
  std::map<std::string, std::string> t;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) t[fs::relative(e.path(), root).string()] = slurp(e.path().string());
  }
  return t;
}

json small_config_json(std::uint64_t seed) {
  json j = config_to_json(testing::small_config(seed, 6));
  j["optimizer"]["batch_size"] = 8;
  j["finetune"]["steps"] = 4;
  j["finetune"]["batch_size"] = 8;
  j["fewshot"]["steps"] = 3;
  j["fewshot"]["shots"] = {0, 1, 2};
  j["pretrain"]["max_steps"] = 4;
  j["pretrain"]["eval_every"] = 2;
  return j;
}

// One small dataset and teacher shared by every test in the suite.
class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("cli");
    config_ = *dir_ / "config.json";
    std::ofstream(config_) << small_config_json(0).dump(2);
    data_ = *dir_ / "data";
    teacher_ = *dir_ / "teacher.evck";
    ASSERT_EQ(run({"gen-data", "--config", config_, "--out", data_}).code, 0);
    const Result t = run({"pretrain-teacher", "--config", config_, "--data", data_, "--out", teacher_});
    ASSERT_EQ(t.code, 0) << t.err;
  }
  static void TearDownTestSuite() { delete dir_; }

  static std::string path(const std::string& leaf) { return *dir_ / leaf; }

  static testing::TempDir* dir_;
  static std::string config_, data_, teacher_;
};

testing::TempDir* CliTest::dir_ = nullptr;
std::string CliTest::config_, CliTest::data_, CliTest::teacher_;

TEST(CliConfig, PrintConfigRoundTripsDefaults) {
  const Result r = run({"print-config"});
  ASSERT_EQ(r.code, 0);
  const json j = json::parse(r.out);
  const RunConfig c = config_from_json(j);
  EXPECT_EQ(config_to_json(c), j);
  EXPECT_EQ(c.loss.tau_ct, 1.0);
  EXPECT_EQ(c.loss.tau_zs, 2.0);
  EXPECT_EQ(c.loss.alpha, 0.1);
  EXPECT_EQ(c.optimizer.batch_size, 32);
  EXPECT_EQ(c.ingest.window, 16);
  EXPECT_EQ(c.ingest.threshold, 25);
  EXPECT_EQ(c.data.clamp_cap, 10);
}

TEST(CliConfig, MissingSeedIsNamedUsageError) {
  testing::TempDir dir("noseed");
  json j = small_config_json(0);
  j.erase("seed");
  std::ofstream(dir / "c.json") << j.dump();
  const Result r = run({"gen-data", "--config", dir / "c.json", "--out", dir / "d"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("seed"), std::string::npos) << r.err;
}

TEST(CliConfig, UnknownKeyAndWrongTypeAreNamed) {
  testing::TempDir dir("badkey");
  json j = small_config_json(0);
  j["loss"]["temperature"] = 1.0;
  std::ofstream(dir / "a.json") << j.dump();
  Result r = run({"gen-data", "--config", dir / "a.json", "--out", dir / "d"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("temperature"), std::string::npos) << r.err;

  j = small_config_json(0);
  j["optimizer"]["batch_size"] = "many";
  std::ofstream(dir / "b.json") << j.dump();
  r = run({"gen-data", "--config", dir / "b.json", "--out", dir / "d"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("batch_size"), std::string::npos) << r.err;
}

TEST(CliExitCodes, UsageAndDataErrors) {
  testing::TempDir dir("codes");
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"no-such-command"}).code, 2);
  EXPECT_EQ(run({"gen-data"}).code, 2);  // --out required
  EXPECT_EQ(run({"pretrain", "--data", dir / "nope", "--teacher", dir / "t", "--out", dir / "o"}).code, 2);
  std::ofstream(dir / "garbage.evf") << "not an instance file";
  EXPECT_EQ(run({"extract-events", "--video", dir / "garbage.evf", "--out", dir / "x.evf"}).code, 3);
}

TEST(CliExitCodes, ProcessExitStatusMatches) {
  testing::TempDir dir("proc");
  const std::string cmd = std::string(EVCLIP_BINARY) + " gen-data > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(status));
  EXPECT_EQ(WEXITSTATUS(status), 2);
  const std::string ok = std::string(EVCLIP_BINARY) + " print-config > " + (dir / "c.json");
  EXPECT_EQ(WEXITSTATUS(std::system(ok.c_str())), 0);
}

TEST_F(CliTest, SameSeedGivesByteIdenticalDatasetTree) {
  const std::string other = path("data_again");
  ASSERT_EQ(run({"gen-data", "--config", config_, "--out", other}).code, 0);
  EXPECT_EQ(tree(data_), tree(other));
  const std::string different = path("data_seed1");
  ASSERT_EQ(run({"gen-data", "--config", config_, "--seed", "1", "--out", different}).code, 0);
  EXPECT_NE(tree(data_), tree(different));
}

TEST_F(CliTest, ManifestRecordsInvocation) {
  const json m = json::parse(slurp(data_ + ".manifest.json"));
  EXPECT_EQ(m.at("command"), "gen-data");
  EXPECT_EQ(m.at("seed"), 0);
  EXPECT_TRUE(m.contains("config"));
  EXPECT_TRUE(m.contains("code_version"));
  EXPECT_TRUE(m.contains("outputs"));
}

TEST_F(CliTest, MissingTeacherExplainsHowToCreateIt) {
  const Result r = run({"pretrain", "--config", config_, "--data", data_, "--teacher", path("absent.evck"), "--out", path("x")});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("pretrain-teacher"), std::string::npos) << r.err;
}

TEST_F(CliTest, PretrainLogColumnsAndDeterminism) {
  const std::string a = path("pre_a"), b = path("pre_b");
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", a}).code, 0);
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", b}).code, 0);
  EXPECT_EQ(tree(a), tree(b));
  const auto lines = read_lines(a + "/loss_log.tsv");
  ASSERT_EQ(lines.size(), 1u + 5u);  // header, step 0, steps 1..4
  EXPECT_EQ(lines[0], "step\tL\tL_ct\tL_zs\tL_kl\theldout_acc");
  EXPECT_EQ(cells(lines[1])[0], "0");
  EXPECT_EQ(cells(lines[1])[1], "nan");
  EXPECT_NE(cells(lines[2])[1], "nan");
  EXPECT_EQ(cells(lines[2])[5], "nan");  // no evaluation at step 1
  EXPECT_NE(cells(lines[3])[5], "nan");  // evaluation at step 2
  EXPECT_TRUE(fs::exists(a + "/plot_loss_log.py"));
  EXPECT_EQ(load_checkpoint(a + "/checkpoint.evck").step, 4);
}

TEST_F(CliTest, ResumeContinuesToTotalSteps) {
  const std::string full = path("res_full"), half = path("res_half"), rest = path("res_rest");
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", full}).code, 0);
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--steps", "2", "--out", half}).code, 0);
  const Result r = run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--resume",
                        half + "/checkpoint.evck", "--out", rest});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(load_checkpoint(rest + "/checkpoint.evck").event.params, load_checkpoint(full + "/checkpoint.evck").event.params);
}

TEST_F(CliTest, ZeroStepRunIsTheInitialCopy) {
  const std::string dir = path("zero");
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--steps", "0", "--out", dir}).code, 0);
  const TrainState s = load_checkpoint(dir + "/checkpoint.evck");
  EXPECT_EQ(s.step, 0);
  EXPECT_EQ(s.event.params, load_teacher(teacher_).image.params);
}

TEST_F(CliTest, StepZeroEncoderMatchesTeacherOnImages) {
  const std::string dir = path("zs");
  const Result r = run({"eval-zeroshot", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", dir});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = read_lines(dir + "/zeroshot.tsv");
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(cells(lines[2])[1], "paired_image");
  EXPECT_EQ(cells(lines[3])[0], "image_teacher");
  EXPECT_EQ(cells(lines[2])[4], cells(lines[3])[4]);
  EXPECT_EQ(read_lines(dir + "/predictions.tsv").size(), 1u + 2u * 6u);
}

TEST_F(CliTest, FewShotZeroEqualsZeroShotOnSameSamples) {
  const std::string dir = path("few");
  const Result r = run({"eval-fewshot", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", dir});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = read_lines(dir + "/fewshot.tsv");
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "shots\ttrain_samples\teval_samples\ttop1");
  EXPECT_EQ(cells(lines[1])[1], "0");
  EXPECT_EQ(cells(lines[2])[1], "2");  // one per heldout class
  EXPECT_EQ(cells(lines[3])[2], "8");  // 12 heldout samples minus 2 per class

  const std::string zs = path("few_zs");
  ASSERT_EQ(run({"eval-zeroshot", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", zs}).code, 0);
  EXPECT_EQ(cells(lines[1])[3], cells(read_lines(zs + "/zeroshot.tsv")[1])[4]);
}

TEST_F(CliTest, FinetuneWritesLogAndCheckpoint) {
  const std::string dir = path("ft");
  const Result r = run({"finetune", "--config", config_, "--data", data_, "--teacher", teacher_, "--out", dir});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = read_lines(dir + "/finetune_log.tsv");
  EXPECT_EQ(lines[0], "step\tL_pred\ttrain_acc");
  EXPECT_EQ(load_checkpoint(dir + "/checkpoint.evck").step, 4);
}

TEST_F(CliTest, AblationCoversEveryVariant) {
  const std::string dir = path("abl");
  const Result r = run({"ablate", "--config", config_, "--data", data_, "--teacher", teacher_, "--steps", "2", "--out", dir});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string summary = slurp(dir + "/ablation_summary.tsv");
  for (const char* v : {"all", "no_ct", "no_zs", "no_kl"}) EXPECT_NE(summary.find(v), std::string::npos) << v;
  EXPECT_TRUE(fs::exists(dir + "/ablation_curves.tsv"));
}

TEST_F(CliTest, ReplayReproducesOutputs) {
  const std::string dir = path("replay");
  ASSERT_EQ(run({"pretrain", "--config", config_, "--data", data_, "--teacher", teacher_, "--steps", "2", "--out", dir}).code, 0);
  const auto before = tree(dir);
  fs::remove_all(dir);
  const Result r = run({"replay", dir + ".manifest.json"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(tree(dir), before);
}

TEST(CliRetrieval, PerfectEmbeddingsScoreOne) {
  testing::TempDir dir("ret");
  Rng rng(3);
  const RealMatrix v = testing::random_unit_rows(rng, 6, 5);
  write_embedding_set(EmbeddingSet{{1, 2, 3, 4, 5, 6}, v}, dir / "q.emb");
  write_embedding_set(EmbeddingSet{{1, 2, 3, 4, 5, 6}, v}, dir / "k.emb");
  std::map<std::uint64_t, std::set<std::uint64_t>> rel;
  for (std::uint64_t i = 1; i <= 6; ++i) rel[i] = {i};
  write_relevance(rel, dir / "rel.txt");
  const Result r = run({"eval-retrieval", "--seed", "0", "--queries", dir / "q.emb", "--keys", dir / "k.emb", "--relevance",
                        dir / "rel.txt", "--ks", "1,5", "--out", dir / "out"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = read_lines(dir / "out/retrieval.tsv");
  ASSERT_GE(lines.size(), 2u);
  for (std::size_t i = 1; i < lines.size(); ++i) EXPECT_EQ(cells(lines[i]).back(), "1") << lines[i];
}

TEST(CliVideo, ExtractEventsWindowsLabelsAndThreshold) {
  testing::TempDir dir("vid");
  ASSERT_EQ(run({"gen-video", "--out", dir / "v.vfr", "--labels", dir / "v.txt", "--frames", "48", "--size", "16"}).code, 0);
  ASSERT_EQ(run({"extract-events", "--video", dir / "v.vfr", "--labels", dir / "v.txt", "--out", dir / "i.evf"}).code, 0);
  const auto inst = read_instances(dir / "i.evf");
  ASSERT_EQ(inst.size(), 3u);
  const auto labels = read_labels(dir / "v.txt");
  for (const auto& e : inst) {
    int ones = 0;
    for (int f = e.start; f < e.end; ++f) ones += labels[static_cast<std::size_t>(f)];
    EXPECT_EQ(*e.label, ones * 2 >= e.end - e.start ? 1 : 0);
  }
  const json m = json::parse(slurp(dir / "i.evf.manifest.json"));
  EXPECT_EQ(m.at("instance_count"), 3);

  ASSERT_EQ(run({"extract-events", "--video", dir / "v.vfr", "--threshold", "255", "--out", dir / "z.evf"}).code, 0);
  for (const auto& e : read_instances(dir / "z.evf")) EXPECT_EQ(e.frame.values.cwiseAbs().maxCoeff(), 0.0);

  ASSERT_EQ(run({"gen-video", "--out", dir / "s.vfr", "--frames", "47", "--size", "16"}).code, 0);
  ASSERT_EQ(run({"extract-events", "--video", dir / "s.vfr", "--out", dir / "s.evf"}).code, 0);
  EXPECT_EQ(read_instances(dir / "s.evf").size(), 2u);
}

TEST_F(CliTest, VadProducesAucAndRoc) {
  const std::string v = path("vad.vfr"), l = path("vad.txt"), i = path("vad.evf"), out = path("vad");
  ASSERT_EQ(run({"gen-video", "--config", config_, "--out", v, "--labels", l, "--frames", "320", "--size", "16"}).code, 0);
  ASSERT_EQ(run({"extract-events", "--config", config_, "--video", v, "--labels", l, "--out", i}).code, 0);
  const Result r = run({"eval-vad", "--config", config_, "--instances", i, "--teacher", teacher_, "--out", out});
  if (r.code == 3) GTEST_SKIP() << "generated clip has a single label class: " << r.err;
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(out + "/roc.tsv"));
  EXPECT_EQ(read_lines(out + "/scores.tsv").size(), 1u + 20u);
}

TEST(CliOutputRoot, RelativeOutputsResolveUnderRoot) {
  testing::TempDir dir("root");
  ::setenv("EVCLIP_OUTPUT_ROOT", dir.str().c_str(), 1);
  const Result r = run({"gen-video", "--out", "rel/v.vfr", "--frames", "20", "--size", "8"});
  ::unsetenv("EVCLIP_OUTPUT_ROOT");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "rel/v.vfr"));
}

}  // namespace
}  // namespace evclip
