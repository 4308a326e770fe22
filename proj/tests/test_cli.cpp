#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <sys/wait.h>

#include "dmg/cli.hpp"

using namespace dmg;
using namespace dmg::cli;
namespace fs = std::filesystem;

namespace {

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("dmg_lab_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string write(const std::string& name, const std::string& text) {
    const auto p = (dir_ / name).string();
    std::ofstream(p, std::ios::binary) << text;
    return p;
  }
  static std::string slurp(const fs::path& p) { return read_file(p.string()); }

  fs::path dir_;
  std::ostringstream log_, err_;
};

const char* kChainCfg =
    "env = chain\ngamma = 0.5\nbehavior = fixed\nfixed_action = 0\nn = 200\ndata_seed = 1\n"
    "oracle_generalization = true\nhidden = 8,8\nbatch = 16\niterations = 40\nlog_every = 10\n";

const char* kPointCfg =
    "env = pointmass\nbehavior = mediocre\nbehavior_p = 0.5\nn = 300\nhidden = 8,8\nbatch = 16\n"
    "iterations = 30\nlog_every = 10\neval_every = 15\neval_episodes = 2\nfinetune_steps = 20\n"
    "nu_start = 0.1\n";

}  // namespace

TEST_F(CliTest, ConfigRenderParsesBackIdentically) {
  const RunConfig c = RunConfig::parse(kPointCfg);
  EXPECT_EQ(RunConfig::parse(c.render()), c);
  EXPECT_EQ(c.sizes("hidden"), (std::vector<std::size_t>{8, 8}));
  EXPECT_EQ(c.real("gamma"), 0.9);
}

TEST_F(CliTest, ConfigErrorsNameTheKey) {
  try {
    RunConfig::parse("env = chain\nlamda = 0.3\n", "x.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "lamda");
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
  }
  EXPECT_THROW(RunConfig::parse("env = chain\nenv = gridworld\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("batch = many\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("just a line\n"), ConfigError);
}

TEST_F(CliTest, MissingRequiredKeyExitsTwo) {
  const auto cfg = write("c.cfg", "env = chain\n");
  EXPECT_EQ(cmd_gen_data({cfg, (dir_ / "d.jsonl").string(), {}}, log_, err_), kExitConfig);
  EXPECT_NE(err_.str().find("n"), std::string::npos);
  EXPECT_NE(err_.str().find("missing required config key n"), std::string::npos);
  EXPECT_FALSE(fs::exists(dir_ / "d.jsonl"));
}

TEST_F(CliTest, OutOfRangeValueExitsTwo) {
  const auto cfg = write("c.cfg", std::string(kChainCfg) + "lambda = 1.5\n");
  const auto data = (dir_ / "d.jsonl").string();
  ASSERT_EQ(cmd_gen_data({cfg, data, {}}, log_, err_), kExitOk);
  EXPECT_EQ(cmd_train({cfg, data, (dir_ / "run").string(), {}, {}}, log_, err_), kExitConfig);
  EXPECT_NE(err_.str().find("lambda"), std::string::npos);
}

TEST_F(CliTest, GenDataIsDeterministicWithProvenance) {
  const auto cfg = write("c.cfg", kPointCfg);
  const auto a = (dir_ / "a.jsonl").string(), b = (dir_ / "b.jsonl").string(), c = (dir_ / "c.jsonl").string();
  ASSERT_EQ(cmd_gen_data({cfg, a, {}}, log_, err_), kExitOk);
  ASSERT_EQ(cmd_gen_data({cfg, b, {}}, log_, err_), kExitOk);
  ASSERT_EQ(cmd_gen_data({cfg, c, 99}, log_, err_), kExitOk);
  EXPECT_EQ(slurp(a), slurp(b));
  EXPECT_NE(slurp(a), slurp(c));
  EXPECT_EQ(read_dataset_jsonl(a).size(), 300u);
  const auto side = nlohmann::json::parse(slurp(a + ".provenance.json"));
  EXPECT_EQ(side["transitions"], 300);
  EXPECT_EQ(side["representation"], "continuous");
}

TEST_F(CliTest, TrainWritesArtifactsAndRepeatsBytewise) {
  const auto cfg = write("c.cfg", kChainCfg);
  const auto data = (dir_ / "d.jsonl").string();
  ASSERT_EQ(cmd_gen_data({cfg, data, {}}, log_, err_), kExitOk);
  ASSERT_EQ(cmd_train({cfg, data, (dir_ / "r1").string(), {}, {}}, log_, err_), kExitOk) << err_.str();
  ASSERT_EQ(cmd_train({cfg, data, (dir_ / "r2").string(), {}, {}}, log_, err_), kExitOk);
  for (const char* f : {"metrics.csv", "summary.json", "reports/tabular.json", "checkpoints/final.json", "config.copy"})
    EXPECT_EQ(slurp(dir_ / "r1" / f), slurp(dir_ / "r2" / f)) << f;
  EXPECT_EQ(slurp(dir_ / "r1" / "config.copy"), kChainCfg);
  const auto summary = nlohmann::json::parse(slurp(dir_ / "r1" / "summary.json"));
  EXPECT_TRUE(summary.contains("policy_matches_exact"));
  EXPECT_EQ(summary["divergence_threshold"], 2.0);
  std::istringstream csv(slurp(dir_ / "r1" / "metrics.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);
}

TEST_F(CliTest, ZeroIterationsGivesHeaderOnlyMetrics) {
  const auto cfg0 = write("c0.cfg", "env = pointmass\nn = 50\niterations = 0\nhidden = 4\n");
  const auto data = (dir_ / "d.jsonl").string();
  ASSERT_EQ(cmd_gen_data({cfg0, data, {}}, log_, err_), kExitOk);
  ASSERT_EQ(cmd_train({cfg0, data, (dir_ / "run").string(), {}, {}}, log_, err_), kExitOk) << err_.str();
  EXPECT_EQ(slurp(dir_ / "run" / "metrics.csv"), std::string(kMetricsHeader) + "\n");
}

TEST_F(CliTest, SeedsFanOutIntoSubdirectories) {
  const auto cfg = write("c.cfg", kPointCfg);
  const auto data = (dir_ / "d.jsonl").string();
  ASSERT_EQ(cmd_gen_data({cfg, data, {}}, log_, err_), kExitOk);
  TrainArgs t{cfg, data, (dir_ / "many").string(), {}, {3, 5}};
  ASSERT_EQ(cmd_train(t, log_, err_), kExitOk) << err_.str();
  ASSERT_EQ(cmd_train({cfg, data, (dir_ / "one").string(), 5, {}}, log_, err_), kExitOk);
  EXPECT_EQ(slurp(dir_ / "many" / "seed_5" / "metrics.csv"), slurp(dir_ / "one" / "metrics.csv"));
  EXPECT_NE(slurp(dir_ / "many" / "seed_3" / "metrics.csv"), slurp(dir_ / "one" / "metrics.csv"));
  t.seed = 1;
  EXPECT_EQ(cmd_train(t, log_, err_), kExitConfig);
}

TEST_F(CliTest, EvalAndFinetuneFromCheckpoint) {
  const auto cfg = write("c.cfg", kPointCfg);
  const auto data = (dir_ / "d.jsonl").string();
  ASSERT_EQ(cmd_gen_data({cfg, data, {}}, log_, err_), kExitOk);
  ASSERT_EQ(cmd_train({cfg, data, (dir_ / "run").string(), {}, {}}, log_, err_), kExitOk);
  const auto ckpt = (dir_ / "run" / "checkpoints" / "final.json").string();
  fs::create_directories(dir_ / "e1");
  fs::create_directories(dir_ / "e2");
  ASSERT_EQ(cmd_eval({cfg, ckpt, 3, 4, (dir_ / "e1").string()}, log_, err_), kExitOk);
  ASSERT_EQ(cmd_eval({cfg, ckpt, 3, 4, (dir_ / "e2").string()}, log_, err_), kExitOk);
  EXPECT_EQ(slurp(dir_ / "e1" / "summary.json"), slurp(dir_ / "e2" / "summary.json"));
  EXPECT_EQ(cmd_eval({cfg, ckpt, 0, 4, ""}, log_, err_), kExitConfig);

  ASSERT_EQ(cmd_finetune({cfg, ckpt, (dir_ / "ft").string(), data, {}}, log_, err_), kExitOk) << err_.str();
  const auto s = nlohmann::json::parse(slurp(dir_ / "ft" / "summary.json"));
  EXPECT_EQ(s["buffer_size"], 320);
  EXPECT_EQ(s["final_lambda"], 0.25);
  EXPECT_EQ(s["final_nu"], 0.1);

  const auto chain = write("chain.cfg", kChainCfg);
  EXPECT_EQ(cmd_eval({chain, ckpt, 3, 4, ""}, log_, err_), kExitRuntime);
  EXPECT_EQ(cmd_eval({cfg, (dir_ / "nope.json").string(), 3, 4, ""}, log_, err_), kExitRuntime);
}

TEST_F(CliTest, VerifyPassesAndCorruptionFails) {
  VerifyArgs v;
  v.suite = "thm4";
  v.trials = 5;
  v.out = dir_.string();
  EXPECT_EQ(cmd_verify(v, log_, err_), kExitOk);
  const auto rep = nlohmann::json::parse(slurp(dir_ / "reports" / "verify_thm4.json"));
  EXPECT_TRUE(rep["passed"].get<bool>());
  EXPECT_EQ(rep["reports"].size(), 3u);

  v.suite = "thm2";
  v.corrupt_lambda = 1.5;
  EXPECT_EQ(cmd_verify(v, log_, err_), kExitRuntime);
  EXPECT_FALSE(nlohmann::json::parse(slurp(dir_ / "reports" / "verify_thm2.json"))["passed"].get<bool>());

  v.corrupt_lambda.reset();
  v.suite = "thm9";
  EXPECT_EQ(cmd_verify(v, log_, err_), kExitConfig);
}

TEST_F(CliTest, BinaryRejectsBadFlagsWithExitTwo) {
  const std::string bin = DMG_LAB_BIN;
  auto run = [&](const std::string& args) {
    const int rc = std::system((bin + " " + args + " > " + (dir_ / "out.txt").string() + " 2>&1").c_str());
    return WEXITSTATUS(rc);
  };
  EXPECT_EQ(run("--help"), 0);
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("train --config"), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  EXPECT_EQ(run("verify --suite lemma1 --trials 3"), 0);
  const auto cfg = write("bad.cfg", "env = chain\nbogus = 1\n");
  EXPECT_EQ(run("gen-data --config " + cfg + " --out " + (dir_ / "x.jsonl").string()), 2);
  EXPECT_NE(slurp(dir_ / "out.txt").find("bogus"), std::string::npos);
}
