#include <gtest/gtest.h>

#include "effscale/cli.hpp"
#include "support.hpp"

using namespace effscale;
using effscale::fixtures::TempDir;

namespace {

const std::string kData = EFFSCALE_DATA_DIR;

cli::CommandResult run(std::vector<std::string> args) {
  args.insert(args.begin(), "effscale");
  return cli::run(args);
}

TEST(Cli, InitGrowVerify) {
  TempDir dir("cli");
  auto r = run({"init", "--config", kData + "/toy_m2x8.json", "--seed", "1", "--out", dir / "src"});
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run({"grow", "--in", dir / "src", "--plan", kData + "/plan_fpi_width.json", "--out", dir / "wide"});
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run({"--report", dir / "v.json", "verify", "--src", dir / "src", "--dst", dir / "wide", "--probes", "64", "--tol",
           "1e-5"});
  EXPECT_EQ(r.exit_code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS"), std::string::npos);
  const auto rep = nlohmann::json::parse(effscale::detail::read_file(dir / "v.json"));
  EXPECT_TRUE(rep["pass"].get<bool>());
}

TEST(Cli, VerifyFailureExitsOne) {
  TempDir dir("clifail");
  run({"init", "--config", kData + "/toy_m2x8.json", "--seed", "1", "--out", dir / "a"});
  run({"init", "--config", kData + "/toy_m2x8.json", "--seed", "2", "--out", dir / "b"});
  const auto r = run({"verify", "--src", dir / "a", "--dst", dir / "b", "--probes", "4", "--tol", "1e-5"});
  EXPECT_EQ(r.exit_code, 1);
}

TEST(Cli, SavingsPrintsFactors) {
  const auto r = run({"savings", "--plan", kData + "/aquila_moe_plan.json"});
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(r.out, "time_factor 4.12, power_factor 3.35\n");
}

TEST(Cli, UpcycleInspectAndEval) {
  TempDir dir("cliup");
  run({"init", "--config", kData + "/toy_m2x8.json", "--seed", "1", "--out", dir / "src"});
  auto r = run({"upcycle", "--in", dir / "src", "--out", dir / "moe", "--experts", "8", "--top-k", "2", "--seed", "3"});
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run({"inspect", "--in", dir / "moe"});
  EXPECT_NE(r.out.find("8 experts, top-2"), std::string::npos) << r.out;
  r = run({"synth", "--seed", "1", "--vocab", "32", "--tokens", "2000", "--out", dir / "toks.bin"});
  ASSERT_EQ(r.exit_code, 0) << r.err;
  r = run({"eval", "--in", dir / "moe", "--data", dir / "toks.bin", "--seq-len", "16"});
  EXPECT_EQ(r.exit_code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("eval_loss ", 0), 0u);
}

TEST(Cli, TrainWritesLogAndCheckpoint) {
  TempDir dir("clitrain");
  run({"init", "--config", kData + "/toy_m2x8.json", "--seed", "1", "--out", dir / "src"});
  run({"synth", "--seed", "1", "--vocab", "32", "--tokens", "5000", "--out", dir / "toks.bin"});
  effscale::detail::write_file(dir / "t.json", R"({"lr": 0.01, "total_steps": 5, "warmup_steps": 1, "eval_every": 2})");
  const auto r = run({"train", "--in", dir / "src", "--data", dir / "toks.bin", "--config", dir / "t.json", "--out",
                      dir / "out", "--log", dir / "log.csv"});
  ASSERT_EQ(r.exit_code, 0) << r.err;
  EXPECT_NO_THROW(load_checkpoint(dir.path() / "out"));
  EXPECT_EQ(effscale::detail::read_file(dir / "log.csv").rfind("step,train_loss", 0), 0u);
}

TEST(Cli, KvGroupMismatchIsValidationError) {
  TempDir dir("clikv");
  run({"init", "--config", kData + "/toy_m2x8.json", "--seed", "1", "--out", dir / "src"});
  auto plan = nlohmann::json::parse(effscale::detail::read_file(kData + "/plan_fpi_width.json"));
  plan["target_config"]["kv_groups"] = 1;
  effscale::detail::write_file(dir / "plan.json", plan.dump());
  const auto r = run({"grow", "--in", dir / "src", "--plan", dir / "plan.json", "--out", dir / "out"});
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("kv_groups must match"), std::string::npos) << r.err;
}

TEST(Cli, MissingFileIsIoError) {
  const auto r = run({"inspect", "--in", "/nonexistent/ckpt"});
  EXPECT_EQ(r.exit_code, 2);
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run({"savings", "--bogus"}).exit_code, 1);
  EXPECT_EQ(run({}).exit_code, 1);
  EXPECT_EQ(run({"verify", "--src", "x"}).exit_code, 1);
}

}  // namespace
