#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "cli.hpp"
#include "normshift/datagen.hpp"
#include "support.hpp"

using normshift::testing::TempDir;

namespace {

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "normshift");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  testing::internal::CaptureStdout();
  testing::internal::CaptureStderr();
  const int rc = normshift::cli::run(static_cast<int>(args.size()), argv.data());
  testing::internal::GetCapturedStdout();
  testing::internal::GetCapturedStderr();
  return rc;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::size_t line_count(const std::filesystem::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

void write(const std::filesystem::path& p, const std::string& text) { std::ofstream(p) << text; }

const char* kSmallRun = R"({"run_id":"t","model":{"conv_channels":[4,8],"fc_widths":[16]},"norm":{"kind":"%s"},
  "train":{"epochs":1,"eval_every":2},"data":{"n":64},"eval":{"n":20,"grid":["source","corruption:contrast:5"]}})";

std::string small_run(const std::string& norm) {
  char buf[512];
  std::snprintf(buf, sizeof buf, kSmallRun, norm.c_str());
  return buf;
}

}  // namespace

TEST(Cli, GenDataWritesReadableFile) {
  TempDir dir("cli-gen");
  EXPECT_EQ(cli({"gen-data", "--spec", "corruption:box_blur:2", "--n", "12", "--out", (dir / "d.nsds").string()}), 0);
  const auto ds = normshift::read_dataset(dir / "d.nsds");
  EXPECT_EQ(ds.size(), 12u);
  EXPECT_EQ(ds.manifest.at("domain"), "corruption:box_blur:2");
}

TEST(Cli, ValidationFailuresExitTwo) {
  TempDir dir("cli-val");
  EXPECT_EQ(cli({"gen-data", "--spec", "corruption:box_blur:9", "--out", (dir / "d.nsds").string()}), 2);
  EXPECT_EQ(cli({"gen-data", "--spec", "source", "--classes", "11", "--out", (dir / "d.nsds").string()}), 2);
  EXPECT_EQ(cli({"frobnicate"}), 2);
  EXPECT_EQ(cli({"gen-data", "--out", (dir / "d.nsds").string()}), 2);

  write(dir / "typo.json", R"({"model":{},"normm":{"kind":"bn"}})");
  EXPECT_EQ(cli({"train", "--config", (dir / "typo.json").string(), "--out-dir", (dir / "run").string()}), 2);
  EXPECT_FALSE(std::filesystem::exists(dir / "run" / "checkpoint.nsck"));
}

TEST(Cli, MissingFilesExitOne) {
  TempDir dir("cli-io");
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir / "nope.nsck").string(), "--out", (dir / "m.csv").string()}), 1);
  EXPECT_EQ(cli({"train", "--config", (dir / "nope.json").string(), "--out-dir", (dir / "run").string()}), 1);
  write(dir / "junk.nsck", "garbage");
  EXPECT_EQ(cli({"eval", "--checkpoint", (dir / "junk.nsck").string(), "--out", (dir / "m.csv").string()}), 1);
}

TEST(Cli, TrainEvalDumpAndAugment) {
  TempDir dir("cli-run");
  write(dir / "asr.json", small_run("asr"));
  write(dir / "bn.json", small_run("bn"));
  const auto run = dir / "run", bn_run = dir / "bn";
  ASSERT_EQ(cli({"train", "--config", (dir / "asr.json").string(), "--out-dir", run.string()}), 0);
  for (const char* f : {"resolved-config.json", "checkpoint.nsck", "metrics.csv", "trajectory.csv", "summary.json"})
    EXPECT_TRUE(std::filesystem::exists(run / f)) << f;
  // header, the single cadence row at the final step, two grid rows
  EXPECT_EQ(line_count(run / "metrics.csv"), 4u);
  EXPECT_EQ(slurp(run / "trajectory.csv").rfind("step,layer,lambda_mu", 0), 0u);

  // the run directory is never overwritten
  EXPECT_EQ(cli({"train", "--config", (dir / "asr.json").string(), "--out-dir", run.string()}), 2);

  const auto ck = (run / "checkpoint.nsck").string();
  ASSERT_EQ(cli({"eval", "--checkpoint", ck, "--grid", "corruption", "--n", "10", "--out", (dir / "m.csv").string()}),
            0);
  EXPECT_EQ(line_count(dir / "m.csv"), 32u);
  ASSERT_EQ(cli({"eval", "--checkpoint", ck, "--grid", "source,style:invert", "--n", "10", "--out",
                 (dir / "s.csv").string()}),
            0);
  EXPECT_EQ(line_count(dir / "s.csv"), 3u);

  ASSERT_EQ(cli({"dump-stats", "--checkpoint", ck, "--n", "15", "--out", (dir / "stats.csv").string()}), 0);
  EXPECT_EQ(line_count(dir / "stats.csv"), 16u);

  ASSERT_EQ(cli({"train", "--config", (dir / "bn.json").string(), "--out-dir", bn_run.string()}), 0);
  EXPECT_EQ(cli({"dump-stats", "--checkpoint", (bn_run / "checkpoint.nsck").string(), "--out",
                 (dir / "x.csv").string()}),
            2);

  ASSERT_EQ(cli({"gen-data", "--spec", "source", "--n", "10", "--out", (dir / "src.nsds").string()}), 0);
  ASSERT_EQ(cli({"augment", "--checkpoint", ck, "--data", (dir / "src.nsds").string(), "--inner-steps", "2", "--out",
                 (dir / "aug.nsds").string()}),
            0);
  EXPECT_EQ(normshift::read_dataset(dir / "aug.nsds").size(), 10u);
}

TEST(Cli, RepeatedRunsAreByteIdentical) {
  TempDir dir("cli-det");
  write(dir / "c.json", small_run("asr"));
  ASSERT_EQ(cli({"train", "--config", (dir / "c.json").string(), "--out-dir", (dir / "a").string()}), 0);
  ASSERT_EQ(cli({"train", "--config", (dir / "c.json").string(), "--out-dir", (dir / "b").string()}), 0);
  for (const char* f : {"metrics.csv", "checkpoint.nsck", "trajectory.csv"})
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
}

TEST(Cli, GradcheckPasses) { EXPECT_EQ(cli({"gradcheck", "--seeds", "1"}), 0); }
