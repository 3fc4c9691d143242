#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tmpdir.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(MDOD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const fs::path& p) {
  const std::string s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// Small run: 2 levels on 64x64 images, a handful of scenes.
fs::path write_config(const fs::path& dir) {
  const fs::path cfg = dir / "config.json";
  std::ofstream os(cfg);
  os << R"({"data": {"seed": 4, "train_scenes": 6, "val_scenes": 3},
            "network": {"feature_width": 8, "num_levels": 2},
            "train": {"epochs": 1},
            "paths": {"dataset": ")"
     << (dir / "data").string() << R"(", "output": ")" << (dir / "run").string() << R"("}})";
  return cfg;
}

}  // namespace

TEST(Cli, UsageErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("gen-data"), 2);
  EXPECT_EQ(run("gen-data --config /nonexistent.json"), 2);
  EXPECT_EQ(run("train --config /nonexistent.json --distribution laplace"), 2);
}

TEST(Cli, BadConfigIsUsageError) {
  TempDir dir("cli-badcfg");
  std::ofstream(dir.path() / "bad.json") << R"({"train": {"epoch": 1}})";
  EXPECT_EQ(run("gen-data --config " + (dir.path() / "bad.json").string()), 2);
}

TEST(Cli, GenDataIsDeterministic) {
  TempDir dir("cli-gen");
  const auto cfg = write_config(dir.path());
  ASSERT_EQ(run("gen-data --config " + cfg.string()), 0);
  EXPECT_EQ(count_lines(dir.path() / "data" / "train" / "manifest.txt"), 6u);
  EXPECT_EQ(count_lines(dir.path() / "data" / "val" / "manifest.txt"), 3u);
  ASSERT_EQ(run("gen-data --config " + cfg.string() + " --train 2 --val 1 --out " + (dir.path() / "again").string()), 0);
  EXPECT_EQ(count_lines(dir.path() / "again" / "train" / "manifest.txt"), 2u);
  EXPECT_EQ(slurp(dir.path() / "data" / "train" / "annotations" / "train_00001.txt"),
            slurp(dir.path() / "again" / "train" / "annotations" / "train_00001.txt"));
}

TEST(Cli, TrainEvalInferDiagnose) {
  TempDir dir("cli-run");
  const auto cfg = write_config(dir.path());
  const fs::path run_dir = dir.path() / "run";
  ASSERT_EQ(run("gen-data --config " + cfg.string()), 0);
  ASSERT_EQ(run("train --config " + cfg.string()), 0);
  EXPECT_EQ(count_lines(run_dir / "metrics.csv"), 2u);
  EXPECT_EQ(slurp(run_dir / "metrics.csv").rfind("epoch,loss_moc,loss_mm,foreground_ratio,underflow_cauchy,underflow_gaussian\n", 0), 0u);
  const fs::path ck = run_dir / "checkpoint-final";
  ASSERT_TRUE(fs::exists(ck));

  const fs::path ev = dir.path() / "eval";
  ASSERT_EQ(run("eval --checkpoint " + ck.string() + " --dataset " + (dir.path() / "data").string() + " --out " + ev.string()), 0);
  const std::string eval_csv = slurp(ev / "eval.csv");
  EXPECT_EQ(eval_csv.rfind("metric,value\nAP,", 0), 0u);
  EXPECT_NE(eval_csv.find("\nAP50,"), std::string::npos);
  EXPECT_EQ(slurp(ev / "detections.csv").rfind("image_id,class_id,score,l,t,r,b\n", 0), 0u);
  EXPECT_EQ(slurp(ev / "detections.json").front(), '[');

  const fs::path dg = dir.path() / "diag";
  ASSERT_EQ(run("diagnose --checkpoint " + ck.string() + " --dataset " + (dir.path() / "data").string() + " --out " + dg.string()), 0);
  EXPECT_EQ(count_lines(dg / "diagnostics.csv"), 2u);
  EXPECT_EQ(count_lines(dg / "underflow.csv"), 7u);

  const fs::path img = dir.path() / "data" / "val" / "images" / "val_00000.png";
  const fs::path out = dir.path() / "infer.json";
  ASSERT_EQ(run("infer --checkpoint " + ck.string() + " --image " + img.string() + " --json --out " + out.string()), 0);
  EXPECT_EQ(slurp(out).front(), '[');

  // Empty split: AP undefined.
  fs::create_directories(dir.path() / "empty");
  EXPECT_EQ(run("eval --checkpoint " + ck.string() + " --dataset " + (dir.path() / "empty").string()), 5);
  // Corrupt checkpoint.
  std::ofstream(dir.path() / "junk") << "not a checkpoint";
  EXPECT_EQ(run("eval --checkpoint " + (dir.path() / "junk").string() + " --dataset " + (dir.path() / "data").string()), 4);
}
