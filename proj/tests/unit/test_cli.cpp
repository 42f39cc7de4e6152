#include <sys/wait.h>

#include "../support/helpers.hpp"

using namespace attrinet;
using testing_support::read_file;
using testing_support::TempDir;

namespace {

int run_cli(const std::string& args, const TempDir& dir) {
  std::string cmd = std::string(ATTRINET_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() + " 2> " +
                    (dir / "stderr.txt").string();
  int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Cli, UsageErrorsExitTwo) {
  TempDir dir("cli_usage");
  EXPECT_EQ(run_cli("make-synthetic --n 4", dir), 2);
  EXPECT_EQ(run_cli("no-such-command", dir), 2);
  EXPECT_EQ(run_cli("make-synthetic --n 8 --classes 3 --size 32 --out " + (dir / "d").string(), dir), 0);
  EXPECT_EQ(run_cli("contaminate --dataset " + (dir / "d").string() + " --fraction 1.5 --out " + (dir / "c").string(),
                    dir),
            2);
  EXPECT_NE(read_file(dir / "stderr.txt").find("fraction"), std::string::npos);
  EXPECT_EQ(run_cli("train --dataset " + (dir / "d").string() + " --out " + (dir / "t").string() +
                        " --set train.no_such_key=3",
                    dir),
            2);
  EXPECT_NE(read_file(dir / "stderr.txt").find("UnknownConfigKey"), std::string::npos);
  EXPECT_EQ(run_cli("train --dataset " + (dir / "d").string() + " --out " + (dir / "t").string() +
                        " --guidance sometimes",
                    dir),
            2);
}

TEST(Cli, DataErrorsExitThree) {
  TempDir dir("cli_data");
  EXPECT_EQ(run_cli("train --dataset " + (dir / "missing").string() + " --out " + (dir / "t").string(), dir), 3);
}

TEST(Cli, MakeSyntheticIsDeterministic) {
  TempDir dir("cli_synth");
  for (const char* d : {"a", "b"})
    ASSERT_EQ(run_cli("make-synthetic --n 6 --classes 3 --size 32 --seed 4 --out " + (dir / d).string(), dir), 0);
  EXPECT_EQ(read_file(dir / "a/manifest.csv"), read_file(dir / "b/manifest.csv"));
  EXPECT_EQ(read_file(dir / "a/images/s00003.png"), read_file(dir / "b/images/s00003.png"));
}

TEST(Cli, TrainEvalExplainRoundTrip) {
  TempDir dir("cli_pipeline");
  auto d = (dir / "d").string(), v = (dir / "v").string(), c = (dir / "c").string(), t = (dir / "t").string();
  ASSERT_EQ(run_cli("make-synthetic --n 24 --classes 3 --size 32 --seed 1 --out " + d, dir), 0);
  ASSERT_EQ(run_cli("make-synthetic --n 24 --classes 3 --size 32 --seed 2 --out " + v, dir), 0);
  ASSERT_EQ(run_cli("contaminate --dataset " + v + " --class 0 --fraction 1 --text R1 --x 1 --y 1 --out " + c, dir), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "c/injection_log.jsonl"));

  std::string small = " --image-size 32 --set arch.generator_channels=4 --set arch.critic_channels=4"
                       " --set arch.res_blocks=1 --set arch.critic_layers=2 --set arch.pool_factor=4"
                       " --set train.batch_size=2 --set train.critic_boost_initial=0 --set train.checkpoint_every=2";
  ASSERT_EQ(run_cli("train --dataset " + d + " --validation " + v + " --steps 4 --out " + t + small, dir), 0)
      << read_file(dir / "stderr.txt");
  EXPECT_TRUE(std::filesystem::exists(dir / "t/best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "t/loss_log.csv"));
  auto cfg = nlohmann::json::parse(read_file(dir / "t/effective_config.json"));
  EXPECT_EQ(cfg.at("train").at("generator_steps"), 4);

  auto e = (dir / "e").string();
  ASSERT_EQ(run_cli("eval --checkpoint " + t + "/best.ckpt --dataset " + c + " --image-size 32 --metrics auc,"
                    "disease_sensitivity,confounder_sensitivity --set eval.bootstrap_resamples=50 --out " + e,
                    dir),
            0)
      << read_file(dir / "stderr.txt");
  auto auc_csv = read_file(dir / "e/auc.csv");
  EXPECT_EQ(auc_csv.rfind("class,value,ci_low,ci_high,n\n", 0), 0u);
  EXPECT_NE(auc_csv.find("\nmean,"), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "e/confounder_sensitivity.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir / "e/report.json"));

  auto x = (dir / "x").string();
  ASSERT_EQ(run_cli("explain --checkpoint " + t + "/best.ckpt --dataset " + d +
                        " --image-size 32 --image s00000 --class 1 --global --out " + x,
                    dir),
            0)
      << read_file(dir / "stderr.txt");
  EXPECT_TRUE(std::filesystem::exists(dir / "x/explain/s00000_left_basal_wedge.png"));
  EXPECT_TRUE(std::filesystem::exists(dir / "x/explain/global_enlarged_heart.png"));

  // resuming a finished run is a no-op that still finalizes
  ASSERT_EQ(run_cli("train --dataset " + d + " --validation " + v + " --steps 4 --out " + t + small +
                        " --resume " + t + "/checkpoints/step_000004.ckpt",
                    dir),
            0)
      << read_file(dir / "stderr.txt");
}
