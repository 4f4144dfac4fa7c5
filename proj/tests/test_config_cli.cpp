#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ftd/config.hpp"

using namespace ftd;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const fs::path kWork = fs::temp_directory_path() / "ftd_cli_tests";

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + FTD_CLI_PATH + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Tiny model on 32x32 scenes so the full command chain runs in seconds.
json tiny_config() {
  return {{"seed", 3},
          {"data", {{"train", "data/train.json"}, {"val", "data/val.json"}, {"test", "data/test.json"}}},
          {"unet", {{"base_channels", 8}, {"groups", 2}}},
          {"encoder", {{"layers", 2}, {"d_model", 16}, {"heads", 2}, {"max_len", 12}, {"window", 2}}},
          {"fusion", {{"d_vis", 16}, {"d_attn", 16}, {"heads", 2}, {"classifier_hidden", 8}}},
          {"features", {{"timesteps", {50, 150}}, {"blocks", {4, 6}}}},
          {"pretrain", {{"steps", 5}, {"lr", 1e-3}}},
          {"optimizer", {{"lr", 1e-3}}},
          {"epochs", 2}};
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
    ASSERT_EQ(run_cli("gen-data --seed 1 --splits 6,2,2 --size 32 --out " + (kWork / "data").string()), 0);
    std::ofstream(kWork / "tiny.json") << tiny_config().dump(2);
    ASSERT_EQ(run_cli("pretrain --config " + cfg() + " --out " + (kWork / "pre").string()), 0);
  }
  static std::string cfg() { return (kWork / "tiny.json").string(); }
  static std::string unet() { return (kWork / "pre" / "unet.ckpt").string(); }
};

}  // namespace

TEST(RunConfig, DefaultsMirrorSetup) {
  const RunConfig c = RunConfig::from_json(json::object());
  EXPECT_EQ(c.optimizer.lr, 1e-4);
  EXPECT_EQ(c.epochs, 50u);
  EXPECT_EQ(c.model.features.timesteps, (std::vector<int>{50, 150, 250}));
  EXPECT_EQ(c.model.features.blocks, (std::vector<int>{4, 6, 8, 12}));
  EXPECT_EQ(c.model.schedule.T, 1000);
  EXPECT_EQ(c.pretrain.steps, 2000u);
  c.validate();
}

TEST(RunConfig, JsonRoundTripAndHash) {
  const RunConfig a = RunConfig::from_json(tiny_config());
  const RunConfig b = RunConfig::from_json(a.to_json());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(config_hash(a), config_hash(b));
  RunConfig c = a;
  c.epochs = 3;
  EXPECT_NE(config_hash(a), config_hash(c));
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(RunConfig, ErrorsNameTheField) {
  auto expect_field = [](const json& j, const std::string& field) {
    try {
      RunConfig::from_json(j).validate();
      FAIL() << "accepted " << j.dump();
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
    }
  };
  expect_field({{"unet", {{"foo", 1}}}}, "unet.foo");
  expect_field({{"epochs", "many"}}, "epochs");
  expect_field({{"features", {{"blocks", {4, 18}}}}}, "features.blocks");
  expect_field({{"features", {{"timesteps", {0}}}}}, "features.timesteps");
  expect_field({{"encoder", {{"heads", 3}}}}, "encoder.d_model");
  expect_field({{"unet", {{"groups", 3}}}}, "unet.groups");
  expect_field({{"optimizer", {{"lr", -1.0}}}}, "optimizer.lr");
  expect_field({{"schedule", {{"beta_end", 1.5}}}}, "schedule.beta_end");
  expect_field({{"fusion", {{"d_attn", 10}, {"heads", 4}}}}, "fusion.d_attn");
  expect_field({{"mystery", 1}}, "mystery");
}

TEST(RunConfig, SeedPrecedence) {
  ::unsetenv("FTD_SEED");
  EXPECT_EQ(resolve_seed(std::nullopt, 4), 4u);
  ::setenv("FTD_SEED", "9", 1);
  EXPECT_EQ(resolve_seed(std::nullopt, 4), 9u);
  EXPECT_EQ(resolve_seed(7, 4), 7u);
  ::setenv("FTD_SEED", "x9", 1);
  EXPECT_THROW(resolve_seed(std::nullopt, 4), ConfigError);
  ::unsetenv("FTD_SEED");
}

TEST_F(CliTest, GenDataIsDeterministic) {
  const auto again = kWork / "data2";
  ASSERT_EQ(run_cli("gen-data --seed 1 --splits 6,2,2 --size 32 --out " + again.string()), 0);
  for (const char* m : {"train.json", "val.json", "test.json"})
    EXPECT_EQ(fnv1a64(slurp(kWork / "data" / m)), fnv1a64(slurp(again / m))) << m;
  EXPECT_EQ(slurp(kWork / "data/train/images/000003.pgm"), slurp(again / "train/images/000003.pgm"));
  const auto run = read_json(again / "run.json");
  EXPECT_EQ(run.at("exit_code"), 0);
  EXPECT_EQ(run.at("status"), "ok");
}

TEST_F(CliTest, PretrainWritesArtifactsAndRunRecord) {
  const auto run = read_json(kWork / "pre" / "run.json");
  EXPECT_EQ(run.at("command"), "pretrain");
  EXPECT_EQ(run.at("seed"), 3u);
  EXPECT_EQ(run.at("config_hash").get<std::string>().size(), 16u);
  EXPECT_GE(run.at("wall_time_s").get<double>(), 0.0);
  for (const char* f : {"config.json", "pretrain_loss.csv", "unet.ckpt"}) EXPECT_TRUE(fs::exists(kWork / "pre" / f)) << f;
  const auto echoed = RunConfig::from_json(read_json(kWork / "pre" / "config.json"));
  EXPECT_EQ(config_hash(echoed), run.at("config_hash").get<std::string>());
}

TEST_F(CliTest, ZeroEpochTrainKeepsInitialization) {
  const auto out = kWork / "train0";
  ASSERT_EQ(run_cli("train --config " + cfg() + " --unet-ckpt " + unet() + " --epochs 0 --out " + out.string()), 0);
  EXPECT_EQ(slurp(out / "model.ckpt"), slurp(out / "init.ckpt"));
}

TEST_F(CliTest, TrainEvalAblateChainIsReproducible) {
  auto chain = [&](const fs::path& out) {
    EXPECT_EQ(run_cli("train --config " + cfg() + " --unet-ckpt " + unet() + " --out " + (out / "train").string()), 0);
    const std::string ck = (out / "train" / "model.ckpt").string();
    EXPECT_EQ(run_cli("eval --config " + cfg() + " --ckpt " + ck + " --split test --out " + (out / "eval").string()), 0);
    EXPECT_EQ(run_cli("ablate --config " + cfg() + " --ckpt " + ck + " --split test --out " + (out / "abl").string()), 0);
  };
  chain(kWork / "r1");
  chain(kWork / "r2");
  for (const char* f : {"train/model.ckpt", "train/epochs.csv", "eval/metrics.csv", "eval/summary.json",
                        "eval/masks/000001.pgm", "abl/ablation.json"}) {
    ASSERT_TRUE(fs::exists(kWork / "r1" / f)) << f;
    EXPECT_EQ(slurp(kWork / "r1" / f), slurp(kWork / "r2" / f)) << f;
  }
  const auto summary = read_json(kWork / "r1/eval/summary.json");
  for (const char* k : {"mean_dice", "mean_iou", "n"}) EXPECT_TRUE(summary.contains(k)) << k;
  EXPECT_EQ(summary.at("n"), 2u);
  const auto abl = read_json(kWork / "r1/abl/ablation.json");
  EXPECT_NEAR(abl.at("difference").get<double>(),
              abl.at("matched_mean_dice").get<double>() - abl.at("permuted_mean_dice").get<double>(), 1e-15);
}

TEST_F(CliTest, SeedFlagAndEnvironmentOverrideFile) {
  const std::string base = "train --config " + cfg() + " --unet-ckpt " + unet() + " --epochs 0 --out ";
  ASSERT_EQ(run_cli(base + (kWork / "s_env").string(), "FTD_SEED=11"), 0);
  ASSERT_EQ(run_cli(base + (kWork / "s_flag").string() + " --seed 12", "FTD_SEED=11"), 0);
  EXPECT_EQ(read_json(kWork / "s_env/run.json").at("seed"), 11u);
  EXPECT_EQ(read_json(kWork / "s_flag/run.json").at("seed"), 12u);
  EXPECT_EQ(read_json(kWork / "s_flag/config.json").at("seed"), 12u);
}

TEST_F(CliTest, ValidationErrorsExitOne) {
  std::ofstream(kWork / "bad.json") << R"({"unet": {"groups": 3}})";
  const auto out = kWork / "bad";
  EXPECT_EQ(run_cli("train --config " + (kWork / "bad.json").string() + " --unet-ckpt " + unet() + " --out " +
                    out.string()),
            1);
  const auto run = read_json(out / "run.json");
  EXPECT_EQ(run.at("exit_code"), 1);
  EXPECT_NE(run.at("error").get<std::string>().find("unet.groups"), std::string::npos);

  EXPECT_EQ(run_cli("eval --config " + cfg() + " --ckpt /nonexistent.ckpt --out " + (kWork / "bad2").string()), 1);
  EXPECT_NE(read_json(kWork / "bad2/run.json").at("error").get<std::string>().find("/nonexistent.ckpt"),
            std::string::npos);
  EXPECT_EQ(run_cli("gen-data --n 0 --out " + (kWork / "bad3").string()), 1);
  EXPECT_EQ(run_cli("bench-encoder --reps 3 --out " + (kWork / "bad4").string()), 1);
  EXPECT_EQ(run_cli("no-such-command"), 1);
  EXPECT_EQ(run_cli("train --config " + cfg()), 1);  // missing required flags
}

TEST_F(CliTest, RuntimeFailureExitsTwoWithRunRecord) {
  // A checkpoint from a different U-Net shape passes validation but fails to load.
  json other = tiny_config();
  other["unet"]["base_channels"] = 4;
  std::ofstream(kWork / "other.json") << other.dump();
  const auto out = kWork / "mismatch";
  EXPECT_EQ(run_cli("train --config " + (kWork / "other.json").string() + " --unet-ckpt " + unet() + " --out " +
                    out.string()),
            2);
  const auto run = read_json(out / "run.json");
  EXPECT_EQ(run.at("exit_code"), 2);
  EXPECT_EQ(run.at("status"), "error");
}

TEST_F(CliTest, BenchCommandsWriteCsv) {
  ASSERT_EQ(run_cli("bench-encoder --lengths 8,16 --reps 5 --out " + (kWork / "benc").string()), 0);
  std::istringstream rows(slurp(kWork / "benc/bench_encoder.csv"));
  std::string line;
  std::getline(rows, line);
  EXPECT_EQ(line, "mode,seq_len,median_s");
  std::size_t n = 0;
  while (std::getline(rows, line)) ++n;
  EXPECT_EQ(n, 4u);

  ASSERT_EQ(run_cli("train --config " + cfg() + " --unet-ckpt " + unet() + " --epochs 0 --out " +
                    (kWork / "bp_train").string()),
            0);
  ASSERT_EQ(run_cli("bench-pipeline --config " + cfg() + " --ckpt " + (kWork / "bp_train/model.ckpt").string() +
                    " --split train --out " + (kWork / "bp").string()),
            0);
  const std::string csv = slurp(kWork / "bp/bench_pipeline.csv");
  EXPECT_EQ(csv.substr(0, 16), "images,median_s\n");
  EXPECT_EQ(csv.substr(16, 3), "20,");
}

TEST_F(CliTest, GradcheckPasses) {
  ASSERT_EQ(run_cli("gradcheck --out " + (kWork / "gck").string()), 0);
  const auto j = read_json(kWork / "gck/gradcheck.json");
  EXPECT_TRUE(j.at("pass").get<bool>());
  EXPECT_LT(j.at("fusion_head").at("max_rel_error").get<double>(), 1e-5);
  EXPECT_LT(j.at("unet_ddpm").at("max_rel_error").get<double>(), 1e-5);
}
