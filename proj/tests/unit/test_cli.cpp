// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "cli.hpp"
#include "expect_error.hpp"
#include "fixtures.hpp"

using namespace fibro;

namespace {

int call(const std::vector<std::string>& args, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::main_entry(args, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST(RunConfig, KeysRoundTripThroughJson) {
  RunConfig c;
  set_key(c, "model.scale", "desk");
  set_key(c, "train.lr", "0.002");
  set_key(c, "synth.extents", "8,8,8");
  const auto back = run_config_from_json(run_config_to_json(c));
  for (const auto& k : run_config_keys()) EXPECT_EQ(get_key(back, k), get_key(c, k)) << k;
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.model, ModelConfig::desk());
  EXPECT_FIBRO_ERROR(set_key(c, "train.speed", "1"), UnknownFlag);
  EXPECT_FIBRO_ERROR(set_key(c, "train.lr", "fast"), BadValue);
  EXPECT_FIBRO_ERROR(run_config_from_json(R"({"nope": 1})"), UnknownFlag);
}

TEST(RunConfig, ScaleAppliesBeforeOtherKeys) {
  const auto c = run_config_from_json(R"({"model.heads": 2, "model.scale": "desk"})");
  EXPECT_EQ(c.model.heads, 2u);
  EXPECT_EQ(c.model.base_width, ModelConfig::desk().base_width);
}

TEST(Cli, NoArgumentsIsUsageError) {
  std::string err;
  EXPECT_EQ(call({}, &err), 2);
  EXPECT_NE(err.find("synth"), std::string::npos);
  EXPECT_EQ(call({"--help"}), 0);
}

TEST(Cli, BadValueNamesTheFlag) {
  EXPECT_FIBRO_ERROR(cli::parse_args({"train", "--lr", "abc"}), BadValue);
  std::string err;
  EXPECT_EQ(call({"train", "--lr", "abc"}, &err), 2);
  EXPECT_NE(err.find("lr"), std::string::npos);
  EXPECT_FIBRO_ERROR(cli::parse_args({"train", "--learning-rate", "1"}), UnknownFlag);
  EXPECT_FIBRO_ERROR(cli::parse_args({"train", "--model-scale", "huge"}), BadValue);
  EXPECT_EQ(call({"launch"}), 2);
}

TEST(Cli, ConfigFileThenFlags) {
  fibro::testing::TempDir dir("cfg");
  {
    std::ofstream f(dir.str("c.json"));
    f << R"({"train.lr": 0.01, "train.epochs": 5, "train.patience": 5, "model.scale": "desk"})";
  }
  const auto p = cli::parse_args({"train", "--config", dir.str("c.json"), "--lr", "0.02"});
  EXPECT_EQ(p.command, "train");
  EXPECT_DOUBLE_EQ(p.cfg.train.lr, 0.02);
  EXPECT_EQ(p.cfg.train.epochs, 5);
  EXPECT_EQ(p.cfg.model, ModelConfig::desk());
  const auto paper = cli::parse_args({"train", "--model-scale", "paper"});
  EXPECT_EQ(paper.cfg.model, ModelConfig::paper());
  {
    std::ofstream f(dir.str("bad.json"));
    f << R"({"train.colour": 1})";
  }
  EXPECT_EQ(call({"train", "--config", dir.str("bad.json")}), 2);
}

TEST(Cli, EndToEndSmoke) {
  fibro::testing::TempDir dir("smoke");
  const std::string raw = dir.str("raw"), pre = dir.str("pre"), run = dir.str("run");
  ASSERT_EQ(call({"synth", "--n", "8", "--seed", "1", "--out", raw}), 0);
  ASSERT_EQ(call({"preprocess", "--manifest", raw + "/manifest.csv", "--output-dir", pre, "--spacing", "1.5,1.5,3",
                  "--extents", "16,16,16", "--drop-slices", "0"}),
            0);
  ASSERT_EQ(call({"train", "--bundles", pre, "--task", "cirrhosis", "--folds", "4", "--seed", "2", "--model-scale",
                  "desk", "--epochs", "1", "--patience", "1", "--out", run}),
            0);
  std::vector<std::string> args{"evaluate", "--bundles", pre, "--task", "cirrhosis", "--out", dir.str("report.json"),
                                "--checkpoints"};
  for (int f = 0; f < 4; ++f) args.push_back(run + "/fold" + std::to_string(f) + ".ckpt");
  ASSERT_EQ(call(args), 0);
  std::ifstream in(dir.path() / "report.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["n"], 8);
  EXPECT_EQ(j["ensemble_size"], 4);

  args.pop_back();
  EXPECT_EQ(call(args), 1);
  EXPECT_EQ(call({"predict", "--checkpoint", run + "/fold0.ckpt", "--bundles", pre, "--out", dir.str("p.csv")}), 0);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "p.csv"));
  EXPECT_EQ(call({"predict", "--checkpoint", dir.str("missing.ckpt"), "--bundles", pre, "--out", dir.str("q.csv")}), 1);
}
