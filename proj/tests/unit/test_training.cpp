// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <json.hpp>

#include "expect_error.hpp"
#include "fibro/synthetic.hpp"
#include "fibro/training.hpp"
#include "fixtures.hpp"

using namespace fibro;

TEST(Labels, TaskRemapping) {
  EXPECT_EQ(remap_labels(4, Task::cirrhosis), 1u);
  EXPECT_EQ(remap_labels(3, Task::cirrhosis), 0u);
  EXPECT_EQ(remap_labels(1, Task::substantial), 0u);
  EXPECT_EQ(remap_labels(2, Task::substantial), 1u);
  EXPECT_EQ(remap_labels(3, Task::four_class), 2u);
  EXPECT_FIBRO_ERROR(remap_labels(0, Task::cirrhosis), BadStage);
  EXPECT_FIBRO_ERROR(remap_labels(5, Task::four_class), BadStage);
  EXPECT_EQ(parse_task("four_class"), Task::four_class);
  EXPECT_EQ(task_name(Task::substantial), "substantial");
  EXPECT_EQ(task_classes(Task::four_class), 4u);
  EXPECT_FIBRO_ERROR(parse_task("liver"), BadValue);
  CaseBundle b;
  EXPECT_FIBRO_ERROR(bundle_labels(std::vector<CaseBundle>{b}, Task::cirrhosis), BadStage);
}

TEST(Split, StratifiedRatioAndLargestRemainder) {
  // 30 of class 0, 10 of class 1: 0.75 -> 22.5 + 7.5, total round(30) = 30.
  std::vector<std::size_t> labels(40, 0);
  std::fill(labels.begin() + 30, labels.end(), 1);
  const auto s = stratified_split(labels, 0.75, 3);
  EXPECT_EQ(s.train.size(), 30u);
  EXPECT_EQ(s.validation.size(), 10u);
  const auto ones = std::count_if(s.train.begin(), s.train.end(), [&](std::size_t i) { return labels[i] == 1; });
  EXPECT_EQ(ones, 7);  // tie on remainders goes to the lower class
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.validation.begin(), s.validation.end());
  EXPECT_EQ(all.size(), 40u);
  EXPECT_EQ(stratified_split(labels, 0.75, 3).train, s.train);
  EXPECT_FIBRO_ERROR(stratified_split(std::vector<std::size_t>{0, 0, 2}, 0.5, 1), EmptyClass);
}

TEST(Split, KFoldIsBalancedDisjointAndSeeded) {
  Rng rng(4);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 8 + rng() % 100, k = 2 + rng() % 4;
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = rng() % 3;
    const auto plan = stratified_kfold(labels, k, t);
    std::size_t covered = 0, smallest = n, largest = 0;
    for (std::size_t f = 0; f < k; ++f) {
      const auto mem = plan.members(f), rest = plan.complement(f);
      EXPECT_EQ(mem.size() + rest.size(), n);
      covered += mem.size();
      smallest = std::min(smallest, mem.size());
      largest = std::max(largest, mem.size());
      for (std::size_t c = 0; c < 3; ++c) {
        const double total = static_cast<double>(std::count(labels.begin(), labels.end(), c));
        const double in = static_cast<double>(std::count_if(mem.begin(), mem.end(), [&](std::size_t i) { return labels[i] == c; }));
        EXPECT_LE(std::fabs(in - total / static_cast<double>(k)), 1.0);
      }
    }
    EXPECT_EQ(covered, n);
    EXPECT_LE(largest - smallest, 1u);
    EXPECT_EQ(stratified_kfold(labels, k, t).fold, plan.fold);
  }
}

TEST(Loss, CrossEntropyValues) {
  const std::vector<double> z{0.0, 0.0};
  EXPECT_NEAR(cross_entropy(z, 0), std::log(2.0), 1e-15);
  const std::vector<double> big{1000.0, 0.0};
  EXPECT_NEAR(cross_entropy(big, 0), 0.0, 1e-12);
  EXPECT_NEAR(cross_entropy(big, 1), 1000.0, 1e-9);
  EXPECT_FIBRO_ERROR(cross_entropy(z, 2), BadLabel);
}

TEST(EarlyStopping, StrictImprovementAndPatience) {
  EarlyStopping es(2);
  EXPECT_TRUE(es.update(0, 1.0));
  EXPECT_FALSE(es.update(1, 1.0));  // tie keeps the earlier epoch
  EXPECT_FALSE(es.should_stop());
  EXPECT_FALSE(es.update(2, 1.5));
  EXPECT_TRUE(es.should_stop());
  EXPECT_EQ(es.best_epoch(), 0);
  EXPECT_TRUE(es.update(3, 0.5));
  EXPECT_FALSE(es.should_stop());
}

TEST(Batches, PermutationCoversEverything) {
  const auto b = make_batches(19, 8, 5);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_EQ(b[2].size(), 3u);
  std::vector<std::size_t> all;
  for (const auto& x : b) all.insert(all.end(), x.begin(), x.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 19; ++i) EXPECT_EQ(all[i], i);
  EXPECT_EQ(make_batches(19, 8, 5), b);
  EXPECT_NE(make_batches(19, 8, 6), b);
}

TEST(Augment, StrengthPolicy) {
  EXPECT_DOUBLE_EQ(augment_strength_for(48), 0.8);
  EXPECT_DOUBLE_EQ(augment_strength_for(500), 0.5);
  EXPECT_DOUBLE_EQ(augment_strength_for(5000), 0.2);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.patience = 200;
  EXPECT_FIBRO_ERROR(c.validate(), InvalidConfig);
  c = TrainConfig{};
  c.lr_min = 1.0;
  EXPECT_FIBRO_ERROR(c.validate(), InvalidConfig);
}

namespace {

std::vector<CaseBundle> tiny_dataset(std::size_t n, std::uint64_t seed) {
  SynthConfig s;
  s.n_cases = n;
  s.seed = seed;
  return generate_bundles(s, PreprocessConfig::desk());
}

}  // namespace

TEST(Train, FoldIsDeterministicAndTracksBest) {
  const auto bundles = tiny_dataset(16, 2);
  const auto plan = stratified_kfold(bundle_labels(bundles, Task::cirrhosis), 4, 9);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.patience = 3;
  cfg.lr = 3e-3;
  cfg.seed = 9;
  std::vector<EpochRecord> seen;
  const auto a = train_fold(bundles, 1, plan, ModelConfig::desk(), cfg, Task::cirrhosis,
                            [&](std::size_t, const EpochRecord& r) { seen.push_back(r); });
  const auto b = train_fold(bundles, 1, plan, ModelConfig::desk(), cfg, Task::cirrhosis);
  EXPECT_EQ(a.best, b.best);
  EXPECT_EQ(a.history.size(), 3u);
  EXPECT_EQ(seen.size(), 3u);
  const auto best = std::min_element(a.history.begin(), a.history.end(),
                                     [](const auto& x, const auto& y) { return x.val_loss < y.val_loss; });
  EXPECT_EQ(a.best_epoch, best->epoch);
  EXPECT_DOUBLE_EQ(a.best_val_loss, best->val_loss);
  EXPECT_DOUBLE_EQ(a.history[0].lr, 3e-3);
  for (const auto& r : a.history) EXPECT_TRUE(std::isfinite(r.train_loss) && std::isfinite(r.val_loss));
}

TEST(Train, TrainingLossDecreasesOnSeparableData) {
  const auto bundles = tiny_dataset(16, 4);
  const auto labels = bundle_labels(bundles, Task::cirrhosis);
  std::vector<std::size_t> all(bundles.size());
  std::iota(all.begin(), all.end(), 0);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.patience = 8;
  cfg.lr = 3e-3;
  cfg.augment_strength = 0.0;
  const auto r = train_fold(bundles, labels, all, all, ModelConfig::desk(), cfg, Task::cirrhosis, 1);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
}

TEST(Train, EmptyFoldRejected) {
  const auto bundles = tiny_dataset(8, 1);
  const auto labels = bundle_labels(bundles, Task::cirrhosis);
  const std::vector<std::size_t> none, some{0, 1};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.patience = 1;
  EXPECT_FIBRO_ERROR(train_fold(bundles, labels, none, some, ModelConfig::desk(), cfg, Task::cirrhosis, 1), EmptyFold);
  EXPECT_FIBRO_ERROR(train_fold(bundles, labels, some, none, ModelConfig::desk(), cfg, Task::cirrhosis, 1), EmptyFold);
  auto wrong = ModelConfig::desk();
  wrong.num_classes = 4;
  EXPECT_FIBRO_ERROR(train_fold(bundles, labels, some, some, wrong, cfg, Task::cirrhosis, 1), InvalidConfig);
}

TEST(Train, CrossValidationWritesArtifacts) {
  fibro::testing::TempDir dir("cv");
  const auto bundles = tiny_dataset(16, 6);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.patience = 2;
  cfg.seed = 3;
  const auto cv = train_cv(bundles, 4, ModelConfig::desk(), cfg, Task::cirrhosis, dir.str(), 2);
  ASSERT_EQ(cv.folds.size(), 4u);
  for (int f = 0; f < 4; ++f) {
    EXPECT_TRUE(std::filesystem::exists(dir.path() / ("fold" + std::to_string(f) + ".ckpt")));
    std::ifstream hist(dir.path() / ("fold" + std::to_string(f) + "_history.csv"));
    std::string header;
    std::getline(hist, header);
    EXPECT_EQ(header, "epoch,train_loss,val_loss,lr");
  }
  std::ifstream in(dir.path() / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["k"], 4);
  EXPECT_EQ(j["folds"].size(), 4u);
  std::set<std::string> validation;
  for (const auto& f : j["folds"])
    for (const auto& id : f["validation_ids"]) validation.insert(id.get<std::string>());
  EXPECT_EQ(validation.size(), 16u);
}
