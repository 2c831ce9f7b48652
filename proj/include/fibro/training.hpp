// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fibro/checkpoint.hpp"
#include "fibro/model.hpp"
#include "fibro/preprocess.hpp"

namespace fibro {

enum class Task { cirrhosis, substantial, four_class };

std::string_view task_name(Task task);
/// Throws BadValue for an unknown name.
Task parse_task(std::string_view name);
std::size_t task_classes(Task task);

/// cirrhosis: S4 -> 1 else 0; substantial: S1 -> 0 else 1; four_class:
/// stage - 1. Throws BadStage.
std::size_t remap_labels(int stage, Task task);

/// Class index of every bundle. Throws BadStage when a stage is absent.
std::vector<std::size_t> bundle_labels(std::span<const CaseBundle> bundles, Task task);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Per-class seeded shuffle, then the first t_c of each class go to training.
/// The t_c are floor(ratio * n_c) topped up by largest remainder (ties to the
/// lower class) so they sum to round(ratio * n). Throws EmptyClass when a
/// class below the largest label has no members.
Split stratified_split(std::span<const std::size_t> labels, double ratio, std::uint64_t seed);

struct SplitPlan {
  std::size_t k = 4;
  std::uint64_t seed = 0;
  std::vector<std::size_t> fold;  // fold index per sample

  std::vector<std::size_t> members(std::size_t f) const;
  std::vector<std::size_t> complement(std::size_t f) const;
};

/// Per-class seeded shuffle, then round-robin over folds. The starting fold
/// of each class continues where the previous class stopped, so fold sizes
/// also differ by at most one.
SplitPlan stratified_kfold(std::span<const std::size_t> labels, std::size_t k, std::uint64_t seed);

/// -log softmax(logits)[label] with max subtraction. Throws BadLabel.
double cross_entropy(std::span<const double> logits, std::size_t label);

/// Strict-improvement tracker.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Returns true when `loss` beats every earlier epoch.
  bool update(int epoch, double loss);
  bool should_stop() const { return stale_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }

 private:
  int patience_;
  int stale_ = 0;
  int best_epoch_ = -1;
  double best_ = 0.0;
};

/// Seeded permutation of [0, n) cut into consecutive batches; the last one
/// may be short.
std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed);

/// clamp(1 - n / 1000, 0.2, 0.8).
double augment_strength_for(std::size_t n_train);

struct TrainConfig {
  double lr = 1e-4;
  double lr_min = 1e-6;
  double weight_decay = 1e-3;
  int epochs = 100;
  int patience = 30;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  /// Overrides the sample-size policy when set.
  std::optional<double> augment_strength;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct FoldResult {
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  Checkpoint best;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(std::size_t fold, const EpochRecord&)>;

/// Trains one model on `train` and early-stops on the mean cross-entropy
/// over `validation`. Throws EmptyFold, NonFiniteLoss.
FoldResult train_fold(std::span<const CaseBundle> bundles, std::span<const std::size_t> labels,
                      std::span<const std::size_t> train, std::span<const std::size_t> validation,
                      const ModelConfig& model_cfg, const TrainConfig& cfg, Task task, std::uint64_t seed,
                      std::size_t fold = 0, const EpochCallback& on_epoch = {});

/// Fold f trains on every other fold and validates on fold f.
FoldResult train_fold(std::span<const CaseBundle> bundles, std::size_t fold, const SplitPlan& plan,
                      const ModelConfig& model_cfg, const TrainConfig& cfg, Task task,
                      const EpochCallback& on_epoch = {});

std::uint64_t fold_seed(std::uint64_t master, std::size_t fold);

void write_history_csv(const std::string& path, std::span<const EpochRecord> history);

struct CvResult {
  SplitPlan plan;
  std::vector<FoldResult> folds;
  std::vector<std::string> checkpoint_paths;
};

/// k-fold training over all bundles. When `out_dir` is non-empty writes
/// fold<i>.ckpt, fold<i>_history.csv and manifest.json there. Folds run on
/// up to `threads` workers.
CvResult train_cv(std::span<const CaseBundle> bundles, std::size_t k, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, Task task, const std::string& out_dir, std::size_t threads,
                  const EpochCallback& on_epoch = {});

}  // namespace fibro
