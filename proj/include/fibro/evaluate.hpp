// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fibro/checkpoint.hpp"
#include "fibro/model.hpp"
#include "fibro/training.hpp"

namespace fibro {

/// Per-case class probabilities from one model (or a vote).
struct PredictionSet {
  std::string model_id;
  std::vector<std::string> case_ids;
  std::vector<std::vector<double>> probs;
  std::optional<std::vector<std::size_t>> labels;

  std::size_t size() const { return case_ids.size(); }
  std::size_t num_classes() const { return probs.empty() ? 0 : probs.front().size(); }

  bool operator==(const PredictionSet&) const = default;
};

/// Unweighted per-class mean. Throws CaseMismatch, ClassCountMismatch.
PredictionSet soft_vote(std::span<const PredictionSet> sets);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

/// Throws MissingLabels.
double accuracy(const PredictionSet& preds);

/// Tie-aware pair count: (#{pos > neg} + #{pos == neg} / 2) / (n_pos * n_neg).
/// Labels are 0/1. Throws SingleClassOnly.
double auroc(std::span<const double> scores, std::span<const std::size_t> labels);

/// Area under the empirical ROC polyline, thresholds at every distinct score.
double auroc_trapezoid(std::span<const double> scores, std::span<const std::size_t> labels);

/// One-vs-rest mean over classes that have both positives and negatives.
double auroc_macro_ovr(const PredictionSet& preds);

/// Eval-mode softmax probabilities for every bundle. Labels are attached when
/// `task` is given and every bundle has a stage.
PredictionSet predict(const Model& model, std::span<const CaseBundle> bundles, const std::string& model_id,
                      std::optional<Task> task, std::size_t threads = 1);

struct CaseResult {
  std::string case_id;
  std::vector<double> probs;
  std::optional<std::size_t> label;
  std::size_t predicted = 0;
  std::optional<bool> correct;
};

struct EvalReport {
  std::string task;
  std::size_t n = 0;
  std::size_t ensemble_size = 0;
  std::optional<double> accuracy;
  std::optional<double> auroc;
  /// "binary" or "macro_ovr".
  std::string auroc_kind;
  std::vector<CaseResult> per_case;

  std::string to_json() const;
};

/// Metrics over a (voted) prediction set.
EvalReport make_report(const PredictionSet& voted, Task task, std::size_t ensemble_size);

/// Predict with every checkpoint, vote, score. Throws IncompatibleCheckpoint
/// when a checkpoint was trained for another task or class count.
EvalReport evaluate_task(std::span<const Checkpoint> checkpoints, std::span<const CaseBundle> bundles, Task task,
                         std::size_t threads = 1);

/// CSV: case_id,p_0,...,p_{K-1}.
void write_probabilities_csv(const std::string& path, const PredictionSet& preds);
PredictionSet read_probabilities_csv(const std::string& path);

}  // namespace fibro
