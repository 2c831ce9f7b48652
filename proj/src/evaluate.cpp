// SPDX-License-Identifier: Apache-2.0
#include "fibro/evaluate.hpp"

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fibro/error.hpp"
#include "fibro/ops.hpp"
#include "fibro/parallel.hpp"

namespace fibro {

PredictionSet soft_vote(std::span<const PredictionSet> sets) {
  if (sets.empty()) throw Error(ErrorCode::CaseMismatch, "soft_vote needs at least one prediction set");
  const auto& first = sets.front();
  for (const auto& s : sets) {
    if (s.case_ids != first.case_ids) throw Error(ErrorCode::CaseMismatch, s.model_id + ": case ids differ");
    for (const auto& row : s.probs)
      if (row.size() != first.num_classes())
        throw Error(ErrorCode::ClassCountMismatch, s.model_id + ": " + std::to_string(row.size()) + " vs " +
                                                       std::to_string(first.num_classes()) + " classes");
  }
  PredictionSet out;
  out.model_id = "vote";
  out.case_ids = first.case_ids;
  out.labels = first.labels;
  out.probs.assign(first.size(), std::vector<double>(first.num_classes(), 0.0));
  // Running mean over sorted members: independent of model order, and exact
  // when every member agrees.
  std::vector<double> cell(sets.size());
  for (std::size_t i = 0; i < first.size(); ++i)
    for (std::size_t c = 0; c < first.num_classes(); ++c) {
      for (std::size_t k = 0; k < sets.size(); ++k) cell[k] = sets[k].probs[i][c];
      std::sort(cell.begin(), cell.end());
      double mean = 0.0;
      for (std::size_t k = 0; k < cell.size(); ++k) mean += (cell[k] - mean) / static_cast<double>(k + 1);
      out.probs[i][c] = mean;
    }
  return out;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

double accuracy(const PredictionSet& preds) {
  if (!preds.labels || preds.labels->size() != preds.size())
    throw Error(ErrorCode::MissingLabels, preds.model_id + ": no labels");
  if (preds.size() == 0) throw Error(ErrorCode::MissingLabels, preds.model_id + ": no cases");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hits += argmax(preds.probs[i]) == (*preds.labels)[i];
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

namespace {

void check_binary(std::span<const double> scores, std::span<const std::size_t> labels, std::size_t& n_pos,
                  std::size_t& n_neg) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::CaseMismatch, "scores and labels differ in length");
  n_pos = n_neg = 0;
  for (auto l : labels) {
    if (l > 1) throw Error(ErrorCode::BadLabel, "binary labels must be 0 or 1");
    (l == 1 ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0) throw Error(ErrorCode::SingleClassOnly, "auroc needs both classes");
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const std::size_t> labels) {
  std::size_t n_pos = 0, n_neg = 0;
  check_binary(scores, labels, n_pos, n_neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the pair score, accumulated in integers over runs of equal scores.
  std::uint64_t doubled = 0, neg_below = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    std::uint64_t pos_run = 0, neg_run = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_run : neg_run)++;
      ++j;
    }
    doubled += pos_run * (2 * neg_below + neg_run);
    neg_below += neg_run;
    i = j;
  }
  return static_cast<double>(doubled) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double auroc_trapezoid(std::span<const double> scores, std::span<const std::size_t> labels) {
  std::size_t n_pos = 0, n_neg = 0;
  check_binary(scores, labels, n_pos, n_neg);
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double area = 0.0, tpr = 0.0, fpr = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? tp : fp)++;
      ++j;
    }
    const double t = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double f = static_cast<double>(fp) / static_cast<double>(n_neg);
    area += (f - fpr) * (t + tpr) / 2.0;
    tpr = t;
    fpr = f;
    i = j;
  }
  return area;
}

double auroc_macro_ovr(const PredictionSet& preds) {
  if (!preds.labels) throw Error(ErrorCode::MissingLabels, preds.model_id + ": no labels");
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < preds.num_classes(); ++c) {
    std::vector<double> scores;
    std::vector<std::size_t> onehot;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      scores.push_back(preds.probs[i][c]);
      onehot.push_back((*preds.labels)[i] == c ? 1 : 0);
      pos += onehot.back();
    }
    if (pos == 0 || pos == preds.size()) continue;
    total += auroc(scores, onehot);
    ++used;
  }
  if (used == 0) throw Error(ErrorCode::SingleClassOnly, "no class has both positives and negatives");
  return total / static_cast<double>(used);
}

PredictionSet predict(const Model& model, std::span<const CaseBundle> bundles, const std::string& model_id,
                      std::optional<Task> task, std::size_t threads) {
  PredictionSet out;
  out.model_id = model_id;
  out.probs.resize(bundles.size());
  for (const auto& b : bundles) out.case_ids.push_back(b.case_id);
  parallel_for(bundles.size(), threads, [&](std::size_t i) { out.probs[i] = softmax(model.logits(bundles[i])); });
  if (task && std::all_of(bundles.begin(), bundles.end(), [](const CaseBundle& b) { return b.stage.has_value(); }))
    out.labels = bundle_labels(bundles, *task);
  return out;
}

EvalReport make_report(const PredictionSet& voted, Task task, std::size_t ensemble_size) {
  EvalReport r;
  r.task = task_name(task);
  r.n = voted.size();
  r.ensemble_size = ensemble_size;
  for (std::size_t i = 0; i < voted.size(); ++i) {
    CaseResult c{voted.case_ids[i], voted.probs[i], std::nullopt, argmax(voted.probs[i]), std::nullopt};
    if (voted.labels) {
      c.label = (*voted.labels)[i];
      c.correct = c.predicted == *c.label;
    }
    r.per_case.push_back(std::move(c));
  }
  if (!voted.labels || voted.size() == 0) return r;
  r.accuracy = accuracy(voted);
  try {
    if (task == Task::four_class) {
      r.auroc = auroc_macro_ovr(voted);
      r.auroc_kind = "macro_ovr";
    } else {
      std::vector<double> scores;
      for (const auto& row : voted.probs) scores.push_back(row[1]);
      r.auroc = auroc(scores, *voted.labels);
      r.auroc_kind = "binary";
    }
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClassOnly) throw;
  }
  return r;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["n"] = n;
  j["ensemble_size"] = ensemble_size;
  j["accuracy"] = accuracy ? nlohmann::json(*accuracy) : nlohmann::json(nullptr);
  j["auroc"] = auroc ? nlohmann::json(*auroc) : nlohmann::json(nullptr);
  if (!auroc_kind.empty()) j["auroc_kind"] = auroc_kind;
  j["per_case"] = nlohmann::json::array();
  for (const auto& c : per_case) {
    nlohmann::json row;
    row["case_id"] = c.case_id;
    row["probs"] = c.probs;
    row["predicted"] = c.predicted;
    row["label"] = c.label ? nlohmann::json(*c.label) : nlohmann::json(nullptr);
    row["correct"] = c.correct ? nlohmann::json(*c.correct) : nlohmann::json(nullptr);
    j["per_case"].push_back(std::move(row));
  }
  return j.dump(2);
}

EvalReport evaluate_task(std::span<const Checkpoint> checkpoints, std::span<const CaseBundle> bundles, Task task,
                         std::size_t threads) {
  if (checkpoints.empty()) throw Error(ErrorCode::IncompatibleCheckpoint, "no checkpoints");
  std::vector<PredictionSet> sets;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    const auto& ck = checkpoints[i];
    if (ck.task != task_name(task))
      throw Error(ErrorCode::IncompatibleCheckpoint, "checkpoint " + std::to_string(i) + " was trained for " + ck.task);
    if (ck.model.num_classes != task_classes(task))
      throw Error(ErrorCode::IncompatibleCheckpoint, "checkpoint " + std::to_string(i) + " has " +
                                                         std::to_string(ck.model.num_classes) + " classes");
    if (!(ck.model == checkpoints.front().model))
      throw Error(ErrorCode::IncompatibleCheckpoint, "checkpoint " + std::to_string(i) + " has a different model config");
    const Model model = model_from_checkpoint(ck);
    sets.push_back(predict(model, bundles, "model" + std::to_string(i), task, threads));
  }
  return make_report(soft_vote(sets), task, checkpoints.size());
}

void write_probabilities_csv(const std::string& path, const PredictionSet& preds) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out << "case_id";
  for (std::size_t c = 0; c < preds.num_classes(); ++c) out << ",p_" << c;
  out << '\n' << std::setprecision(17);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out << preds.case_ids[i];
    for (double p : preds.probs[i]) out << ',' << p;
    out << '\n';
  }
}

PredictionSet read_probabilities_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  PredictionSet out;
  out.model_id = path;
  std::string line;
  std::size_t lineno = 0, K = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (lineno == 1) {
      if (cells.empty() || cells[0] != "case_id") throw Error(ErrorCode::BadValue, path + ": missing header");
      K = cells.size() - 1;
      continue;
    }
    if (cells.size() != K + 1)
      throw Error(ErrorCode::ClassCountMismatch, path + ":" + std::to_string(lineno) + ": expected " +
                                                     std::to_string(K) + " probabilities");
    out.case_ids.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t c = 1; c < cells.size(); ++c) {
      try {
        row.push_back(std::stod(cells[c]));
      } catch (const std::exception&) {
        throw Error(ErrorCode::BadValue, path + ":" + std::to_string(lineno) + ": '" + cells[c] + "'");
      }
    }
    out.probs.push_back(std::move(row));
  }
  return out;
}

}  // namespace fibro
