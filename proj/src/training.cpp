// SPDX-License-Identifier: Apache-2.0
#include "fibro/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fibro/error.hpp"
#include "fibro/optim.hpp"
#include "fibro/parallel.hpp"
#include "fibro/random.hpp"

namespace fibro {

namespace fs = std::filesystem;

std::string_view task_name(Task task) {
  switch (task) {
    case Task::cirrhosis: return "cirrhosis";
    case Task::substantial: return "substantial";
    case Task::four_class: return "four_class";
  }
  return "unknown";
}

Task parse_task(std::string_view name) {
  for (Task t : {Task::cirrhosis, Task::substantial, Task::four_class})
    if (task_name(t) == name) return t;
  throw Error(ErrorCode::BadValue, "task: unknown task '" + std::string(name) + "'");
}

std::size_t task_classes(Task task) { return task == Task::four_class ? 4 : 2; }

std::size_t remap_labels(int stage, Task task) {
  if (stage < 1 || stage > 4) throw Error(ErrorCode::BadStage, "stage " + std::to_string(stage));
  switch (task) {
    case Task::cirrhosis: return stage == 4 ? 1 : 0;
    case Task::substantial: return stage == 1 ? 0 : 1;
    case Task::four_class: return static_cast<std::size_t>(stage - 1);
  }
  return 0;
}

std::vector<std::size_t> bundle_labels(std::span<const CaseBundle> bundles, Task task) {
  std::vector<std::size_t> labels;
  labels.reserve(bundles.size());
  for (const auto& b : bundles) {
    if (!b.stage) throw Error(ErrorCode::BadStage, b.case_id + ": no stage label");
    labels.push_back(remap_labels(*b.stage, task));
  }
  return labels;
}

namespace {

// Sample indices grouped by class, each group shuffled by `seed`.
std::vector<std::vector<std::size_t>> shuffled_classes(std::span<const std::size_t> labels, std::uint64_t seed,
                                                       bool require_all) {
  if (labels.empty()) throw Error(ErrorCode::EmptyClass, "no samples");
  const std::size_t K = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<std::vector<std::size_t>> groups(K);
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  for (std::size_t c = 0; c < K; ++c) {
    if (require_all && groups[c].empty()) throw Error(ErrorCode::EmptyClass, "class " + std::to_string(c) + " is empty");
    Rng rng(derive_seed(seed, c));
    std::shuffle(groups[c].begin(), groups[c].end(), rng);
  }
  return groups;
}

}  // namespace

Split stratified_split(std::span<const std::size_t> labels, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw Error(ErrorCode::InvalidConfig, "split ratio must be in [0, 1]");
  const auto groups = shuffled_classes(labels, seed, true);
  const std::size_t K = groups.size();
  std::vector<std::size_t> take(K);
  std::vector<double> remainder(K);
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < K; ++c) {
    const double exact = ratio * static_cast<double>(groups[c].size());
    take[c] = static_cast<std::size_t>(std::floor(exact));
    remainder[c] = exact - static_cast<double>(take[c]);
    assigned += take[c];
  }
  const auto target = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(labels.size())));
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < target && i < K; ++i) {
    const std::size_t c = order[i];
    if (take[c] < groups[c].size()) {
      ++take[c];
      ++assigned;
    }
  }
  Split s;
  for (std::size_t c = 0; c < K; ++c) {
    s.train.insert(s.train.end(), groups[c].begin(), groups[c].begin() + static_cast<std::ptrdiff_t>(take[c]));
    s.validation.insert(s.validation.end(), groups[c].begin() + static_cast<std::ptrdiff_t>(take[c]), groups[c].end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  return s;
}

std::vector<std::size_t> SplitPlan::members(std::size_t f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] == f) out.push_back(i);
  return out;
}

std::vector<std::size_t> SplitPlan::complement(std::size_t f) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i)
    if (fold[i] != f) out.push_back(i);
  return out;
}

SplitPlan stratified_kfold(std::span<const std::size_t> labels, std::size_t k, std::uint64_t seed) {
  if (k < 1) throw Error(ErrorCode::InvalidConfig, "k must be >= 1");
  SplitPlan plan{k, seed, std::vector<std::size_t>(labels.size(), 0)};
  if (labels.empty()) return plan;
  std::size_t offset = 0;
  for (const auto& group : shuffled_classes(labels, seed, false)) {
    for (std::size_t i = 0; i < group.size(); ++i) plan.fold[group[i]] = (offset + i) % k;
    offset = (offset + group.size()) % k;
  }
  return plan;
}

double cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size())
    throw Error(ErrorCode::BadLabel, "label " + std::to_string(label) + " with " + std::to_string(logits.size()) +
                                         " classes");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return std::log(z) + mx - logits[label];
}

bool EarlyStopping::update(int epoch, double loss) {
  if (best_epoch_ < 0 || loss < best_) {
    best_ = loss;
    best_epoch_ = epoch;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed) {
  if (batch_size < 1) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < n; i += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  return batches;
}

double augment_strength_for(std::size_t n_train) {
  return std::clamp(1.0 - static_cast<double>(n_train) / 1000.0, 0.2, 0.8);
}

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw Error(ErrorCode::InvalidConfig, "train: " + what); };
  if (!(lr_min > 0.0 && lr_min <= lr)) bad("need 0 < lr_min <= lr");
  if (!(weight_decay >= 0.0)) bad("weight_decay must be >= 0");
  if (epochs < 1) bad("epochs must be >= 1");
  if (patience < 1 || patience > epochs) bad("patience must be in [1, epochs]");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (augment_strength && !(*augment_strength >= 0.0 && *augment_strength <= 1.0))
    bad("augment_strength must be in [0, 1]");
}

FoldResult train_fold(std::span<const CaseBundle> bundles, std::span<const std::size_t> labels,
                      std::span<const std::size_t> train, std::span<const std::size_t> validation,
                      const ModelConfig& model_cfg, const TrainConfig& cfg, Task task, std::uint64_t seed,
                      std::size_t fold, const EpochCallback& on_epoch) {
  cfg.validate();
  model_cfg.validate();
  if (model_cfg.num_classes != task_classes(task))
    throw Error(ErrorCode::InvalidConfig, "model has " + std::to_string(model_cfg.num_classes) + " classes, task " +
                                              std::string(task_name(task)) + " needs " +
                                              std::to_string(task_classes(task)));
  if (train.empty()) throw Error(ErrorCode::EmptyFold, "fold " + std::to_string(fold) + " has no training cases");
  if (validation.empty())
    throw Error(ErrorCode::EmptyFold, "fold " + std::to_string(fold) + " has no validation cases");

  Model model(model_cfg, derive_seed(seed, 1));
  const auto params = model.parameters().tensors();
  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const ScheduleConfig sched{cfg.lr, cfg.lr_min, cfg.epochs};
  const double strength = cfg.augment_strength.value_or(augment_strength_for(train.size()));
  Rng drop_rng(derive_seed(seed, 3));
  const DropoutCtx drop{model_cfg.dropout, true, &drop_rng};

  FoldResult result;
  result.fold = fold;
  result.seed = seed;
  EarlyStopping stopper(cfg.patience);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, sched);
    const std::uint64_t aug_seed = derive_seed(seed, 4, static_cast<std::uint64_t>(epoch));
    double train_loss = 0.0;
    for (const auto& batch : make_batches(train.size(), cfg.batch_size, derive_seed(seed, 2, epoch))) {
      model.parameters().zero_grad();
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (std::size_t pos : batch) {
        const std::size_t idx = train[pos];
        const CaseBundle sample = strength > 0.0 ? augment(bundles[idx], derive_seed(aug_seed, idx), strength)
                                                 : bundles[idx];
        Tape tape;
        const TensorPtr loss = softmax_cross_entropy(tape, model.forward(tape, sample, drop), labels[idx]);
        if (!std::isfinite(loss->value[0]))
          throw Error(ErrorCode::NonFiniteLoss, "fold " + std::to_string(fold) + " epoch " + std::to_string(epoch) +
                                                    " case " + sample.case_id);
        train_loss += loss->value[0];
        tape.backward(scale(tape, loss, inv), params);
      }
      opt.step(params, lr);
    }
    train_loss /= static_cast<double>(train.size());

    double val_loss = 0.0;
    for (std::size_t idx : validation) val_loss += cross_entropy(model.logits(bundles[idx]), labels[idx]);
    val_loss /= static_cast<double>(validation.size());
    if (!std::isfinite(val_loss))
      throw Error(ErrorCode::NonFiniteLoss, "fold " + std::to_string(fold) + " epoch " + std::to_string(epoch) +
                                                " validation loss");

    const EpochRecord rec{epoch, train_loss, val_loss, lr};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(fold, rec);
    if (stopper.update(epoch, val_loss)) result.best = make_checkpoint(model, std::string(task_name(task)));
    if (stopper.should_stop()) break;
  }
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  return result;
}

FoldResult train_fold(std::span<const CaseBundle> bundles, std::size_t fold, const SplitPlan& plan,
                      const ModelConfig& model_cfg, const TrainConfig& cfg, Task task, const EpochCallback& on_epoch) {
  if (fold >= plan.k) throw Error(ErrorCode::EmptyFold, "fold " + std::to_string(fold) + " out of range");
  if (plan.fold.size() != bundles.size()) throw Error(ErrorCode::InvalidConfig, "plan does not match bundles");
  const auto labels = bundle_labels(bundles, task);
  const auto train = plan.complement(fold);
  const auto val = plan.members(fold);
  return train_fold(bundles, labels, train, val, model_cfg, cfg, task, fold_seed(cfg.seed, fold), fold, on_epoch);
}

std::uint64_t fold_seed(std::uint64_t master, std::size_t fold) { return derive_seed(master, 0xf01d, fold); }

void write_history_csv(const std::string& path, std::span<const EpochRecord> history) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path);
  out << "epoch,train_loss,val_loss,lr\n" << std::setprecision(17);
  for (const auto& r : history) out << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.lr << '\n';
}

CvResult train_cv(std::span<const CaseBundle> bundles, std::size_t k, const ModelConfig& model_cfg,
                  const TrainConfig& cfg, Task task, const std::string& out_dir, std::size_t threads,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  const auto labels = bundle_labels(bundles, task);
  CvResult cv;
  cv.plan = stratified_kfold(labels, k, cfg.seed);
  cv.folds.resize(k);
  parallel_for(k, threads, [&](std::size_t f) {
    cv.folds[f] = train_fold(bundles, labels, cv.plan.complement(f), cv.plan.members(f), model_cfg, cfg, task,
                             fold_seed(cfg.seed, f), f, on_epoch);
  });
  if (out_dir.empty()) return cv;

  fs::create_directories(out_dir);
  nlohmann::json manifest;
  manifest["task"] = task_name(task);
  manifest["k"] = k;
  manifest["seed"] = cfg.seed;
  manifest["folds"] = nlohmann::json::array();
  for (std::size_t f = 0; f < k; ++f) {
    const auto& r = cv.folds[f];
    const std::string ckpt = "fold" + std::to_string(f) + ".ckpt";
    const std::string hist = "fold" + std::to_string(f) + "_history.csv";
    save_checkpoint((fs::path(out_dir) / ckpt).string(), r.best);
    write_history_csv((fs::path(out_dir) / hist).string(), r.history);
    cv.checkpoint_paths.push_back((fs::path(out_dir) / ckpt).string());
    std::vector<std::string> train_ids, val_ids;
    for (std::size_t i : cv.plan.complement(f)) train_ids.push_back(bundles[i].case_id);
    for (std::size_t i : cv.plan.members(f)) val_ids.push_back(bundles[i].case_id);
    manifest["folds"].push_back({{"fold", f},
                                 {"seed", r.seed},
                                 {"checkpoint", ckpt},
                                 {"history", hist},
                                 {"best_epoch", r.best_epoch},
                                 {"best_val_loss", r.best_val_loss},
                                 {"epochs_run", r.history.size()},
                                 {"train_ids", train_ids},
                                 {"validation_ids", val_ids}});
  }
  std::ofstream out(fs::path(out_dir) / "manifest.json", std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write manifest in " + out_dir);
  out << manifest.dump(2) << '\n';
  return cv;
}

}  // namespace fibro
