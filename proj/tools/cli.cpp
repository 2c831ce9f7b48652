// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>

#include "fibro/checkpoint.hpp"
#include "fibro/error.hpp"
#include "fibro/evaluate.hpp"
#include "fibro/parallel.hpp"
#include "fibro/synthetic.hpp"
#include "fibro/training.hpp"

namespace fibro::cli {

namespace fs = std::filesystem;

namespace {

struct Flag {
  const char* name;  // without leading dashes
  const char* key;
  const char* help;
};

const std::map<std::string, std::vector<Flag>>& command_flags() {
  static const std::map<std::string, std::vector<Flag>> flags{
      {"synth",
       {{"n", "synth.n", "number of cases"},
        {"extents", "synth.extents", "grid size nx,ny,nz"},
        {"p-drop", "synth.p_drop", "per-modality missing probability"},
        {"contrast", "synth.contrast", "blob brightness step per stage"},
        {"noise", "synth.noise", "Gaussian noise sigma"},
        {"prefix", "synth.prefix", "case id prefix"},
        {"seed", "seed", "random seed"},
        {"out", "path.out", "output directory"}}},
      {"preprocess",
       {{"input-dir", "path.input_dir", "directory the manifest paths are relative to"},
        {"output-dir", "path.output_dir", "bundle output directory"},
        {"manifest", "path.manifest", "manifest CSV"},
        {"spacing", "preprocess.spacing", "target spacing in mm"},
        {"extents", "preprocess.extents", "target grid before slice removal"},
        {"drop-slices", "preprocess.drop_slices", "leading axial slices to remove"}}},
      {"train",
       {{"bundles", "path.bundles", "bundle directory"},
        {"task", "train.task", "cirrhosis | substantial | four_class"},
        {"folds", "train.folds", "cross-validation folds"},
        {"seed", "seed", "master seed"},
        {"out", "path.out", "output directory"},
        {"epochs", "train.epochs", "maximum epochs"},
        {"lr", "train.lr", "peak learning rate"},
        {"lr-min", "train.lr_min", "final learning rate"},
        {"wd", "train.wd", "decoupled weight decay"},
        {"patience", "train.patience", "early stopping patience"},
        {"batch", "train.batch", "batch size"},
        {"augment-strength", "train.augment_strength", "augmentation strength or auto"},
        {"model-scale", "model.scale", "paper | desk"}}},
      {"predict",
       {{"checkpoint", "path.checkpoint", "checkpoint file"},
        {"bundles", "path.bundles", "bundle directory"},
        {"out", "path.out", "probability CSV"}}},
      {"evaluate",
       {{"bundles", "path.bundles", "bundle directory"},
        {"task", "train.task", "cirrhosis | substantial | four_class"},
        {"ensemble-size", "evaluate.ensemble_size", "expected number of checkpoints"},
        {"out", "path.out", "report JSON"}}},
  };
  return flags;
}

// Keys that reset other keys go first.
int key_rank(std::string_view key) {
  if (key == "model.scale") return 0;
  if (key == "train.task") return 1;
  return 2;
}

std::string quote(const std::string& v) {
  if (!v.empty() && v.find_first_of(" \t\"=") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + '"';
}

std::string detail(const Error& e) {
  std::string_view w = e.what();
  const std::string prefix = std::string(to_string(e.code())) + ": ";
  if (w.starts_with(prefix)) w.remove_prefix(prefix.size());
  return std::string(w);
}

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) throw Error(ErrorCode::BadValue, std::string(flag) + ": required");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
}

// Bundle dirs are read sorted by file name; an empty result is an error.
std::vector<CaseBundle> load_bundles(const std::string& dir) {
  auto bundles = read_bundle_dir(dir);
  if (bundles.empty()) throw Error(ErrorCode::Io, "no .cbun files in " + dir);
  return bundles;
}

void log_config(std::ostream& log, const RunConfig& cfg, const std::string& command) {
  log_line(log, {{"event", "start"},
                 {"command", command},
                 {"seed", std::to_string(cfg.train.seed)},
                 {"config_hash", config_hash(cfg)},
                 {"threads", std::to_string(thread_count())}});
  std::vector<std::pair<std::string, std::string>> fields{{"event", "config"}};
  for (const auto& key : run_config_keys()) fields.emplace_back(key, get_key(cfg, key));
  log_line(log, fields);
}

int run_synth(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.out, "--out");
  PreprocessConfig prep;
  prep.target_spacing = cfg.synth.spacing;
  prep.target_extents = cfg.synth.extents;
  prep.drop_leading_slices = 0;
  const auto result = generate_dataset(cfg.synth, cfg.out, prep);
  write_text(fs::path(cfg.out) / "config.json", run_config_to_json(cfg));
  log_line(log, {{"event", "done"},
                 {"command", "synth"},
                 {"cases", std::to_string(result.bundle_paths.size())},
                 {"manifest", result.manifest_path}});
  return 0;
}

int run_preprocess(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.manifest, "--manifest");
  require_path(cfg.output_dir, "--output-dir");
  const std::string input_dir =
      cfg.input_dir.empty() ? fs::path(cfg.manifest).parent_path().string() : cfg.input_dir;
  const auto written = preprocess_manifest(cfg.manifest, input_dir, cfg.output_dir, cfg.preprocess);
  log_line(log, {{"event", "done"},
                 {"command", "preprocess"},
                 {"bundles", std::to_string(written.size())},
                 {"output_dir", cfg.output_dir}});
  return 0;
}

int run_train(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.bundles, "--bundles");
  require_path(cfg.out, "--out");
  const auto bundles = load_bundles(cfg.bundles);
  if (bundles.front().extents != cfg.model.input_extents)
    log_line(log, {{"event", "warning"},
                   {"message", "bundle extents differ from model.input_extents"},
                   {"bundle_extents", std::to_string(bundles.front().extents[0]) + "x" +
                                          std::to_string(bundles.front().extents[1]) + "x" +
                                          std::to_string(bundles.front().extents[2])}});
  fs::create_directories(cfg.out);
  write_text(fs::path(cfg.out) / "config.json", run_config_to_json(cfg));
  std::mutex mu;
  const auto cv = train_cv(bundles, cfg.folds, cfg.model, cfg.train, cfg.task, cfg.out, thread_count(),
                           [&](std::size_t fold, const EpochRecord& r) {
                             std::ostringstream tl, vl, lr;
                             tl.precision(6);
                             vl.precision(6);
                             lr.precision(6);
                             tl << r.train_loss;
                             vl << r.val_loss;
                             lr << r.lr;
                             std::lock_guard lock(mu);
                             log_line(log, {{"event", "epoch"},
                                            {"fold", std::to_string(fold)},
                                            {"epoch", std::to_string(r.epoch)},
                                            {"train_loss", tl.str()},
                                            {"val_loss", vl.str()},
                                            {"lr", lr.str()}});
                           });
  for (const auto& f : cv.folds)
    log_line(log, {{"event", "fold_done"},
                   {"fold", std::to_string(f.fold)},
                   {"best_epoch", std::to_string(f.best_epoch)},
                   {"epochs_run", std::to_string(f.history.size())},
                   {"checkpoint", cv.checkpoint_paths[f.fold]}});
  log_line(log, {{"event", "done"}, {"command", "train"}, {"out", cfg.out}});
  return 0;
}

int run_predict(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.checkpoint, "--checkpoint");
  require_path(cfg.bundles, "--bundles");
  require_path(cfg.out, "--out");
  const auto ckpt = load_checkpoint(cfg.checkpoint);
  const Model model = model_from_checkpoint(ckpt);
  const auto bundles = load_bundles(cfg.bundles);
  const auto preds = predict(model, bundles, cfg.checkpoint, std::nullopt, thread_count());
  if (fs::path(cfg.out).has_parent_path()) fs::create_directories(fs::path(cfg.out).parent_path());
  write_probabilities_csv(cfg.out, preds);
  log_line(log, {{"event", "done"}, {"command", "predict"}, {"cases", std::to_string(preds.size())}, {"out", cfg.out}});
  return 0;
}

int run_evaluate(const RunConfig& cfg, std::ostream& log) {
  require_path(cfg.bundles, "--bundles");
  require_path(cfg.out, "--out");
  if (cfg.ensemble_size != 4)
    log_line(log, {{"event", "warning"},
                   {"message", "ensemble size differs from the four-fold default"},
                   {"ensemble_size", std::to_string(cfg.ensemble_size)}});
  if (cfg.checkpoints.size() != cfg.ensemble_size)
    throw Error(ErrorCode::InvalidConfig, "expected " + std::to_string(cfg.ensemble_size) + " checkpoints, got " +
                                              std::to_string(cfg.checkpoints.size()));
  std::vector<Checkpoint> ckpts;
  for (const auto& p : cfg.checkpoints) ckpts.push_back(load_checkpoint(p));
  const auto bundles = load_bundles(cfg.bundles);
  const auto report = evaluate_task(ckpts, bundles, cfg.task, thread_count());
  write_text(cfg.out, report.to_json());
  std::vector<std::pair<std::string, std::string>> fields{
      {"event", "done"}, {"command", "evaluate"}, {"task", report.task}, {"n", std::to_string(report.n)}};
  if (report.accuracy) fields.emplace_back("accuracy", std::to_string(*report.accuracy));
  if (report.auroc) fields.emplace_back("auroc", std::to_string(*report.auroc));
  fields.emplace_back("out", cfg.out);
  log_line(log, fields);
  return 0;
}

}  // namespace

void log_line(std::ostream& log, const std::vector<std::pair<std::string, std::string>>& fields) {
  std::string line;
  for (const auto& [k, v] : fields) {
    if (!line.empty()) line += ' ';
    line += k + '=' + quote(v);
  }
  log << line << '\n' << std::flush;
}

ParsedArgs parse_args(const std::vector<std::string>& args) {
  CLI::App app{"Missing-modality-robust multimodal volume classifier", "fibro"};
  app.set_help_all_flag("--help-all", "Expand all help");
  std::string config_path;
  app.add_option("--config", config_path, "flat JSON config with dotted keys");

  std::map<std::string, std::map<std::string, std::string>> values;
  std::vector<std::string> checkpoints;
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, flags] : command_flags()) {
    static const std::map<std::string, std::string> about{
        {"synth", "generate a labelled synthetic NIfTI dataset"},
        {"preprocess", "resample, normalize and bundle cases from a manifest"},
        {"train", "k-fold cross-validation training"},
        {"predict", "class probabilities from one checkpoint"},
        {"evaluate", "soft-vote ensemble report with accuracy and AUROC"}};
    CLI::App* sub = app.add_subcommand(name, about.at(name));
    sub->add_option("--config", config_path, "flat JSON config with dotted keys");
    for (const auto& f : flags) sub->add_option(std::string("--") + f.name, values[name][f.name], f.help);
    if (name == "evaluate") sub->add_option("--checkpoints", checkpoints, "checkpoint files")->expected(1, -1);
    subs[name] = sub;
  }

  ParsedArgs parsed;
  if (args.empty()) {
    parsed.usage = app.help();
    parsed.usage_exit = 2;
    return parsed;
  }
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) {
        parsed.usage = sub->help();
        return parsed;
      }
    parsed.usage = app.help();
    return parsed;
  } catch (const CLI::CallForAllHelp&) {
    parsed.usage = app.help("", CLI::AppFormatMode::All);
    return parsed;
  } catch (const CLI::ExtrasError& e) {
    throw Error(ErrorCode::UnknownFlag, e.what());
  } catch (const CLI::ParseError& e) {
    throw Error(ErrorCode::BadValue, e.what());
  }

  for (const auto& [name, sub] : subs)
    if (sub->parsed()) parsed.command = name;
  if (parsed.command.empty()) {
    parsed.usage = app.help();
    parsed.usage_exit = 2;
    return parsed;
  }

  RunConfig cfg;
  if (!config_path.empty()) cfg = run_config_from_json(read_text(config_path), cfg);

  std::vector<std::pair<const Flag*, std::string>> given;
  for (const auto& f : command_flags().at(parsed.command))
    if (subs[parsed.command]->count(std::string("--") + f.name) > 0) given.emplace_back(&f, values[parsed.command][f.name]);
  std::stable_sort(given.begin(), given.end(),
                   [](const auto& a, const auto& b) { return key_rank(a.first->key) < key_rank(b.first->key); });
  for (const auto& [flag, value] : given) {
    try {
      set_key(cfg, flag->key, value);
    } catch (const Error& e) {
      throw Error(e.code(), std::string("--") + flag->name + ": " + detail(e));
    }
  }
  if (parsed.command == "evaluate" && subs[parsed.command]->count("--checkpoints") > 0) cfg.checkpoints = checkpoints;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::BadValue, detail(e));
  }
  parsed.cfg = std::move(cfg);
  return parsed;
}

int run(const ParsedArgs& parsed, std::ostream& log) {
  const RunConfig& cfg = parsed.cfg;
  log_config(log, cfg, parsed.command);
  if (parsed.command == "synth") return run_synth(cfg, log);
  if (parsed.command == "preprocess") return run_preprocess(cfg, log);
  if (parsed.command == "train") return run_train(cfg, log);
  if (parsed.command == "predict") return run_predict(cfg, log);
  if (parsed.command == "evaluate") return run_evaluate(cfg, log);
  throw Error(ErrorCode::UnknownFlag, "unknown command " + parsed.command);
}

int main_entry(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  ParsedArgs parsed;
  try {
    parsed = parse_args(args);
  } catch (const Error& e) {
    log_line(err, {{"event", "error"}, {"code", std::string(to_string(e.code()))}, {"message", detail(e)}});
    return 2;
  }
  if (!parsed.usage.empty()) {
    (parsed.usage_exit == 0 ? out : err) << parsed.usage;
    return parsed.usage_exit;
  }
  try {
    return run(parsed, err);
  } catch (const Error& e) {
    log_line(err, {{"event", "error"}, {"code", std::string(to_string(e.code()))}, {"message", detail(e)}});
    return 1;
  } catch (const std::exception& e) {
    log_line(err, {{"event", "error"}, {"code", "Internal"}, {"message", e.what()}});
    return 1;
  }
}

}  // namespace fibro::cli
