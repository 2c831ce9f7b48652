// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fibro/model.hpp"
#include "fibro/preprocess.hpp"
#include "fibro/synthetic.hpp"
#include "fibro/training.hpp"

namespace fibro {

/// Everything a CLI run depends on. Serialized as flat JSON with dotted keys
/// ("train.lr", "model.scale", ...).
struct RunConfig {
  PreprocessConfig preprocess;
  std::string model_scale = "paper";
  ModelConfig model = ModelConfig::paper();
  TrainConfig train;
  std::size_t folds = 4;
  Task task = Task::cirrhosis;
  SynthConfig synth;
  std::size_t ensemble_size = 4;

  // Paths; empty when unused by the command.
  std::string input_dir;
  std::string output_dir;
  std::string manifest;
  std::string bundles;
  std::string out;
  std::string checkpoint;
  std::vector<std::string> checkpoints;

  /// Re-checks every module invariant. Throws InvalidConfig.
  void validate() const;
};

/// All dotted keys understood by set_key, in serialization order.
const std::vector<std::string>& run_config_keys();

/// Parses `value` for `key`. Throws UnknownFlag for unknown keys and BadValue
/// (naming the key) for unparsable values. "model.scale" resets every model.*
/// field to the chosen profile before later keys apply.
void set_key(RunConfig& cfg, std::string_view key, std::string_view value);

/// Textual value of one key, as accepted back by set_key.
std::string get_key(const RunConfig& cfg, std::string_view key);

/// Flat JSON object, keys in run_config_keys() order.
std::string run_config_to_json(const RunConfig& cfg);

/// Applies every key of a flat JSON object on top of `base`. Unknown keys
/// are rejected.
RunConfig run_config_from_json(std::string_view json, RunConfig base = {});

/// FNV-1a 64 of run_config_to_json, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

}  // namespace fibro
