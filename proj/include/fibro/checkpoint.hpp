// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fibro/model.hpp"

namespace fibro {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Decoded .ckpt contents. Values are held at file precision (float32).
struct Checkpoint {
  ModelConfig model;
  std::string task;
  std::vector<std::pair<std::string, Tensor>> params;

  bool operator==(const Checkpoint&) const;
};

/// Snapshot of a model's current values.
Checkpoint make_checkpoint(const Model& model, const std::string& task);

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
/// Throws IncompatibleCheckpoint on malformed input.
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// Builds a model from the checkpoint's config and copies every parameter in.
/// Throws IncompatibleCheckpoint when names or shapes disagree.
Model model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace fibro
