// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fibro/preprocess.hpp"
#include "fibro/volume.hpp"

namespace fibro {

/// Toy multimodal phantoms whose blob brightness encodes the stage.
struct SynthConfig {
  std::size_t n_cases = 32;
  Extents extents{16, 16, 16};
  Vec3 spacing{1.5, 1.5, 3.0};
  std::array<double, 4> stage_weights{1.0, 1.0, 1.0, 1.0};
  double p_drop = 0.2;
  double contrast = 0.15;
  double noise = 0.05;
  std::uint64_t seed = 0;
  std::string id_prefix = "case";

  void validate() const;
};

struct RawCase {
  std::string case_id;
  std::array<std::optional<Volume>, kNumModalities> volumes;
  int stage = 1;
};

/// Stage per case: counts from the weights by largest remainder, then a
/// seeded shuffle.
std::vector<int> synth_stages(const SynthConfig& cfg);

/// Blob mean for a modality at a stage: 0.3 + s*d (T1WI), 0.3 + s*d/2 (T2WI),
/// 0.3 - s*d/2 (DWI).
double blob_mean(std::size_t modality, int stage, double contrast);

/// True for voxels inside the centered sphere of radius min(extent)/4.
bool in_blob(const Extents& e, std::size_t x, std::size_t y, std::size_t z);

/// Deterministic in (cfg.seed, index). Never drops all three modalities.
RawCase generate_case(const SynthConfig& cfg, std::size_t index);

struct SynthOutput {
  std::string manifest_path;
  std::vector<std::string> bundle_paths;
};

/// Writes raw/<id>_<modality>.nii, manifest.csv and bundles/<id>.cbun under
/// `out_dir`; bundles use `prep`.
SynthOutput generate_dataset(const SynthConfig& cfg, const std::string& out_dir, const PreprocessConfig& prep);

/// In-memory variant of generate_dataset.
std::vector<CaseBundle> generate_bundles(const SynthConfig& cfg, const PreprocessConfig& prep);

}  // namespace fibro
